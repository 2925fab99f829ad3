"""A small trainable stack on icosahedral signals with hand-written backward passes.

Activations travel as padded ``(B, Ctot, 5H, W)`` arrays; only chart
interiors carry meaning between layers. Every layer returns a cache from
``forward`` that its ``backward`` consumes.
"""
from __future__ import annotations

import json
import math
import os
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, FormatError, NumericalError, ShapeError
from .fields import REGULAR, FieldType, IcoSignal
from .geometry import Atlas, build_atlas, build_grid, chart_shape
from .ops import (
    NUM_TAPS,
    col2im,
    conv_backward,
    conv_forward,
    expand_kernel,
    expand_kernel_adjoint,
    gpad_adjoint,
    gpad_array,
    hex_taps,
    im2col,
    out_resolution,
    place_interior,
    take_interior,
    taps_to_kernel,
    zero_pad_adjoint,
    zero_pad_array,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


@lru_cache(maxsize=None)
def atlas_for(r: int) -> Atlas:
    return build_atlas(build_grid(r))


@lru_cache(maxsize=None)
def _stat_index(r: int) -> np.ndarray:
    """Flat plane indices of non-corner interior positions."""
    return np.flatnonzero(atlas_for(r).interior_non_corner.reshape(-1))


# --------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def __init__(self, r_in: int, field_in: FieldType):
        self.r_in = r_in
        self.field_in = field_in
        self.r_out = r_in
        self.field_out = field_in
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def spec(self) -> dict:
        return {"kind": self.kind, "r_in": self.r_in, "field_in": self.field_in.to_json()}

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError


class GConv(Layer):
    """Gauge-equivariant convolution, with switches for the two ablations.

    ``gauge_pad=False`` replaces G-padding by zero padding; ``expand=False``
    trains all ``(C_out*R_out, C_in*R_in, 7)`` hexagonal taps freely.
    """

    kind = "gconv"

    def __init__(self, r_in, field_in, field_out, stride=1, gauge_pad=True, expand=True, rng=None, dtype=np.float32):
        super().__init__(r_in, field_in)
        self.field_out = field_out
        self.stride = stride
        self.r_out = out_resolution(r_in, stride)
        self.gauge_pad = gauge_pad
        self.expand = expand
        self.rep_in = field_in.homogeneous
        self.rep_out = field_out.homogeneous
        if self.rep_in is None or self.rep_out is None:
            raise ShapeError("gconv needs homogeneous field types")
        if expand:
            shape = (field_out.num_fields, field_in.total_channels, NUM_TAPS)
        else:
            shape = (field_out.total_channels, field_in.total_channels, NUM_TAPS)
        fan_in = field_in.total_channels * NUM_TAPS
        bound = math.sqrt(6.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.params["w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)

    def spec(self):
        d = super().spec()
        d.update(field_out=self.field_out.to_json(), stride=self.stride, gauge_pad=self.gauge_pad, expand=self.expand)
        return d

    def taps(self) -> np.ndarray:
        w = self.params["w"]
        if not self.expand:
            return w
        return hex_taps(expand_kernel(w, self.rep_in, self.rep_out))

    def _pad(self, x):
        if self.gauge_pad:
            return gpad_array(x, atlas_for(self.r_in), self.field_in)
        return zero_pad_array(x, atlas_for(self.r_in))

    def forward(self, x, train):
        taps = self.taps()
        y, cols = conv_forward(self._pad(x), taps, self.r_in, self.stride)
        return y, (cols, taps)

    def backward(self, dy, cache):
        cols, taps = cache
        dxp, dtaps = conv_backward(dy, cols, taps, self.r_in, self.stride)
        atlas = atlas_for(self.r_in)
        dx = gpad_adjoint(dxp, atlas, self.field_in) if self.gauge_pad else zero_pad_adjoint(dxp, atlas)
        if self.expand:
            dw = expand_kernel_adjoint(taps_to_kernel(dtaps), self.rep_in, self.rep_out)
        else:
            dw = dtaps
        return dx, {"w": dw.astype(self.params["w"].dtype, copy=False)}


class BatchNorm(Layer):
    """Batch normalisation with one mean/variance and one affine pair per field.

    Statistics pool over the batch, the field's orientation channels and all
    non-corner interior positions, so the layer commutes with the symmetry
    action.
    """

    kind = "bn"

    def __init__(self, r_in, field_in, dtype=np.float32):
        super().__init__(r_in, field_in)
        c = field_in.num_fields
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    def _view(self, x):
        b = x.shape[0]
        rep = self.field_in.entries[0][0].dim
        idx = _stat_index(self.r_in)
        return x.reshape(b, self.field_in.num_fields, rep, -1)[..., idx], idx

    def forward(self, x, train):
        if x.shape[0] == 0:
            raise ShapeError("batch normalisation needs a non-empty batch")
        xv, idx = self._view(x)
        if train:
            mean = xv.mean(axis=(0, 2, 3))
            var = xv.var(axis=(0, 2, 3))
            m = BN_MOMENTUM
            n = xv.shape[0] * xv.shape[2] * xv.shape[3]
            unbiased = var * n / max(n - 1, 1)
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (xv - mean[None, :, None, None]) * inv[None, :, None, None]
        yv = xhat * self.params["gamma"][None, :, None, None] + self.params["beta"][None, :, None, None]
        y = np.zeros_like(x)
        b = x.shape[0]
        y.reshape(b, self.field_in.num_fields, -1, y.shape[2] * y.shape[3])[..., idx] = yv
        return y, (xhat.astype(x.dtype, copy=False), inv, train)

    def backward(self, dy, cache):
        xhat, inv, train = cache
        dyv, idx = self._view(dy)
        g = self.params["gamma"]
        dgamma = (dyv * xhat).sum(axis=(0, 2, 3))
        dbeta = dyv.sum(axis=(0, 2, 3))
        dxhat = dyv * g[None, :, None, None]
        if train:
            n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
            dxv = (inv[None, :, None, None] / n) * (
                n * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            dxv = dxhat * inv[None, :, None, None]
        dx = np.zeros_like(dy)
        b = dy.shape[0]
        dx.reshape(b, self.field_in.num_fields, -1, dy.shape[2] * dy.shape[3])[..., idx] = dxv
        return dx, {"gamma": dgamma.astype(g.dtype), "beta": dbeta.astype(g.dtype)}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


class OrientationPool(Layer):
    kind = "orientation_pool"

    def __init__(self, r_in, field_in):
        super().__init__(r_in, field_in)
        if field_in.homogeneous != REGULAR:
            raise TypeError("orientation pooling needs regular fields")
        self.field_out = FieldType.scalar(field_in.num_fields)

    def forward(self, x, train):
        b, _, hh, w = x.shape
        v = x.reshape(b, self.field_in.num_fields, 6, hh, w)
        arg = v.argmax(axis=2)
        return np.take_along_axis(v, arg[:, :, None], axis=2)[:, :, 0], arg

    def backward(self, dy, cache):
        arg = cache
        b, c, hh, w = dy.shape
        dx = np.zeros((b, c, 6, hh, w), dtype=dy.dtype)
        np.put_along_axis(dx, arg[:, :, None], dy[:, :, None], axis=2)
        return dx.reshape(b, c * 6, hh, w), {}


class PoolHex(Layer):
    """Stride-2 max over the centre and 6-ring, G-padding first."""

    kind = "pool_hex"

    def __init__(self, r_in, field_in):
        super().__init__(r_in, field_in)
        self.r_out = out_resolution(r_in, 2)

    def forward(self, x, train):
        atlas = atlas_for(self.r_in)
        cols = im2col(gpad_array(x, atlas, self.field_in), self.r_in, 2)
        arg = cols.argmax(axis=2)
        vals = np.take_along_axis(cols, arg[:, :, None], axis=2)[:, :, 0]
        return place_interior(vals, self.r_out), (arg, cols.shape)

    def backward(self, dy, cache):
        arg, shape = cache
        d = take_interior(dy, self.r_out)
        dcols = np.zeros(shape, dtype=dy.dtype)
        np.put_along_axis(dcols, arg[:, :, None], d[:, :, None], axis=2)
        dxp = col2im(dcols, self.r_in, 2)
        return gpad_adjoint(dxp, atlas_for(self.r_in), self.field_in), {}


class GlobalPool(Layer):
    """Max over orientations at every position, then the mean over
    non-corner interior positions.

    The orientation max has to come first: the symmetry action shifts
    orientation channels by a different amount at each pixel, so per-channel
    spatial means are not invariant.
    """

    kind = "global_pool"

    def forward(self, x, train):
        idx = _stat_index(self.r_in)
        b, c = x.shape[:2]
        v = x.reshape(b, c, -1)[..., idx]
        arg = None
        if self.field_in.homogeneous == REGULAR:
            v = v.reshape(b, c // 6, 6, -1)
            arg = v.argmax(axis=2)
            v = np.take_along_axis(v, arg[:, :, None], axis=2)[:, :, 0]
        return v.mean(axis=-1), (arg, x.shape)

    def backward(self, dy, cache):
        arg, shape = cache
        idx = _stat_index(self.r_in)
        b, c = shape[:2]
        dv = np.broadcast_to((dy / len(idx))[..., None], dy.shape + (len(idx),))
        if arg is not None:
            full = np.zeros((b, c // 6, 6, len(idx)), dtype=dy.dtype)
            np.put_along_axis(full, arg[:, :, None], dv[:, :, None], axis=2)
            dv = full.reshape(b, c, len(idx))
        dx = np.zeros(shape, dtype=dy.dtype)
        dx.reshape(b, c, -1)[..., idx] = dv
        return dx, {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        super().__init__(0, FieldType.scalar(n_in))
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        bound = math.sqrt(6.0 / n_in)
        self.params["w"] = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    def forward(self, x, train):
        # per-item products keep each row independent of the batch size
        return np.matmul(x[:, None, :], self.params["w"].T)[:, 0] + self.params["b"], x

    def backward(self, dy, cache):
        x = cache
        return dy @ self.params["w"], {"w": dy.T @ x, "b": dy.sum(axis=0)}


class DenseReLU(ReLU):
    """ReLU between dense layers (vector activations)."""

    kind = "dense_relu"

    def __init__(self, n):
        super().__init__(0, FieldType.scalar(n))
        self.n = n

    def spec(self):
        return {"kind": self.kind, "n": self.n}


# --------------------------------------------------------------------------
# model


class Model:
    """An ordered list of layers mapping an icosahedral signal to logits."""

    def __init__(self, layers: list[Layer], arch: str = "custom", resolution: int | None = None):
        self.layers = layers
        self.arch = arch
        self.resolution = layers[0].r_in if resolution is None else resolution
        self.field_in = layers[0].field_in
        self.meta: dict = {}
        self._check()

    def _check(self):
        r, ft = self.layers[0].r_in, self.layers[0].field_in
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Dense, DenseReLU)):
                continue
            if layer.r_in != r or layer.field_in != ft:
                raise ShapeError(f"layer {i} ({layer.kind}) expects r={layer.r_in} {layer.field_in}, gets r={r} {ft}")
            r, ft = layer.r_out, layer.field_out

    @property
    def num_classes(self) -> int:
        return self.layers[-1].n_out

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                yield f"{i}.{k}", v

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers.items():
                yield f"{i}.{k}", v

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def num_params(self) -> int:
        return sum(v.size for _, v in self.named_params())

    @property
    def dtype(self):
        return self.layers[0].params["w"].dtype if self.layers[0].params else np.float32

    def astype(self, dtype) -> Model:
        for layer in self.layers:
            for d in (layer.params, layer.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
        return self

    def forward(self, x, train: bool = False):
        if isinstance(x, IcoSignal):
            if x.resolution != self.resolution or x.field_type != self.field_in:
                raise ShapeError(f"model takes r={self.resolution} {self.field_in}, got r={x.resolution} {x.field_type}")
            x = x.data
        h, w = chart_shape(self.resolution)
        if x.ndim != 4 or x.shape[1:] != (self.field_in.total_channels, 5 * h, w):
            raise ShapeError(f"input of shape {x.shape} does not fit the model")
        x = x.astype(self.dtype, copy=False)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        return x, {"model": id(self), "caches": caches}

    def backward(self, cache, dlogits):
        if cache.get("model") != id(self) or len(cache["caches"]) != len(self.layers):
            raise ContractViolation("cache was not produced by this model")
        grads = {}
        d = dlogits.astype(self.dtype, copy=False)
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(d, cache["caches"][i])
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return grads, d

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        out = []
        for s in range(0, x.shape[0], batch_size):
            logits, _ = self.forward(x[s : s + batch_size], train=False)
            out.append(logits)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), dtype=self.dtype)


def forward(model: Model, signal, train: bool = False):
    return model.forward(signal, train)


def backward(model: Model, cache, labels, reduction: str = "mean"):
    """Loss and parameter gradients for integer ``labels`` given a forward cache."""
    logits = cache.get("logits")
    if logits is None:
        raise ContractViolation("cache lacks logits; use forward_with_logits")
    loss, dlogits = softmax_xent(logits, labels, reduction)
    grads, _ = model.backward(cache, dlogits)
    return loss, grads


def forward_with_logits(model: Model, signal, train: bool = False):
    logits, cache = model.forward(signal, train)
    cache["logits"] = logits
    return logits, cache


def softmax_xent(logits, labels, reduction: str = "mean"):
    """Cross-entropy with a stabilised log-sum-exp. Returns (loss, dlogits)."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(labels)), labels]
    p = np.exp(z - lse[:, None])
    p[np.arange(len(labels)), labels] -= 1.0
    if reduction == "mean":
        loss, grad = nll.mean(), p / len(labels)
    elif reduction == "sum":
        loss, grad = nll.sum(), p
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if not np.isfinite(loss):
        raise NumericalError("cross-entropy loss is not finite")
    return float(loss), grad.astype(np.asarray(logits).dtype)


class SGD:
    """SGD with classical momentum: v <- mu v + g; w <- w - lr v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        sgd_step(params, grads, self.lr, self.momentum, self.velocity)


def sgd_step(params, grads, lr, momentum=0.9, velocity=None):
    """In-place momentum update; returns the velocity dict."""
    velocity = {} if velocity is None else velocity
    for k, w in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"gradient of {k} is not finite")
        v = velocity.get(k)
        v = g.copy() if v is None else momentum * v + g
        velocity[k] = v
        w -= (lr * v).astype(w.dtype, copy=False)
    return velocity


# --------------------------------------------------------------------------
# architectures

BASE_CHANNELS = (8, 16, 16, 24, 24, 32, 64)
BASE_STRIDES = (1, 2, 1, 2, 1, 2, 1)
HEAD = (64, 32)
ARCHS = ("r2r", "s2r", "s2s", "np", "ne", "np+ne")


def _scaled(c: int) -> int:
    # matches the weight count of an R2R layer with c regular fields
    return int(round(c * math.sqrt(6)))


def build_model(arch: str = "r2r", resolution: int = 4, num_classes: int = 10, seed: int = 0,
                channels=BASE_CHANNELS, strides=BASE_STRIDES, head=HEAD, dtype=np.float32) -> Model:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHS)}")
    if len(channels) != len(strides):
        raise ValueError("channels and strides differ in length")
    downs = sum(s == 2 for s in strides)
    if downs >= resolution:
        # r=0 has no non-corner pixels left to pool over
        raise ValueError(f"{downs} stride-2 layers need resolution >= {downs + 1}, got {resolution}")
    rng = np.random.default_rng(seed)
    gauge_pad = arch not in ("np", "np+ne")
    expand = arch not in ("ne", "np+ne")
    layers: list[Layer] = []
    r = resolution
    ft = FieldType.scalar(1)
    for i, (c, s) in enumerate(zip(channels, strides)):
        if arch in ("r2r", "np"):
            out = FieldType.regular(c)
        elif arch in ("s2r", "s2s"):
            out = FieldType.regular(_scaled(c)) if arch == "s2r" else FieldType.scalar(_scaled(c))
        else:
            out = FieldType.scalar(_scaled(c))
        conv = GConv(r, ft, out, s, gauge_pad=gauge_pad, expand=expand, rng=rng, dtype=dtype)
        layers += [conv, BatchNorm(conv.r_out, out, dtype), ReLU(conv.r_out, out)]
        r, ft = conv.r_out, out
        if arch == "s2r":
            layers.append(OrientationPool(r, ft))
            ft = layers[-1].field_out
    layers.append(GlobalPool(r, ft))
    width = ft.num_fields
    for h in head:
        layers += [Dense(width, h, rng, dtype), DenseReLU(h)]
        width = h
    layers.append(Dense(width, num_classes, rng, dtype))
    return Model(layers, arch, resolution)


def _layer_from_spec(spec: dict, dtype) -> Layer:
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["n_in"], spec["n_out"], dtype=dtype)
    if kind == "dense_relu":
        return DenseReLU(spec["n"])
    r, ft = spec["r_in"], FieldType.from_json(spec["field_in"])
    if kind == "gconv":
        return GConv(r, ft, FieldType.from_json(spec["field_out"]), spec["stride"], spec["gauge_pad"], spec["expand"], dtype=dtype)
    cls = {"bn": BatchNorm, "relu": ReLU, "orientation_pool": OrientationPool, "pool_hex": PoolHex, "global_pool": GlobalPool}
    if kind not in cls:
        raise FormatError(f"unknown layer kind {kind!r}")
    return cls[kind](r, ft, dtype) if kind == "bn" else cls[kind](r, ft)


# --------------------------------------------------------------------------
# checkpoints: a JSON manifest plus one little-endian blob


def save_model(model: Model, path) -> None:
    """Write ``manifest.json`` and ``params.bin`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for group, items in (("param", model.named_params()), ("buffer", model.named_buffers())):
        for name, arr in items:
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            raw = le.tobytes(order="C")
            entries.append({"name": name, "group": group, "shape": list(arr.shape), "dtype": arr.dtype.name,
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "resolution": model.resolution,
        "layers": [layer.spec() for layer in model.layers],
        "tensors": entries,
        "blob": "params.bin",
        "blob_bytes": offset,
        "meta": model.meta,
    }
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(b"".join(chunks))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_model(path) -> Model:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: manifest is not JSON: {exc}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{mpath}: unsupported checkpoint version {manifest.get('version')!r}")
    with open(os.path.join(path, manifest["blob"]), "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(f"parameter blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}",
                          offset=min(len(blob), manifest["blob_bytes"]))
    dtypes = {e["dtype"] for e in manifest["tensors"] if e["group"] == "param"}
    dtype = np.dtype(dtypes.pop()) if len(dtypes) == 1 else np.float32
    layers = [_layer_from_spec(s, dtype) for s in manifest["layers"]]
    model = Model(layers, manifest["arch"], manifest["resolution"])
    model.meta = dict(manifest.get("meta", {}))
    for e in manifest["tensors"]:
        i, key = e["name"].split(".", 1)
        layer = layers[int(i)]
        target = layer.params if e["group"] == "param" else layer.buffers
        if key not in target:
            raise FormatError(f"manifest names unknown tensor {e['name']}")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        need = int(np.prod(e["shape"])) * dt.itemsize
        if need != e["nbytes"] or e["offset"] + need > len(blob):
            raise FormatError(f"tensor {e['name']} does not fit the blob", offset=e["offset"])
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"])), offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
        if arr.shape != target[key].shape:
            raise FormatError(f"tensor {e['name']} has shape {arr.shape}, layer expects {target[key].shape}")
        target[key] = arr
    return model
