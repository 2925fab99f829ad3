"""Verification suites shared by ``icogauge check`` and the test-suite.

Every suite returns a list of :class:`Result` rows; a suite passes when every
row does.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import FieldType, IcoSignal, random_signal, signal_to_pixels
from .geometry import NUM_CORNERS, build_atlas, build_grid, build_symmetry_group
from .nn import (
    BatchNorm,
    Dense,
    GConv,
    GlobalPool,
    OrientationPool,
    PoolHex,
    ReLU,
    build_model,
    forward_with_logits,
    softmax_xent,
    backward as model_backward,
)
from .ops import HEX_TAPS, act, expand_kernel, gconv, gpad, orientation_pool, pool_hex
from .oracle import build_stencil, numeric_grad, oracle_adjacency, oracle_gconv

SUITES = ("atlas", "kernel", "oracle", "equivariance", "gradcheck")

COMBOS = {
    "s2s": (FieldType.scalar(2), FieldType.scalar(3)),
    "s2r": (FieldType.scalar(2), FieldType.regular(3)),
    "r2r": (FieldType.regular(2), FieldType.regular(3)),
}


@dataclass
class Result:
    name: str
    value: float
    tol: float
    ok: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.ok else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{tag}  {self.name}: {self.value:.3g} (tolerance {self.tol:.3g}){extra}"


def _at_most(name, value, tol, detail=""):
    return Result(name, float(value), float(tol), bool(value <= tol), detail)


class _Geo:
    """Grid, atlas and group per resolution, built once."""

    def __init__(self):
        self.cache = {}
        self.flat = {}

    def grid_atlas(self, r):
        if r in self.cache:
            return self.cache[r][:2]
        if r not in self.flat:
            g = build_grid(r)
            self.flat[r] = (g, build_atlas(g))
        return self.flat[r]

    def __call__(self, r):
        if r not in self.cache:
            g, a = self.grid_atlas(r)
            self.cache[r] = (g, a, build_symmetry_group(g, a))
        return self.cache[r]


GEO = _Geo()


# --------------------------------------------------------------------------
# atlas and group


def suite_atlas(resolutions=(1, 2, 3, 4), with_group: bool = True) -> list[Result]:
    out = []
    for r in resolutions:
        g, a = GEO.grid_atlas(r)
        report = oracle_adjacency(g, a)
        out.append(_at_most(f"atlas r={r} adjacency mismatches", len(report), 0, report[0] if report else ""))
        ids = a.pixel_map[a.interior_mask]
        hexes = np.sort(ids[ids >= NUM_CORNERS])
        once = np.array_equal(hexes, np.arange(NUM_CORNERS, g.num_pixels))
        out.append(Result(f"atlas r={r} non-corner pixels not in exactly one interior", float(not once), 0, once))
        out.append(_at_most(f"atlas r={r} interior positions minus (N-2)", abs(len(ids) - (g.num_pixels - 2)), 0))
        shifts = a.padding[:, 6] if len(a.padding) else np.zeros(0)
        bad = int(np.sum((shifts < -1) | (shifts > 1)))
        out.append(_at_most(f"atlas r={r} gauge shifts outside {{-1,0,1}}", bad, 0))
        if with_group:
            out += suite_group_one(r, GEO(r)[2], g)
    return out


def suite_group_one(r, grp, g) -> list[Result]:
    out = [_at_most(f"group r={r} order minus 60", abs(len(grp) - 60), 0)]
    nc = np.arange(NUM_CORNERS, g.num_pixels)
    bad_perm = bad_shift = 0
    for i in range(len(grp)):
        for j in range(len(grp)):
            ab = grp[grp.compose(i, j)]
            a, b = grp[i], grp[j]
            bad_perm += int(not np.array_equal(ab.pixel_perm, a.pixel_perm[b.pixel_perm]))
            want = (b.gauge_shift[nc] + a.gauge_shift[b.pixel_perm[nc]]) % 6
            bad_shift += int(not np.array_equal(ab.gauge_shift[nc] % 6, want))
    out.append(_at_most(f"group r={r} permutation homomorphism failures", bad_perm, 0))
    out.append(_at_most(f"group r={r} gauge-shift cocycle failures", bad_shift, 0))
    return out


# --------------------------------------------------------------------------
# kernel constraint


def constraint_image(expanded: np.ndarray, k: int, field_in: FieldType, field_out: FieldType) -> np.ndarray:
    """Rotate spatial offsets by ``k`` and conjugate channels by rho_out(k), rho_in(-k)."""
    conj = expanded[field_out.channel_perm(k)][:, field_in.channel_perm(k)]
    out = np.zeros_like(conj)
    for d in range(6):
        si, sj = HEX_TAPS[(d - k) % 6]
        di, dj = HEX_TAPS[d]
        out[..., di + 1, dj + 1] = conj[..., si + 1, sj + 1]
    out[..., 1, 1] = conj[..., 1, 1]
    return out


def suite_kernel(draws: int = 50, seed: int = 0) -> list[Result]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fi, fo) in COMBOS.items():
        fails = 0
        masked = 0
        for _ in range(draws):
            w = rng.normal(size=(fo.num_fields, fi.total_channels, 7))
            kern = expand_kernel(w, fi.homogeneous, fo.homogeneous)
            masked += int(np.any(kern[..., 0, 2] != 0) or np.any(kern[..., 2, 0] != 0))
            for k in range(6):
                fails += int(not np.array_equal(constraint_image(kern, k, fi, fo), kern))
        out.append(_at_most(f"kernel constraint {name}: non-identical draws x rotations", fails, 0, f"{draws} draws"))
        out.append(_at_most(f"kernel masked cells {name}: nonzero draws", masked, 0))
    return out


# --------------------------------------------------------------------------
# oracle equivalence


def oracle_errors(r: int, combo: str, stride: int, dtype, seed: int = 0):
    """(scaled elementwise error, plain elementwise error) of gconv vs the oracle.

    The scaled error divides each deviation by the sum of absolute products
    that form that output element.
    """
    g, a, _ = GEO(r)
    fi, fo = COMBOS[combo]
    rng = np.random.default_rng(seed)
    x = random_signal(g, a, fi, 2, seed, dtype=dtype)
    w = rng.normal(size=(fo.num_fields, fi.total_channels, 7)).astype(dtype)
    fast = gconv(x, w, fi, fo, stride, atlas=a)
    ro = fast.resolution
    fast_pix = signal_to_pixels(GEO(ro)[1], fast).astype(np.float64)
    st = _stencil(r)
    pix = signal_to_pixels(a, x)
    ref = oracle_gconv(g, st, pix, w, fi, fo, stride)
    mag = oracle_gconv(g, st, pix, w, fi, fo, stride, magnitude=True)
    dev = np.abs(fast_pix - ref)[:, NUM_CORNERS:]
    mag, ref = mag[:, NUM_CORNERS:], ref[:, NUM_CORNERS:]
    if dev.size == 0:
        return 0.0, 0.0
    scaled = np.max(np.where(mag > 0, dev / np.where(mag > 0, mag, 1), dev))
    plain = np.max(np.where(np.abs(ref) > 0, dev / np.where(np.abs(ref) > 0, np.abs(ref), 1), dev))
    return float(scaled), float(plain)


_STENCILS = {}


def _stencil(r):
    if r not in _STENCILS:
        g, a, _ = GEO(r)
        _STENCILS[r] = build_stencil(g, a)
    return _STENCILS[r]


def suite_oracle(resolutions=(1, 2, 3), seed: int = 0) -> list[Result]:
    out = []
    for r in resolutions:
        for combo in COMBOS:
            for stride in (1, 2):
                for dtype, tol in ((np.float32, 1e-6), (np.float64, 1e-12)):
                    scaled, plain = oracle_errors(r, combo, stride, dtype, seed)
                    bits = 32 if dtype == np.float32 else 64
                    out.append(_at_most(f"oracle r={r} {combo} stride {stride} {bits}-bit relative error", scaled, tol,
                                        f"plain |d|/|ref| {plain:.2g}"))
    return out


# --------------------------------------------------------------------------
# equivariance


def _pix(sig, r):
    return signal_to_pixels(GEO(r)[1], sig)


def _sweep(r, fn, x: IcoSignal, r_out=None):
    """max over g of |act(g, fn(x)) - fn(act(g, x))| on non-corner pixels."""
    g, a, grp = GEO(r)
    r_out = r if r_out is None else r_out
    ao, grpo = GEO(r_out)[1], GEO(r_out)[2]
    y = fn(x)
    worst = 0.0
    for i in range(len(grp)):
        lhs = _pix(act(grpo[i], y, ao), r_out)
        rhs = _pix(fn(act(grp[i], x, a)), r_out)
        worst = max(worst, float(np.abs(lhs - rhs)[:, NUM_CORNERS:].max()))
    return worst


def suite_equivariance(r: int = 3, seed: int = 0, dtype=np.float32) -> list[Result]:
    tol = 1e-5 if dtype == np.float32 else 1e-12
    bits = 32 if dtype == np.float32 else 64
    g, a, _ = GEO(r)
    rng = np.random.default_rng(seed)
    out = []
    for combo, (fi, fo) in COMBOS.items():
        x = random_signal(g, a, fi, 2, seed, dtype=dtype)
        w = rng.uniform(-1, 1, size=(fo.num_fields, fi.total_channels, 7)).astype(dtype)
        for stride in (1, 2):
            dev = _sweep(r, lambda s: gconv(s, w, fi, fo, stride, atlas=a), x, r - stride + 1)
            out.append(_at_most(f"equivariance r={r} {combo} stride {stride} ({bits}-bit)", dev, tol))
    # two-layer stacks: gconv -> bn -> relu -> gconv
    for combo in ("s2r", "r2r"):
        fi, fo = COMBOS[combo]
        l1 = GConv(r, fi, fo, 1, rng=rng, dtype=dtype)
        bn = BatchNorm(r, fo, dtype)
        bn.params["gamma"][:] = rng.uniform(0.5, 1.5, size=fo.num_fields)
        bn.params["beta"][:] = rng.uniform(-0.5, 0.5, size=fo.num_fields)
        relu = ReLU(r, fo)
        l2 = GConv(r, fo, FieldType.regular(2), 2, rng=rng, dtype=dtype)

        def stack(s, l1=l1, bn=bn, relu=relu, l2=l2):
            h = l1.forward(s.data, True)[0]
            h = bn.forward(h, True)[0]
            h = relu.forward(h, True)[0]
            return IcoSignal(l2.forward(h, True)[0], l2.r_out, l2.field_out)

        x = random_signal(g, a, fi, 2, seed + 1, dtype=dtype)
        out.append(_at_most(f"equivariance r={r} two-layer {combo}+bn+relu+r2r ({bits}-bit)", _sweep(r, stack, x, r - 1), tol))
    xr = random_signal(g, a, FieldType.regular(3), 2, seed + 2, dtype=dtype)
    out.append(_at_most(f"equivariance r={r} orientation_pool ({bits}-bit)", _sweep(r, orientation_pool, xr), tol))
    out.append(_at_most(f"equivariance r={r} pool_hex ({bits}-bit)", _sweep(r, lambda s: pool_hex(gpad(s, a)), xr, r - 1), tol))
    return out


def classifier_invariance(model, signals: np.ndarray, r: int):
    """(prediction disagreements, max logit deviation) over the 60 symmetries."""
    g, a, grp = GEO(r)
    base = model.predict(signals)
    pred = base.argmax(axis=1)
    flips, dev = 0, 0.0
    ft = FieldType.scalar(1)
    for el in grp:
        moved = act(el, IcoSignal(signals, r, ft), a).data
        lg = model.predict(moved)
        flips += int(np.sum(lg.argmax(axis=1) != pred))
        dev = max(dev, float(np.abs(lg - base).max()))
    return flips, dev


# --------------------------------------------------------------------------
# gradient checks


def _rel(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if max(na, nb) == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / max(na, nb))


def layer_gradcheck(layer, x: np.ndarray, seed: int = 0, train: bool = True) -> float:
    """Worst relative error over parameters and input of a random linear probe."""
    rng = np.random.default_rng(seed)
    y, cache = layer.forward(x, train)
    probe = rng.normal(size=y.shape)
    dx, grads = layer.backward(probe.copy(), cache)

    def loss(_):
        return float(np.sum(layer.forward(x, train)[0] * probe))

    worst = 0.0
    if layer.params:
        num = numeric_grad(loss, layer.params)
        for k in layer.params:
            worst = max(worst, _rel(grads[k], num[k]))
    if isinstance(layer, Dense):
        numx = numeric_grad(loss, x)
    else:
        # only non-corner interior entries are real inputs
        idx = np.flatnonzero(GEO(layer.r_in)[1].interior_non_corner.reshape(-1))
        plane = x.reshape(x.shape[0], x.shape[1], -1)
        sub = plane[..., idx].copy()

        def loss_in(v):
            plane[..., idx] = v
            return loss(None)

        numx = numeric_grad(loss_in, sub)
        plane[..., idx] = sub
        dx = dx.reshape(plane.shape)[..., idx]
    return max(worst, _rel(dx, numx))


def suite_gradcheck(r: int = 1, seed: int = 0) -> list[Result]:
    rng = np.random.default_rng(seed)
    g, a, _ = GEO(r)
    tol = 1e-6
    out = []
    f64 = np.float64
    sc, rg = FieldType.scalar(2), FieldType.regular(2)

    def sig(ft, s):
        return random_signal(g, a, ft, 2, s, dtype=f64).data

    # stride-2 layers at r=1 would produce an all-corner r=0 output, so they run one level up
    r2 = max(r, 2)
    g2, a2, _ = GEO(r2)

    def sig2(ft, s):
        return random_signal(g2, a2, ft, 2, s, dtype=f64).data

    layers = [
        ("gconv s2s", GConv(r, sc, FieldType.scalar(2), 1, rng=rng, dtype=f64), sig(sc, 1)),
        ("gconv s2r", GConv(r, sc, rg, 1, rng=rng, dtype=f64), sig(sc, 2)),
        ("gconv r2r", GConv(r, rg, rg, 1, rng=rng, dtype=f64), sig(rg, 3)),
        ("gconv no-pad", GConv(r, rg, rg, 1, gauge_pad=False, rng=rng, dtype=f64), sig(rg, 5)),
        ("gconv no-expand", GConv(r, rg, rg, 1, expand=False, rng=rng, dtype=f64), sig(rg, 6)),
        ("batch norm", BatchNorm(r, rg, f64), sig(rg, 7)),
        ("relu", ReLU(r, rg), sig(rg, 8)),
        ("orientation pool", OrientationPool(r, rg), sig(rg, 9)),
        ("global pool", GlobalPool(r, rg), sig(rg, 11)),
        ("dense", Dense(5, 3, rng, f64), rng.normal(size=(4, 5))),
        (f"gconv r2r stride 2 (r={r2})", GConv(r2, rg, rg, 2, rng=rng, dtype=f64), sig2(rg, 4)),
        (f"pool_hex (r={r2})", PoolHex(r2, rg), sig2(rg, 10)),
    ]
    bn = layers[5][1]
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, size=2)
    bn.params["beta"][:] = rng.uniform(-0.5, 0.5, size=2)
    for name, layer, x in layers:
        out.append(_at_most(f"gradcheck r={r} {name}", layer_gradcheck(layer, x, seed), tol))
    # a composed two-layer model trained on cross-entropy
    model = build_model("r2r", r, num_classes=3, seed=seed, channels=(2, 2), strides=(1, 1), head=(4,), dtype=f64)
    x = random_signal(g, a, FieldType.scalar(1), 3, seed + 20, dtype=f64).data
    labels = np.array([0, 2, 1])
    params = model.param_dict()
    _, cache = forward_with_logits(model, x, True)
    _, grads = model_backward(model, cache, labels)

    def loss(_):
        logits, _c = model.forward(x, True)
        return softmax_xent(logits, labels)[0]

    num = numeric_grad(loss, params)
    worst = max(_rel(grads[k], num[k]) for k in params)
    out.append(_at_most(f"gradcheck r={r} two-layer r2r model", worst, tol))
    return out


def run_suite(name: str, resolutions=None, seed: int = 0) -> list[Result]:
    if name == "atlas":
        res = suite_atlas(resolutions or (1, 2, 3, 4))
    elif name == "kernel":
        res = suite_kernel(seed=seed)
    elif name == "oracle":
        res = suite_oracle(resolutions or (1, 2, 3), seed)
    elif name == "equivariance":
        res = []
        for r in resolutions or (3,):
            res += suite_equivariance(r, seed)
    elif name == "gradcheck":
        res = []
        for r in resolutions or (1,):
            res += suite_gradcheck(r, seed)
    else:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return res
