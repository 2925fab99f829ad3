"""Gauge-equivariant operations on padded chart arrays.

The convolution is ``gconv(f, w) = hexconv2d(gpad(f), expand_kernel(w))``:
padding copies border cells from neighbouring charts (cyclically shifting
regular channels by the chart transition), expansion materialises the
weight-shared 3x3 filter bank, and the hexagonal correlation evaluates the
masked 3x3 stencil on every chart interior.

Summation order inside :func:`hexconv2d` is fixed by a single GEMM over the
``(C_in * 7)`` axis, so results are deterministic for a fixed BLAS thread
count.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ContractViolation, ShapeError
from .fields import REGULAR, STALE, TRIVIAL, VALID, FieldType, IcoSignal, RepMatrix, signal_from_pixels, signal_to_pixels
from .geometry import HEX_OFFSETS, MASKED_OFFSETS, NUM_CHARTS, NUM_CORNERS, Atlas, IcoSymmetry, chart_shape

# stencil taps: the six ring directions in cyclic order, then the center
HEX_TAPS = HEX_OFFSETS + ((0, 0),)
NUM_TAPS = 7


def interior_corner_cells(r: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Array cells of the two corner pixels inside every chart interior."""
    n = 2**r
    return (1, 1), (1, n + 1)


def zero_interior_corners(arr: np.ndarray, r: int) -> np.ndarray:
    """In-place on a (..., 5H, W) array."""
    h, w = chart_shape(r)
    view = arr.reshape(arr.shape[:-2] + (NUM_CHARTS, h, w))
    for i, j in interior_corner_cells(r):
        view[..., i, j] = 0
    return arr


def _plane(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(arr.shape[0], arr.shape[1], -1)


# --------------------------------------------------------------------------
# padding


def gpad_array(x: np.ndarray, atlas: Atlas, field_type: FieldType) -> np.ndarray:
    out = x.copy()
    plane = _plane(out)
    src_plane = _plane(x)
    for k, (dst, src) in atlas.pad_gather.items():
        if len(dst):
            plane[:, :, dst] = src_plane[:, :, src][:, field_type.channel_perm(k)]
    plane[:, :, atlas.zero_mask.reshape(-1)] = 0
    return out


def gpad_adjoint(grad: np.ndarray, atlas: Atlas, field_type: FieldType) -> np.ndarray:
    """Transpose of :func:`gpad_array`: border gradients flow back to their
    source interiors through ``rho(-k)``."""
    gp = _plane(grad)
    out = grad.copy()
    op = _plane(out)
    border = ~atlas.interior_mask.reshape(-1)
    for k, (dst, src) in atlas.pad_gather.items():
        if len(dst):
            perm = field_type.channel_perm(k)
            inv = np.empty_like(perm)
            inv[perm] = np.arange(len(perm))
            np.add.at(op, (slice(None), slice(None), src), gp[:, :, dst][:, inv])
    op[:, :, border] = 0
    op[:, :, atlas.zero_mask.reshape(-1)] = 0
    return out


def zero_pad_array(x: np.ndarray, atlas: Atlas) -> np.ndarray:
    """Plain zero padding (the no-G-padding ablation)."""
    out = x.copy()
    plane = _plane(out)
    plane[:, :, ~atlas.interior_mask.reshape(-1)] = 0
    zero_interior_corners(out, atlas.resolution)
    return out


def zero_pad_adjoint(grad: np.ndarray, atlas: Atlas) -> np.ndarray:
    return zero_pad_array(grad, atlas)


def _check_res(signal: IcoSignal, atlas: Atlas):
    if signal.resolution != atlas.resolution:
        raise ShapeError(f"signal at r={signal.resolution} but atlas at r={atlas.resolution}")


def gpad(signal: IcoSignal, atlas: Atlas) -> IcoSignal:
    """Fill every chart border from the owning chart's interior."""
    _check_res(signal, atlas)
    return signal.replace(gpad_array(signal.data, atlas, signal.field_type), pad_state=VALID)


def zero_pad(signal: IcoSignal, atlas: Atlas) -> IcoSignal:
    _check_res(signal, atlas)
    return signal.replace(zero_pad_array(signal.data, atlas), pad_state=VALID)


# --------------------------------------------------------------------------
# kernels


def rotate_hexkernel(weights, k: int) -> np.ndarray:
    """Rotate hexagonal weights (..., 7) by ``k`` clicks: ring entries roll, center stays."""
    w = np.array(weights, copy=True)
    w[..., :6] = np.roll(w[..., :6], k % 6, axis=-1)
    return w


def _cell(d: int) -> tuple[int, int]:
    di, dj = HEX_TAPS[d]
    return di + 1, dj + 1


@lru_cache(maxsize=None)
def _expansion_index(r_in: int, r_out: int) -> np.ndarray:
    """idx[u, v, y, x] into a flattened (r_in * 7 + 1) weight block; the last
    slot is a constant zero used for the masked cells."""
    zero = r_in * NUM_TAPS
    idx = np.full((r_out, r_in, 3, 3), zero, dtype=np.int64)
    for u in range(r_out):
        for v in range(r_in):
            src_v = (v - u) % r_in
            for d in range(NUM_TAPS):
                tap = NUM_TAPS - 1 if d == 6 else (d - u) % 6
                y, x = _cell(d)
                idx[u, v, y, x] = src_v * NUM_TAPS + tap
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def _expansion_matrix(r_in: int, r_out: int, tied: bool) -> np.ndarray:
    """Linear map from the flattened (r_in * 7) block to (r_out * r_in * 9)."""
    idx = _expansion_index(r_in, r_out).reshape(-1)
    m = np.zeros((idx.size, r_in * NUM_TAPS + 1))
    m[np.arange(idx.size), idx] = 1.0
    m = m[:, :-1]
    if tied:
        m = m @ _tie_matrix()
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def _tie_matrix() -> np.ndarray:
    t = np.zeros((NUM_TAPS, NUM_TAPS))
    t[:6, :6] = 1.0 / 6.0
    t[6, 6] = 1.0
    return t


def _kind(rep) -> RepMatrix:
    if isinstance(rep, RepMatrix):
        return rep
    return {"trivial": TRIVIAL, "scalar": TRIVIAL, "regular": REGULAR}[rep]


def expand_kernel(weights, rep_in, rep_out) -> np.ndarray:
    """Free weights (C_out, C_in*R_in, 7) -> filter bank (C_out*R_out, C_in*R_in, 3, 3).

    Output orientation ``u`` holds the base filter rotated by ``u`` clicks,
    with regular input channels cycled by ``u``. For scalar-to-scalar maps
    the six ring weights are tied to their mean, the only isotropic choice.
    """
    rep_in, rep_out = _kind(rep_in), _kind(rep_out)
    w = np.asarray(weights)
    if w.ndim != 3 or w.shape[2] != NUM_TAPS or w.shape[1] % rep_in.dim:
        raise ShapeError(f"weights of shape {w.shape} are not (C_out, C_in*{rep_in.dim}, 7)")
    if rep_in.dim == 6 and rep_out.dim == 1:
        raise ValueError("regular-to-scalar kernels are not supported")
    c_out, cr_in, _ = w.shape
    r_in, r_out = rep_in.dim, rep_out.dim
    c_in = cr_in // r_in
    if r_in == 1 and r_out == 1:
        ring = w[..., :6].mean(axis=-1, keepdims=True)
        w = np.concatenate([np.repeat(ring, 6, axis=-1), w[..., 6:]], axis=-1)
    block = w.reshape(c_out, c_in, r_in * NUM_TAPS)
    block = np.concatenate([block, np.zeros((c_out, c_in, 1), dtype=w.dtype)], axis=-1)
    k = block[:, :, _expansion_index(r_in, r_out)]  # (C_out, C_in, R_out, R_in, 3, 3)
    return np.ascontiguousarray(k.transpose(0, 2, 1, 3, 4, 5)).reshape(c_out * r_out, c_in * r_in, 3, 3)


def expand_kernel_adjoint(grad_expanded: np.ndarray, rep_in, rep_out) -> np.ndarray:
    """Gradient w.r.t. the free weights: sums each weight's orbit."""
    rep_in, rep_out = _kind(rep_in), _kind(rep_out)
    r_in, r_out = rep_in.dim, rep_out.dim
    co, ci = grad_expanded.shape[0] // r_out, grad_expanded.shape[1] // r_in
    g = grad_expanded.reshape(co, r_out, ci, r_in, 3, 3).transpose(0, 2, 1, 3, 4, 5).reshape(co, ci, -1)
    m = _expansion_matrix(r_in, r_out, r_in == 1 and r_out == 1)
    return (g @ m.astype(g.dtype)).reshape(co, ci * r_in, NUM_TAPS)


def hex_taps(expanded: np.ndarray) -> np.ndarray:
    """(O, I, 3, 3) -> (O, I, 7) in tap order; masked cells must be zero."""
    for di, dj in MASKED_OFFSETS:
        if np.any(expanded[..., di + 1, dj + 1] != 0):
            raise ValueError("masked stencil cells of a hexagonal kernel must be zero")
    return np.stack([expanded[..., di + 1, dj + 1] for di, dj in HEX_TAPS], axis=-1)


def taps_to_kernel(taps: np.ndarray) -> np.ndarray:
    out = np.zeros(taps.shape[:-1] + (3, 3), dtype=taps.dtype)
    for t, (di, dj) in enumerate(HEX_TAPS):
        out[..., di + 1, dj + 1] = taps[..., t]
    return out


# --------------------------------------------------------------------------
# hexagonal correlation on chart arrays


def im2col(x: np.ndarray, r: int, stride: int) -> np.ndarray:
    """Padded (B, C, 5H, W) -> columns (B, C, 7, 5, n', 2n') at interior anchors."""
    b, c = x.shape[:2]
    h, w = chart_shape(r)
    n = 2**r
    no = n // stride
    xp = x.reshape(b, c, NUM_CHARTS, h, w)
    cols = np.empty((b, c, NUM_TAPS, NUM_CHARTS, no, 2 * no), dtype=x.dtype)
    for t, (di, dj) in enumerate(HEX_TAPS):
        cols[:, :, t] = xp[:, :, :, 1 + di : 1 + di + n : stride, 1 + dj : 1 + dj + 2 * n : stride]
    return cols


def col2im(cols: np.ndarray, r: int, stride: int) -> np.ndarray:
    b, c = cols.shape[:2]
    h, w = chart_shape(r)
    n = 2**r
    xp = np.zeros((b, c, NUM_CHARTS, h, w), dtype=cols.dtype)
    for t, (di, dj) in enumerate(HEX_TAPS):
        xp[:, :, :, 1 + di : 1 + di + n : stride, 1 + dj : 1 + dj + 2 * n : stride] += cols[:, :, t]
    return xp.reshape(b, c, NUM_CHARTS * h, w)


def out_resolution(r: int, stride: int) -> int:
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and r < 1:
        raise ValueError("stride 2 needs resolution >= 1")
    return r if stride == 1 else r - 1


def place_interior(vals: np.ndarray, r: int) -> np.ndarray:
    """(B, C, 5, n, 2n) interior values -> zero-bordered (B, C, 5H, W), corners zeroed."""
    b, c = vals.shape[:2]
    h, w = chart_shape(r)
    n = 2**r
    out = np.zeros((b, c, NUM_CHARTS, h, w), dtype=vals.dtype)
    out[:, :, :, 1 : n + 1, 1 : 2 * n + 1] = vals
    out = out.reshape(b, c, NUM_CHARTS * h, w)
    return zero_interior_corners(out, r)


def take_interior(arr: np.ndarray, r: int) -> np.ndarray:
    """(B, C, 5H, W) -> (B, C, 5, n, 2n) with interior corners zeroed."""
    b, c = arr.shape[:2]
    h, w = chart_shape(r)
    n = 2**r
    v = arr.reshape(b, c, NUM_CHARTS, h, w)[:, :, :, 1 : n + 1, 1 : 2 * n + 1].copy()
    v[:, :, :, 0, 0] = 0
    v[:, :, :, 0, n] = 0
    return v


def conv_forward(x: np.ndarray, taps: np.ndarray, r: int, stride: int):
    """Raw correlation. Returns (output array, columns for the backward pass).

    One matrix product per batch item, so an item's result does not depend
    on what else is in the batch.
    """
    cols = im2col(x, r, stride)
    b, c = cols.shape[:2]
    c_out = taps.shape[0]
    ro = out_resolution(r, stride)
    res = np.matmul(taps.reshape(c_out, -1), cols.reshape(b, c * NUM_TAPS, -1))
    return place_interior(res.reshape((b, c_out) + cols.shape[3:]), ro), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, taps: np.ndarray, r: int, stride: int):
    """Gradients (d_input_padded, d_taps) of :func:`conv_forward`."""
    ro = out_resolution(r, stride)
    b, c = cols.shape[:2]
    c_out = taps.shape[0]
    d = take_interior(dout, ro).reshape(b, c_out, -1)
    cm = cols.reshape(b, c * NUM_TAPS, -1)
    dtaps = np.matmul(d, cm.transpose(0, 2, 1)).sum(axis=0).reshape(taps.shape)
    dcols = np.matmul(taps.reshape(c_out, -1).T, d).reshape(cols.shape)
    return col2im(dcols, r, stride), dtaps


def hexconv2d(padded: IcoSignal, expanded: np.ndarray, stride: int = 1, field_out: FieldType | None = None) -> IcoSignal:
    """Masked 3x3 cross-correlation evaluated on chart interiors only."""
    if padded.pad_state != VALID:
        raise ContractViolation("hexconv2d needs a padded signal (pad_state 'valid')")
    expanded = np.asarray(expanded)
    if expanded.ndim != 4 or expanded.shape[1] != padded.channels or expanded.shape[2:] != (3, 3):
        raise ShapeError(f"kernel {expanded.shape} does not fit {padded.channels} input channels")
    field_out = field_out or FieldType.scalar(expanded.shape[0])
    if field_out.total_channels != expanded.shape[0]:
        raise ShapeError("output field type does not match kernel rows")
    taps = hex_taps(expanded).astype(padded.data.dtype, copy=False)
    out, _ = conv_forward(padded.data, taps, padded.resolution, stride)
    return IcoSignal(out, out_resolution(padded.resolution, stride), field_out, STALE)


def _homogeneous(ft: FieldType) -> RepMatrix:
    rep = ft.homogeneous
    if rep is None:
        raise ShapeError(f"convolution needs a single representation kind, got {ft}")
    return rep


def gconv(signal: IcoSignal, weights, field_in: FieldType, field_out: FieldType, stride: int = 1, *, atlas: Atlas) -> IcoSignal:
    """Gauge-equivariant convolution: hexconv2d(gpad(f), expand_kernel(w))."""
    if signal.field_type != field_in:
        raise ShapeError(f"signal carries {signal.field_type}, expected {field_in}")
    rep_in, rep_out = _homogeneous(field_in), _homogeneous(field_out)
    w = np.asarray(weights)
    expect = (field_out.num_fields, field_in.total_channels, NUM_TAPS)
    if w.shape != expect:
        raise ShapeError(f"weights of shape {w.shape}, expected {expect}")
    kernel = expand_kernel(w.astype(signal.data.dtype, copy=False), rep_in, rep_out)
    return hexconv2d(gpad(signal, atlas), kernel, stride, field_out)


# --------------------------------------------------------------------------
# symmetry action and pooling


def act_pixels(g: IcoSymmetry, per_pixel: np.ndarray, field_type: FieldType) -> np.ndarray:
    """Act on a (B, N, Ctot) table: out[g p] = rho(shift[p]) in[p]."""
    out = np.zeros_like(per_pixel)
    shift = g.gauge_shift
    nc = np.arange(NUM_CORNERS, per_pixel.shape[1])
    for k in range(6):
        ps = nc[shift[nc] == k]
        if len(ps):
            out[:, g.pixel_perm[ps]] = per_pixel[:, ps][:, :, field_type.channel_perm(k)]
    return out


def act(g: IcoSymmetry, signal: IcoSignal, atlas: Atlas) -> IcoSignal:
    """Rotate a signal by a symmetry of the icosahedron (interiors only)."""
    _check_res(signal, atlas)
    pix = signal_to_pixels(atlas, signal)
    if len(g.pixel_perm) != pix.shape[1]:
        raise ShapeError("symmetry built for a different resolution")
    pix = act_pixels(g, pix, signal.field_type)
    return signal_from_pixels(None, atlas, signal.field_type, pix, dtype=signal.data.dtype)


def orientation_pool(signal: IcoSignal) -> IcoSignal:
    """Max over the six orientation channels of every regular field."""
    ft = signal.field_type
    if ft.homogeneous != REGULAR:
        raise TypeError(f"orientation pooling needs regular fields, got {ft}")
    b, _, hh, w = signal.data.shape
    pooled = signal.data.reshape(b, ft.num_fields, 6, hh, w).max(axis=2)
    return IcoSignal(pooled, signal.resolution, FieldType.scalar(ft.num_fields), signal.pad_state)


def pool_hex(signal: IcoSignal, stride: int = 2) -> IcoSignal:
    """Channel-wise max over center + 6-ring, sampled at stride-2 anchors."""
    if signal.pad_state != VALID:
        raise ContractViolation("pool_hex needs a padded signal (pad_state 'valid')")
    if stride != 2:
        raise ValueError("pool_hex only supports stride 2")
    r = signal.resolution
    ro = out_resolution(r, stride)
    cols = im2col(signal.data, r, stride)
    return IcoSignal(place_interior(cols.max(axis=2), ro), ro, signal.field_type, STALE)
