"""Slow 64-bit reference implementations built from 3D geometry.

Nothing here touches the chart arrays of the fast path except to learn which
chart owns a pixel. Neighbour directions are measured as tangent-plane angles
on the sphere, relative to the chart's +j axis pushed through the
face-linear chart map, and the transport shift along each edge follows from
how the two endpoint frames see each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError
from .fields import FieldType
from .geometry import INVALID, NUM_CORNERS, Atlas, IcoGrid, chart_corner_vertices

SECTOR = np.pi / 3
# slack allowed between a measured neighbour angle and its nominal sector
ANGLE_SLACK = np.deg2rad(25.0)


@dataclass(frozen=True)
class PixelStencil:
    """Per-pixel neighbour lists in chart-gauge order.

    ``neighbors[p, d]`` is the neighbour of ``p`` in direction ``d`` (d=0 is
    the chart's +j axis, counterclockwise from outside) and ``transport[p, d]``
    the C6 shift carrying that neighbour's features into the gauge at ``p``.
    Rows of corner pixels are all ``INVALID``.
    """

    resolution: int
    neighbors: np.ndarray
    transport: np.ndarray
    chart: np.ndarray
    problems: tuple[str, ...]


def _corner_table(n: int) -> dict[str, tuple[float, float]]:
    return {"A": (0, 0), "N": (n, 0), "B": (n, n), "L": (0, n), "L2": (n, 2 * n), "S": (0, 2 * n)}


_TRIANGLES = (("A", "N", "B"), ("A", "L", "B"), ("L", "B", "L2"), ("L", "S", "L2"))


def chart_axis(grid: IcoGrid, chart: int, i: float, j: float) -> np.ndarray:
    """Unit tangent of the chart's +j axis at chart coordinates (i, j)."""
    n = 2**grid.resolution
    coords = _corner_table(n)
    verts = chart_corner_vertices(chart)
    base = grid.positions[:NUM_CORNERS]
    probe = np.array([i, j + 0.25])
    for tri in _TRIANGLES:
        p = np.array([coords[k] for k in tri], dtype=float)
        m = np.column_stack([p[1] - p[0], p[2] - p[0]])
        lam12 = np.linalg.solve(m, probe - p[0])
        lam = np.array([1 - lam12.sum(), lam12[0], lam12[1]])
        if np.all(lam >= -1e-12):
            # d(lambda)/dj is constant on the triangle
            dl12 = np.linalg.solve(m, np.array([0.0, 1.0]))
            dl = np.array([-dl12.sum(), dl12[0], dl12[1]])
            deriv = sum(dl[t] * base[verts[tri[t]]] for t in range(3))
            x = sum(lam[t] * base[verts[tri[t]]] for t in range(3))
            x = x / np.linalg.norm(x)
            tang = deriv - np.dot(deriv, x) * x
            return tang / np.linalg.norm(tang)
    raise ValueError(f"chart coordinates ({i}, {j}) fall outside chart {chart}")


def _cross(a, b) -> np.ndarray:
    # np.cross carries heavy per-call overhead for single 3-vectors
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _owner_chart(atlas: Atlas, p: int) -> tuple[int, int, int]:
    c, ai, aj = (int(v) for v in atlas.owner[p])
    return c, ai - 1, aj - 1


def _sector_slots(grid: IcoGrid, p: int, axis: np.ndarray):
    """Neighbour ids and their nominal sector index around ``p``."""
    x = grid.positions[p]
    nb = [int(q) for q in grid.neighbors[p] if q != INVALID]
    slots, errs = [], []
    for q in nb:
        v = grid.positions[q] - x
        v = v - np.dot(v, x) * x
        ang = np.arctan2(np.dot(_cross(axis, v), x), np.dot(axis, v))
        s = int(np.round(ang / SECTOR)) % 6
        dev = abs((ang - s * SECTOR + np.pi) % (2 * np.pi) - np.pi)
        slots.append(s)
        errs.append(dev)
    return nb, slots, errs


def build_stencil(grid: IcoGrid, atlas: Atlas, gauge=None) -> PixelStencil:
    """Geometric stencil; ``gauge[p]`` optionally rotates pixel p's frame by
    ``gauge[p]`` clicks counterclockwise from its chart frame."""
    npix = grid.num_pixels
    gauge = np.zeros(npix, dtype=np.int64) if gauge is None else np.asarray(gauge, dtype=np.int64) % 6
    axes = np.zeros((npix, 3))
    chart = np.full(npix, INVALID, dtype=np.int64)
    for p in range(NUM_CORNERS, npix):
        c, i, j = _owner_chart(atlas, p)
        chart[p] = c
        ax = chart_axis(grid, c, i, j)
        # rotate the axis about the outward normal by gauge[p] sectors
        x = grid.positions[p]
        th = gauge[p] * SECTOR
        axes[p] = np.cos(th) * ax + np.sin(th) * _cross(x, ax)

    problems = []
    direction = {}
    nbrs = np.full((npix, 6), INVALID, dtype=np.int64)
    for p in range(NUM_CORNERS, npix):
        nb, slots, errs = _sector_slots(grid, p, axes[p])
        if len(set(slots)) != 6:
            problems.append(f"pixel {p}: neighbours do not occupy six distinct sectors")
        for q, s, e in zip(nb, slots, errs):
            if e > ANGLE_SLACK:
                problems.append(f"pixel {p}: neighbour {q} is {np.rad2deg(e):.1f} deg off its sector")
            nbrs[p, s] = q
            direction[p, q] = s

    trans = np.full((npix, 6), INVALID, dtype=np.int64)
    for p in range(NUM_CORNERS, npix):
        for d in range(6):
            q = int(nbrs[p, d])
            if q == INVALID:
                continue
            if q < NUM_CORNERS:
                trans[p, d] = 0  # corners carry zero, any shift will do
                continue
            alpha = direction[q, p]
            t = (d + 3 - alpha) % 6
            trans[p, d] = t - 6 if t > 3 else t
    return PixelStencil(grid.resolution, nbrs, trans, chart, tuple(problems))


def _rho_perm(field_type: FieldType, k: int) -> np.ndarray:
    """Channel gather index for rho_total(k), written out field by field."""
    idx = []
    base = 0
    for rep, mult in field_type.entries:
        for _ in range(mult):
            if rep.dim == 1:
                idx.append(base)
            else:
                for c in range(6):
                    idx.append(base + (c - k) % 6)
            base += rep.dim
    return np.array(idx)


def oracle_gconv(grid: IcoGrid, stencil: PixelStencil, per_pixel, weights, field_in: FieldType, field_out: FieldType,
                 stride: int = 1, magnitude: bool = False) -> np.ndarray:
    """Direct convolution on the pixel graph. ``per_pixel`` is (B, N, Cin_tot);
    returns (B, N', Cout_tot) in 64-bit, corners zero.

    With ``magnitude=True`` every product is replaced by its absolute value,
    giving the scale against which rounding error in a sum is measured.
    """
    f = np.asarray(per_pixel, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    npix = grid.num_pixels
    if f.ndim != 3 or f.shape[1] != npix or f.shape[2] != field_in.total_channels:
        raise ShapeError(f"input of shape {f.shape} does not fit N={npix}, C={field_in.total_channels}")
    rin = field_in.entries[0][0].dim
    rout = field_out.entries[0][0].dim
    c_in, c_out = field_in.num_fields, field_out.num_fields
    if w.shape != (c_out, c_in * rin, 7):
        raise ShapeError(f"weights of shape {w.shape}, expected {(c_out, c_in * rin, 7)}")
    if rin == 1 and rout == 1:
        w = w.copy()
        w[..., :6] = w[..., :6].mean(axis=-1, keepdims=True)
    w = w.reshape(c_out, c_in, rin, 7)
    b = f.shape[0]
    out = np.zeros((b, npix, c_out * rout))
    for p in range(NUM_CORNERS, npix):
        # neighbour values pulled into p's gauge; slot 6 is the centre
        vals = np.zeros((b, 7, c_in * rin))
        for d in range(6):
            q = stencil.neighbors[p, d]
            if q < NUM_CORNERS:
                continue
            vals[:, d] = f[:, q][:, _rho_perm(field_in, int(stencil.transport[p, d]))]
        vals[:, 6] = f[:, p]
        vals = vals.reshape(b, 7, c_in, rin)
        for o in range(c_out):
            for u in range(rout):
                acc = np.zeros(b)
                for i in range(c_in):
                    for v in range(rin):
                        for d in range(7):
                            tap = 6 if d == 6 else (d - u) % 6
                            term = w[o, i, (v - u) % rin, tap] * vals[:, d, i, v]
                            acc += np.abs(term) if magnitude else term
                out[:, p, o * rout + u] = acc
    if stride == 2:
        out = out[:, : 5 * 2 ** (2 * grid.resolution - 1) + 2]
    elif stride != 1:
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    return out


def oracle_adjacency(grid: IcoGrid, atlas: Atlas, stencil: PixelStencil | None = None) -> list[str]:
    """Compare chart adjacency and every padding record against geometry."""
    from .geometry import HEX_OFFSETS

    if grid.resolution == 0:
        return []
    st = stencil or build_stencil(grid, atlas)
    report = list(st.problems)
    pm = atlas.pixel_map
    nrow, ncol = pm.shape[1:]
    # expected (pixel, shift) at every exterior cell, seen from each interior neighbour
    expect: dict[tuple[int, int, int], set[tuple[int, int]]] = {}
    for p in range(NUM_CORNERS, grid.num_pixels):
        c, ai, aj = (int(v) for v in atlas.owner[p])
        for d, (di, dj) in enumerate(HEX_OFFSETS):
            i, j = ai + di, aj + dj
            if not (0 <= i < nrow and 0 <= j < ncol):
                report.append(f"pixel {p}: direction {d} leaves chart {c}")
                continue
            q = int(st.neighbors[p, d])
            if int(pm[c, i, j]) != q:
                report.append(f"pixel {p}: chart {c} cell ({i},{j}) holds {int(pm[c, i, j])}, geometry says {q}")
            interior = 1 <= i <= atlas.n and 1 <= j <= 2 * atlas.n
            if interior and q >= NUM_CORNERS and st.transport[p, d] != 0:
                report.append(f"pixel {p}: neighbour {q} shares chart {c} but transport is {st.transport[p, d]}")
            if not interior and q >= NUM_CORNERS:
                expect.setdefault((c, i, j), set()).add((q, int(st.transport[p, d])))
    seen = set()
    for idx, rec in enumerate(np.asarray(atlas.padding)):
        dc, di, dj, sc, si, sj, k = (int(v) for v in rec)
        seen.add((dc, di, dj))
        want = expect.get((dc, di, dj))
        if want is None:
            continue
        src = int(pm[sc, si, sj])
        if not (1 <= si <= atlas.n and 1 <= sj <= 2 * atlas.n):
            report.append(f"padding record {idx} {rec.tolist()}: source is not an interior cell")
        if len(want) != 1:
            report.append(f"padding record {idx} {rec.tolist()}: geometry disagrees with itself {sorted(want)}")
        for q, t in want:
            if src != q or (k - t) % 6 != 0:
                report.append(f"padding record {idx} {rec.tolist()}: copies pixel {src} with shift {k}, geometry says pixel {q} shift {t}")
    for cell in sorted(set(expect) - seen):
        report.append(f"chart {cell[0]} cell ({cell[1]},{cell[2]}) is read by the stencil but has no padding record")
    return report


def numeric_grad(loss_fn, params, epsilon: float = 1e-6):
    """Central-difference gradient of ``loss_fn(params)``.

    ``params`` is an array or a dict of arrays, perturbed in place and
    restored; the result has the same structure.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    single = isinstance(params, np.ndarray)
    blocks = {"_": params} if single else params
    grads = {}
    for name, arr in blocks.items():
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            lp = float(loss_fn(params))
            flat[i] = old - epsilon
            lm = float(loss_fn(params))
            flat[i] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericalError(f"loss is not finite near {name}[{i}]")
            gf[i] = (lp - lm) / (2 * epsilon)
        grads[name] = g
    return grads["_"] if single else grads
