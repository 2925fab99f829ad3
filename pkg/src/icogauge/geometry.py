"""Icosahedral pixel grid, the five-chart atlas and the 60 rotations acting on both.

Chart arrays use *array coordinates*: chart ``c`` is an ``H x W`` array with
``H = 2**r + 2`` and ``W = 2**(r+1) + 2``; the interior occupies rows
``1..n`` and columns ``1..2n`` (``n = 2**r``) and the remaining ring is the
one-pixel padding border.  Rows grow downwards, columns to the right.

The hexagonal lattice is embedded in the square one by connecting each
position to the six offsets in :data:`HEX_OFFSETS`.  Direction ``u`` of that
tuple is the chart gauge's ``u``-th ring direction; advancing ``u`` by one is
a rotation by ``+2pi/6``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .errors import CapacityError, ConstructionError, GeometryError

MAX_RESOLUTION = 10
NUM_CHARTS = 5
NUM_CORNERS = 12
INVALID = -1

HEX_OFFSETS = ((0, 1), (-1, 0), (-1, -1), (0, -1), (1, 0), (1, 1))
MASKED_OFFSETS = ((-1, 1), (1, -1))

# accepted chord distance when matching rotated pixels onto the grid
MATCH_RADIUS = 1e-6


def num_pixels(r: int) -> int:
    return 5 * 2 ** (2 * r + 1) + 2


def chart_shape(r: int) -> tuple[int, int]:
    return 2**r + 2, 2 ** (r + 1) + 2


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# grid


def _base_icosahedron():
    phi = (1.0 + 5.0**0.5) / 2.0
    verts = []
    for a in (1.0, -1.0):
        for b in (phi, -phi):
            verts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    pos = np.array(verts)
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)

    edge = 2.0 / np.linalg.norm([0.0, 1.0, phi])
    dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    adj = np.abs(dist - edge) < 1e-9
    faces = []
    for i in range(12):
        for j in range(i + 1, 12):
            for k in range(j + 1, 12):
                if adj[i, j] and adj[j, k] and adj[i, k]:
                    normal = np.cross(pos[j] - pos[i], pos[k] - pos[i])
                    if normal @ (pos[i] + pos[j] + pos[k]) > 0:
                        faces.append((i, j, k))
                    else:
                        faces.append((i, k, j))
    return pos, np.array(faces, dtype=np.int64)


def _rings(faces: np.ndarray, n: int) -> np.ndarray:
    """Counterclockwise neighbor rings (seen from outside), starting at the
    smallest neighbor id. Five-valent vertices get ``INVALID`` in slot 5."""
    a, b, c = faces.T
    center = np.concatenate([a, b, c])
    frm = np.concatenate([b, c, a])
    to = np.concatenate([c, a, b])
    code = center * n + frm
    order = np.argsort(code)
    code, to = code[order], to[order]
    degree = np.bincount(center, minlength=n)
    if not np.all((degree == 5) | (degree == 6)):
        raise GeometryError("grid vertex with degree other than 5 or 6")

    start = np.full(n, n, dtype=np.int64)
    np.minimum.at(start, center, frm)
    ring = np.empty((n, 6), dtype=np.int64)
    cur = start
    ids = np.arange(n, dtype=np.int64)
    for s in range(6):
        ring[:, s] = cur
        cur = to[np.searchsorted(code, ids * n + cur)]
    five = degree == 5
    if not (np.all(ring[five, 0] == ring[five, 5]) and np.all(cur[~five] == start[~five])):
        raise GeometryError("neighbor rings do not close")
    ring[five, 5] = INVALID
    return ring


@dataclass(frozen=True, eq=False)
class IcoGrid:
    """Refined icosahedral grid H_r.

    ``barycentric[p]`` holds integer weights of pixel ``p`` on the 12 base
    vertices (summing to ``2**r``); it locates the pixel on the flat
    icosahedron exactly and is what the atlas uses to place pixels in charts.
    """

    resolution: int
    positions: np.ndarray
    neighbors: np.ndarray
    faces: np.ndarray
    barycentric: np.ndarray

    @property
    def num_pixels(self) -> int:
        return len(self.positions)

    @property
    def corners(self) -> np.ndarray:
        return np.arange(NUM_CORNERS)

    @cached_property
    def is_corner(self) -> np.ndarray:
        mask = np.zeros(self.num_pixels, dtype=bool)
        mask[:NUM_CORNERS] = True
        return _readonly(mask)

    @cached_property
    def non_corner(self) -> np.ndarray:
        return _readonly(np.arange(NUM_CORNERS, self.num_pixels))


def build_grid(r: int) -> IcoGrid:
    """Subdivide the icosahedron ``r`` times, projecting midpoints to the sphere.

    Pixel ids are stable under refinement: the pixels of ``build_grid(r - 1)``
    keep their ids in ``build_grid(r)``; new midpoints are appended in
    lexicographic order of the edges they split.
    """
    if not isinstance(r, (int, np.integer)) or r < 0:
        raise ValueError(f"resolution must be a non-negative integer, got {r!r}")
    if r > MAX_RESOLUTION:
        raise CapacityError(f"resolution {r} exceeds the guard of {MAX_RESOLUTION}")

    pos, faces = _base_icosahedron()
    weights = np.eye(NUM_CORNERS, dtype=np.int16)
    for _ in range(r):
        m = len(faces)
        edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        n_old = len(pos)
        mid = pos[uniq[:, 0]] + pos[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        pos = np.concatenate([pos, mid])
        weights = np.concatenate([2 * weights, weights[uniq[:, 0]] + weights[uniq[:, 1]]])
        ab, bc, ca = n_old + inv[:m], n_old + inv[m : 2 * m], n_old + inv[2 * m :]
        a, b, c = faces.T
        faces = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )

    n = len(pos)
    assert n == num_pixels(r)
    return IcoGrid(
        resolution=int(r),
        positions=_readonly(pos),
        neighbors=_readonly(_rings(faces, n)),
        faces=_readonly(faces),
        barycentric=_readonly(weights),
    )


def _weight_codes(w: np.ndarray, n: int) -> np.ndarray:
    """Injective int64 code for rows of barycentric weights (<= 3 nonzeros)."""
    w = np.asarray(w, dtype=np.int64)
    order = np.argsort(w == 0, axis=-1, kind="stable")[..., :3]
    vals = np.take_along_axis(w, order, axis=-1)
    verts = np.where(vals > 0, order, NUM_CORNERS)
    base = (NUM_CORNERS + 1) * (n + 1)
    digits = verts * (n + 1) + vals
    return (digits[..., 0] * base + digits[..., 1]) * base + digits[..., 2]


# --------------------------------------------------------------------------
# atlas


def chart_corner_vertices(c: int) -> dict[str, int]:
    """Base-icosahedron vertex ids pinned to the six corners of chart ``c``.

    Chart-coordinate corners (row, col) relative to the interior origin:
    ``(0, 0)`` upper-ring vertex ``U[c+1]``, ``(n, n)`` vertex ``U[c]``,
    ``(n, 0)`` north vertex, ``(0, n)`` and ``(n, 2n)`` lower-ring vertices,
    ``(0, 2n)`` south vertex.
    """
    return dict(_chart_corner_vertices(c % 5))


@lru_cache(maxsize=None)
def _chart_corner_vertices(c: int) -> tuple:
    pos, faces = _base_icosahedron()
    ring = _rings(faces, NUM_CORNERS)
    north = 0
    up = [int(v) for v in ring[north, :5]]
    south = int(np.argmin(pos @ pos[north]))
    nbr = [set(ring[v, :5].tolist()) for v in range(NUM_CORNERS)]

    def lower(k):
        (v,) = (nbr[up[k % 5]] & nbr[up[(k + 1) % 5]]) - {north}
        return int(v)

    return (
        ("A", up[(c + 1) % 5]),
        ("B", up[c % 5]),
        ("N", north),
        ("L", lower(c)),
        ("L2", lower(c - 1)),
        ("S", south),
    )


def _strip_weights(c: int, n: int) -> np.ndarray:
    """Barycentric weights of every lattice point of chart ``c``'s closed strip
    (rows 0..n, cols 0..2n in chart coordinates), shape (n+1, 2n+1, 12)."""
    v = chart_corner_vertices(c)
    tris = [
        (((0, 0), (n, 0), (n, n)), (v["A"], v["N"], v["B"])),
        (((0, 0), (0, n), (n, n)), (v["A"], v["L"], v["B"])),
        (((0, n), (n, n), (n, 2 * n)), (v["L"], v["B"], v["L2"])),
        (((0, n), (0, 2 * n), (n, 2 * n)), (v["L"], v["S"], v["L2"])),
    ]
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(2 * n + 1), indexing="ij")
    out = np.zeros((n + 1, 2 * n + 1, NUM_CORNERS), dtype=np.int64)
    done = np.zeros(ii.shape, dtype=bool)
    for (p0, p1, p2), (v0, v1, v2) in tris:
        e1 = np.subtract(p1, p0)
        e2 = np.subtract(p2, p0)
        det = e1[0] * e2[1] - e1[1] * e2[0]
        di, dj = ii - p0[0], jj - p0[1]
        num1 = di * e2[1] - dj * e2[0]
        num2 = e1[0] * dj - e1[1] * di
        w1, rem1 = np.divmod(num1 * n, det)
        w2, rem2 = np.divmod(num2 * n, det)
        assert not rem1.any() and not rem2.any()
        w0 = n - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & ~done
        for vert, w in ((v0, w0), (v1, w1), (v2, w2)):
            out[inside, vert] += w[inside]
        done |= inside
    assert done.all()
    return out


@dataclass(frozen=True, eq=False)
class Atlas:
    """Five overlapping charts with their padding table.

    pixel_map[c, i, j]   pixel id at array position (i, j) of chart c, or INVALID
    frame[c, i, j]       ring slot of that pixel pointing along chart direction 0
                         (``-1`` for corners and invalid positions)
    owner[p]             (chart, i, j) of pixel p's unique interior position;
                         (-1, -1, -1) for the two corners in no interior
    padding              int array (P, 7): dst_chart, dst_i, dst_j, src_chart,
                         src_i, src_j, gauge_shift in {-1, 0, +1}
    zero_mask[c, i, j]   positions held at zero: corners and unresolvable border cells
    """

    resolution: int
    pixel_map: np.ndarray
    frame: np.ndarray
    owner: np.ndarray
    padding: np.ndarray
    zero_mask: np.ndarray

    @property
    def n(self) -> int:
        return 2**self.resolution

    @property
    def shape(self) -> tuple[int, int]:
        return chart_shape(self.resolution)

    @property
    def stacked_shape(self) -> tuple[int, int]:
        h, w = self.shape
        return NUM_CHARTS * h, w

    @cached_property
    def interior_mask(self) -> np.ndarray:
        h, w = self.shape
        mask = np.zeros((NUM_CHARTS, h, w), dtype=bool)
        mask[:, 1 : self.n + 1, 1 : 2 * self.n + 1] = True
        return _readonly(mask)

    @cached_property
    def interior_non_corner(self) -> np.ndarray:
        """Interior positions whose pixel is not a corner, shape (5, H, W)."""
        return _readonly(self.interior_mask & (self.pixel_map >= NUM_CORNERS))

    @cached_property
    def corner_positions(self) -> list[list[tuple[int, int]]]:
        out = []
        for c in range(NUM_CHARTS):
            ii, jj = np.nonzero((self.pixel_map[c] >= 0) & (self.pixel_map[c] < NUM_CORNERS))
            out.append(list(zip(ii.tolist(), jj.tolist())))
        return out

    @cached_property
    def pad_gather(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Flat (dst, src) indices into the stacked (5H*W) plane, per gauge shift."""
        h, w = self.shape
        rec = self.padding
        dst = (rec[:, 0] * h + rec[:, 1]) * w + rec[:, 2]
        src = (rec[:, 3] * h + rec[:, 4]) * w + rec[:, 5]
        out = {}
        for k in (-1, 0, 1):
            sel = rec[:, 6] == k
            out[k] = (_readonly(dst[sel].copy()), _readonly(src[sel].copy()))
        return out

    @cached_property
    def interior_pixel_flat(self) -> tuple[np.ndarray, np.ndarray]:
        """(flat interior index, pixel id) for every non-corner pixel, in pixel order."""
        h, w = self.shape
        ids = np.arange(NUM_CORNERS, num_pixels(self.resolution))
        c, i, j = self.owner[ids].T
        return _readonly((c * h + i) * w + j), _readonly(ids)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "chart_shape": list(self.shape),
            "pixel_map": self.pixel_map.tolist(),
            "frame": self.frame.tolist(),
            "owner": self.owner.tolist(),
            "padding": self.padding.tolist(),
            "corner_positions": [[list(p) for p in ps] for ps in self.corner_positions],
        }


def _shifted(a: np.ndarray, di: int, dj: int, fill=INVALID) -> np.ndarray:
    """out[..., i, j] = a[..., i + di, j + dj] with ``fill`` outside."""
    out = np.full_like(a, fill)
    h, w = a.shape[-2:]
    src_i = slice(max(di, 0), h + min(di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[..., dst_i, dst_j] = a[..., src_i, src_j]
    return out


def _frames(pm: np.ndarray, ring: np.ndarray, interior: np.ndarray) -> np.ndarray:
    """Ring slot aligned with chart direction 0 for every valid non-corner cell.

    Only lattice edges with at least one interior end are used: next to a
    five-valent corner, two border cells may hold the same pixel and the
    lattice edge between them does not exist on the icosahedron.
    Raises if the chart lattice disagrees with the grid adjacency.
    """
    frame = np.full(pm.shape, -1, dtype=np.int64)
    valid = pm >= NUM_CORNERS
    votes = np.full(pm.shape + (6,), -1, dtype=np.int64)
    for u, (di, dj) in enumerate(HEX_OFFSETS):
        nb = _shifted(pm, di, dj)
        nb_interior = _shifted(interior.astype(np.int64), di, dj, fill=0).astype(bool)
        has = valid & (nb >= 0) & (interior | nb_interior)
        rows = ring[pm[has]]
        hit = rows == nb[has][:, None]
        found = hit.any(axis=1)
        if not found.all():
            bad = pm[has][~found][0]
            raise ConstructionError(f"chart lattice neighbor of pixel {bad} is not a grid neighbor", pixel=int(bad))
        votes[has, u] = (np.argmax(hit, axis=1) - u) % 6
    first = votes.max(axis=-1)
    bad = valid & np.any((votes >= 0) & (votes != first[..., None]), axis=-1)
    if bad.any():
        pix = int(pm[bad][0])
        raise ConstructionError(f"inconsistent chart orientation at pixel {pix}", pixel=pix)
    frame[valid] = first[valid]
    return frame


def build_atlas(grid: IcoGrid) -> Atlas:
    r = grid.resolution
    n = 2**r
    h, w = chart_shape(r)
    ring = grid.neighbors

    codes = _weight_codes(grid.barycentric, n)
    order = np.argsort(codes)
    sorted_codes = codes[order]

    pm = np.full((NUM_CHARTS, h, w), INVALID, dtype=np.int64)
    for c in range(NUM_CHARTS):
        sc = _weight_codes(_strip_weights(c, n), n)
        idx = np.searchsorted(sorted_codes, sc)
        idx = np.minimum(idx, len(codes) - 1)
        if not np.all(sorted_codes[idx] == sc):
            raise ConstructionError(f"chart {c} lattice point missing from grid")
        pm[c, 1 : n + 2, 1 : 2 * n + 2] = order[idx]

    interior = np.zeros((h, w), dtype=bool)
    interior[1 : n + 1, 1 : 2 * n + 1] = True

    # extend each chart across its top row and left column by walking one
    # lattice step out of interior non-corner pixels
    frame = _frames(pm, ring, interior)
    outside = np.zeros((h, w), dtype=bool)
    outside[0, :] = True
    outside[:, 0] = True
    for c in range(NUM_CHARTS):
        src_ok = interior & (pm[c] >= NUM_CORNERS)
        resolved = np.full((h, w), INVALID, dtype=np.int64)
        for u, (di, dj) in enumerate(HEX_OFFSETS):
            # e = p + D[u]  =>  p = e - D[u]
            p_pix = _shifted(pm[c], -di, -dj)
            p_frame = _shifted(frame[c], -di, -dj, fill=-1)
            p_ok = _shifted(src_ok.astype(np.int64), -di, -dj, fill=0).astype(bool)
            sel = outside & p_ok
            cand = ring[p_pix[sel], (p_frame[sel] + u) % 6]
            prev = resolved[sel]
            clash = (prev != INVALID) & (prev != cand)
            if clash.any():
                bad = cand[clash][0]
                raise ConstructionError(f"padding cell of chart {c} resolves ambiguously (pixel {bad})", pixel=int(bad))
            resolved[sel] = cand
        pm[c][outside] = resolved[outside]
    frame = _frames(pm, ring, interior)

    # ownership of interiors
    npix = grid.num_pixels
    owner = np.full((npix, 3), -1, dtype=np.int64)
    count = np.zeros(npix, dtype=np.int64)
    for c in range(NUM_CHARTS):
        ii, jj = np.nonzero(interior)
        pix = pm[c, ii, jj]
        np.add.at(count, pix, 1)
        owner[pix] = np.stack([np.full_like(ii, c), ii, jj], axis=1)
    bad = np.nonzero(count[NUM_CORNERS:] != 1)[0]
    if len(bad):
        p = int(bad[0]) + NUM_CORNERS
        raise ConstructionError(f"pixel {p} lies in {count[p]} chart interiors", pixel=p)

    border = ~interior
    records = []
    zero_mask = np.zeros((NUM_CHARTS, h, w), dtype=bool)
    for c in range(NUM_CHARTS):
        for i, j in zip(*np.nonzero(border)):
            q = pm[c, i, j]
            if q < NUM_CORNERS:
                zero_mask[c, i, j] = True
                continue
            sc, si, sj = owner[q]
            k = (frame[sc, si, sj] - frame[c, i, j]) % 6
            k = k - 6 if k > 3 else k
            if k not in (-1, 0, 1):
                raise ConstructionError(f"gauge transition {k} at pixel {q} is not a single click", pixel=int(q))
            records.append((c, i, j, sc, si, sj, k))
    zero_mask |= (pm >= 0) & (pm < NUM_CORNERS)

    return Atlas(
        resolution=r,
        pixel_map=_readonly(pm),
        frame=_readonly(frame),
        owner=_readonly(owner),
        padding=_readonly(np.array(records, dtype=np.int64).reshape(-1, 7)),
        zero_mask=_readonly(zero_mask),
    )


def pixel_to_chart(atlas: Atlas, pixel: int) -> tuple[int, int, int]:
    """Unique interior position (chart, i, j) of a non-corner pixel."""
    npix = num_pixels(atlas.resolution)
    if not 0 <= pixel < npix:
        raise IndexError(f"pixel {pixel} out of range for resolution {atlas.resolution}")
    if pixel < NUM_CORNERS:
        raise ValueError(f"corner pixel {pixel} has no unique interior position")
    c, i, j = atlas.owner[pixel]
    return int(c), int(i), int(j)


def chart_to_pixel(atlas: Atlas, chart: int, i: int, j: int) -> int:
    h, w = atlas.shape
    if not (0 <= chart < NUM_CHARTS and 0 <= i < h and 0 <= j < w):
        raise IndexError(f"chart position ({chart}, {i}, {j}) out of range")
    p = int(atlas.pixel_map[chart, i, j])
    if p == INVALID:
        raise IndexError(f"chart position ({chart}, {i}, {j}) holds no pixel")
    return p


# --------------------------------------------------------------------------
# symmetry group


@dataclass(frozen=True, eq=False)
class IcoSymmetry:
    """One rotation of the icosahedron with its action on pixels and gauges.

    A field transforms as ``out[pixel_perm[p]] = rho(gauge_shift[p]) in[p]``.
    """

    rotation: np.ndarray
    pixel_perm: np.ndarray
    gauge_shift: np.ndarray


class SymmetryGroup:
    """The 60 elements plus their composition table.

    ``table[a, b]`` is the index of ``elements[a] o elements[b]`` (apply ``b``
    first). Element 0 is the identity.
    """

    def __init__(self, elements: list[IcoSymmetry], table: np.ndarray, inverse: np.ndarray):
        self.elements = elements
        self.table = table
        self.inverse = inverse

    def __len__(self):
        return len(self.elements)

    def __getitem__(self, idx):
        return self.elements[idx]

    def __iter__(self):
        return iter(self.elements)

    def compose(self, a: int, b: int) -> int:
        return int(self.table[a, b])

    def to_dict(self) -> dict:
        return {
            "order": len(self),
            "rotation": [g.rotation.tolist() for g in self],
            "pixel_perm": [g.pixel_perm.tolist() for g in self],
            "gauge_shift": [g.gauge_shift.tolist() for g in self],
            "table": self.table.tolist(),
        }


def _frame_basis(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    e1 = a / np.linalg.norm(a)
    e2 = b - (b @ e1) * e1
    e2 /= np.linalg.norm(e2)
    return np.stack([e1, e2, np.cross(e1, e2)], axis=1)


def vertex_rotations() -> list[np.ndarray]:
    """The 60 rotation matrices, identity first."""
    pos, faces = _base_icosahedron()
    ring = _rings(faces, NUM_CORNERS)
    v0, v1 = 0, int(ring[0, 0])
    src = _frame_basis(pos[v0], pos[v1])
    out = []
    for a in range(NUM_CORNERS):
        for b in sorted(ring[a, :5].tolist()):
            out.append(_frame_basis(pos[a], pos[b]) @ src.T)
    first = next(i for i, m in enumerate(out) if np.allclose(m, np.eye(3)))
    out.insert(0, out.pop(first))
    return out


def _ring_offsets(grid: IcoGrid, perm: np.ndarray) -> np.ndarray:
    """m[p] with g(ring_p[s]) = ring_{gp}[s + m] for non-corner p."""
    nc = grid.non_corner
    ring = grid.neighbors
    img = perm[ring[nc]]
    tgt = ring[perm[nc]]
    hit = tgt == img[:, :1]
    if not hit.any(axis=1).all():
        raise GeometryError("rotation does not map neighbor rings onto rings")
    m = np.argmax(hit, axis=1)
    rolled = np.take_along_axis(tgt, (np.arange(6)[None, :] + m[:, None]) % 6, axis=1)
    if not np.array_equal(rolled, img):
        raise GeometryError("rotation does not preserve cyclic neighbor order")
    out = np.zeros(grid.num_pixels, dtype=np.int64)
    out[nc] = m
    return out


def build_symmetry_group(grid: IcoGrid, atlas: Atlas) -> SymmetryGroup:
    if atlas.resolution != grid.resolution:
        raise GeometryError("grid and atlas resolutions differ")
    tree = cKDTree(grid.positions)
    nc = grid.non_corner
    own = atlas.owner[nc]
    align = np.zeros(grid.num_pixels, dtype=np.int64)
    align[nc] = atlas.frame[own[:, 0], own[:, 1], own[:, 2]]

    elements = []
    for rot in vertex_rotations():
        dist, perm = tree.query(grid.positions @ rot.T)
        if dist.max() > MATCH_RADIUS:
            raise GeometryError("rotated pixel has no grid counterpart")
        perm = perm.astype(np.int64)
        if len(np.unique(perm)) != grid.num_pixels:
            raise GeometryError("rotation does not permute pixels")
        shift = np.zeros(grid.num_pixels, dtype=np.int64)
        if len(nc):
            m = _ring_offsets(grid, perm)
            shift[nc] = (align[nc] + m[nc] - align[perm[nc]]) % 6
        elements.append(IcoSymmetry(_readonly(rot), _readonly(perm), _readonly(shift)))

    if len(elements) != 60:
        raise GeometryError(f"expected 60 rotations, found {len(elements)}")
    lookup = {g.pixel_perm.tobytes(): i for i, g in enumerate(elements)} if grid.resolution > 0 else None
    rot_keys = [(np.round(g.rotation, 6) + 0.0).tobytes() for g in elements]
    rot_lookup = {k: i for i, k in enumerate(rot_keys)}
    if len(rot_lookup) != 60:
        raise GeometryError("rotations are not distinct")

    table = np.empty((60, 60), dtype=np.int64)
    for a, ga in enumerate(elements):
        for b, gb in enumerate(elements):
            key = (np.round(ga.rotation @ gb.rotation, 6) + 0.0).tobytes()
            if key not in rot_lookup:
                raise GeometryError("rotation set does not close under composition")
            idx = rot_lookup[key]
            perm = ga.pixel_perm[gb.pixel_perm]
            if not np.array_equal(perm, elements[idx].pixel_perm):
                raise GeometryError("pixel action is not a homomorphism")
            if lookup is not None and lookup.get(perm.tobytes()) != idx:
                raise GeometryError("pixel permutations are not distinct")
            table[a, b] = idx
    inverse = np.argmax(table == 0, axis=1)
    return SymmetryGroup(elements, _readonly(table), _readonly(inverse))


def export_json(grid: IcoGrid, atlas: Atlas, group: SymmetryGroup | None = None) -> str:
    doc = {
        "format": "icogauge-atlas",
        "version": 1,
        "resolution": grid.resolution,
        "num_pixels": grid.num_pixels,
        "corners": grid.corners.tolist(),
        "neighbors": grid.neighbors.tolist(),
        "atlas": atlas.to_dict(),
    }
    if group is not None:
        doc["group"] = group.to_dict()
    return json.dumps(doc)
