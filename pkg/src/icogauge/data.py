"""MNIST IDX parsing, projection of digits onto the grid, and dataset shards."""
from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError, ShapeError
from .fields import FieldType, IcoSignal, load_icosig, save_icosig, signal_from_pixels
from .geometry import Atlas, IcoGrid, SymmetryGroup
from .ops import act_pixels

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
UBYTE = 0x08
MODES = ("N", "I", "R")


@dataclass(frozen=True)
class IdxTensor:
    dims: tuple[int, ...]
    data: np.ndarray  # uint8, shaped by dims

    @property
    def magic(self) -> int:
        return (UBYTE << 8) | len(self.dims)


def parse_idx(blob: bytes) -> IdxTensor:
    """Decode an unsigned-byte IDX stream (big-endian header)."""
    if len(blob) < 4:
        raise FormatError("IDX stream shorter than its magic number", offset=len(blob))
    zero, dtype, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0 or dtype != UBYTE or ndim == 0:
        magic = struct.unpack(">I", blob[:4])[0]
        raise FormatError(f"bad IDX magic {magic} (expected unsigned-byte data, e.g. {IMAGES_MAGIC} or {LABELS_MAGIC})", offset=0)
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise FormatError(f"IDX header truncated: {ndim} dimensions need {head} bytes", offset=len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - head < count:
        raise FormatError(f"IDX payload truncated: need {count} bytes after the header, have {len(blob) - head}",
                          offset=len(blob))
    if len(blob) - head > count:
        raise FormatError(f"IDX stream has {len(blob) - head - count} trailing bytes", offset=head + count)
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=head).reshape(dims)
    return IdxTensor(tuple(int(d) for d in dims), data)


def read_idx(path) -> IdxTensor:
    """Read an IDX file, transparently gunzipping ``*.gz``."""
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    try:
        return parse_idx(blob)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def encode_idx(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ShapeError("IDX encoding supports unsigned bytes only")
    header = struct.pack(">HBB", 0, UBYTE, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def write_idx(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_idx(arr))


# --------------------------------------------------------------------------
# projection


@dataclass(frozen=True)
class ProjectionSpec:
    """How a planar digit lands on the sphere.

    The image square spans ``[-tan a, tan a]^2`` of the gnomonic plane
    tangent at the north pole (+z), with ``a`` the cap half angle; grid
    pixels farther than ``a`` from the pole read zero. ``rotation`` is a
    symmetry index for mode ``I`` or a 3x3 matrix for mode ``R``.
    """

    cap_half_angle: float = np.pi / 4
    mode: str = "N"
    rotation: object = None

    def __post_init__(self):
        if not 0 < self.cap_half_angle < np.pi / 2:
            raise ValueError("cap half angle must lie in (0, pi/2)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def _bilinear_weights(points: np.ndarray, size: tuple[int, int], cap: float):
    """Sampling indices (P, 4) and weights (P, 4) into a flattened image;
    weight rows are zero outside the cap or the image."""
    h, w = size
    z = points[:, 2]
    inside = z > np.cos(cap)
    zs = np.where(inside, z, 1.0)
    t = np.tan(cap)
    u = points[:, 0] / zs / t
    v = points[:, 1] / zs / t
    # image column grows with +x, image row grows with -y; pixel centres at k + 0.5
    col = (u + 1) / 2 * w - 0.5
    row = (1 - v) / 2 * h - 0.5
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc, fr = col - c0, row - r0
    idx = np.zeros((len(points), 4), dtype=np.int64)
    wts = np.zeros((len(points), 4))
    for k, (dr, dc, wk) in enumerate(
        ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc))
    ):
        rr, cc = r0 + dr, c0 + dc
        ok = inside & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx[:, k] = np.where(ok, rr * w + cc, 0)
        wts[:, k] = np.where(ok, wk, 0.0)
    return idx, wts


def _sample(images: np.ndarray, idx: np.ndarray, wts: np.ndarray) -> np.ndarray:
    """(M, h, w) uint8 images -> (M, P) values in [0, 1]."""
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return (flat[:, idx] * wts).sum(axis=-1)


def project_pixels(images, grid: IcoGrid, spec: ProjectionSpec, group: SymmetryGroup | None = None) -> np.ndarray:
    """Project a stack of images to per-pixel values (M, N, 1)."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise ShapeError(f"expected (h, w) or (M, h, w) images, got {images.shape}")
    pos = grid.positions
    if spec.mode == "R":
        rot = np.asarray(spec.rotation if spec.rotation is not None else np.eye(3), dtype=np.float64)
        if rot.shape != (3, 3):
            raise ShapeError("mode R needs a 3x3 rotation")
        pos = pos @ rot  # rows are rot^-1 applied to each position
    idx, wts = _bilinear_weights(pos, images.shape[1:], spec.cap_half_angle)
    vals = _sample(images, idx, wts)[..., None]
    vals[:, : 12] = 0.0
    if spec.mode == "I":
        if group is None:
            raise ValueError("mode I needs the symmetry group")
        g = group[int(spec.rotation or 0)]
        vals = act_pixels(g, vals, FieldType.scalar(1))
    return vals


def project_digit(image, grid: IcoGrid, atlas: Atlas, spec: ProjectionSpec, group: SymmetryGroup | None = None,
                  dtype=np.float32) -> IcoSignal:
    """One 28x28 digit as a single scalar field on the grid."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"expected a single 2D image, got {image.shape}")
    vals = project_pixels(image, grid, spec, group)
    return signal_from_pixels(grid, atlas, FieldType.scalar(1), vals.astype(dtype), dtype=dtype)


def random_rotations(count: int, rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(count, random_state=rng).as_matrix()


# --------------------------------------------------------------------------
# datasets


def build_dataset(images_path, labels_path, grid: IcoGrid, atlas: Atlas, mode: str, seed: int, out_dir,
                  group: SymmetryGroup | None = None, augment: str = "sample", limit: int | None = None,
                  shard_size: int = 4096, cap_half_angle: float = np.pi / 4) -> dict:
    """Project an IDX image/label pair and write icosig shards.

    ``augment='sample'`` draws one transformation per digit (one item each);
    ``augment='all'`` emits 60 items per digit: every symmetry for mode I, or
    60 random rotations for mode R. Mode N always emits one item per digit.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if augment not in ("sample", "all"):
        raise ValueError("augment must be 'sample' or 'all'")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if len(images.dims) != 3 or len(labels.dims) != 1 or images.dims[0] != labels.dims[0]:
        raise FormatError(f"{images_path} / {labels_path}: image dims {images.dims} do not pair with label dims {labels.dims}")
    imgs, labs = images.data, labels.data
    if limit is not None:
        imgs, labs = imgs[:limit], labs[:limit]
    if mode == "I" and group is None:
        raise ValueError("mode I needs the symmetry group")
    rng = np.random.default_rng(seed)
    copies = 60 if (augment == "all" and mode != "N") else 1
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc.strerror}") from None
    base = project_pixels(imgs, grid, ProjectionSpec(cap_half_angle, "N"))
    shards, out_labels = [], []
    items = []
    for s in range(0, len(imgs) * copies, shard_size):
        chunk = []
        for item in range(s, min(s + shard_size, len(imgs) * copies)):
            d, c = divmod(item, copies)
            if mode == "N":
                vals = base[d]
            elif mode == "I":
                gi = c if copies == 60 else int(rng.integers(60))
                vals = act_pixels(group[gi], base[d][None], FieldType.scalar(1))[0]
            else:
                rot = random_rotations(1, rng)[0]
                vals = project_pixels(imgs[d], grid, ProjectionSpec(cap_half_angle, "R", rot))[0]
            chunk.append(vals)
            out_labels.append(labs[d])
            items.append(d)
        sig = signal_from_pixels(grid, atlas, FieldType.scalar(1), np.stack(chunk).astype(np.float32), dtype=np.float32)
        name = f"shard_{len(shards):05d}.icosig"
        save_icosig(os.path.join(out_dir, name), sig)
        shards.append({"file": name, "count": len(chunk)})
    write_idx(os.path.join(out_dir, "labels-idx1-ubyte"), np.asarray(out_labels, dtype=np.uint8))
    manifest = {
        "resolution": grid.resolution,
        "mode": mode,
        "augment": augment,
        "seed": seed,
        "cap_half_angle": cap_half_angle,
        "source_images": os.fspath(images_path),
        "source_labels": os.fspath(labels_path),
        "digits": int(len(imgs)),
        "count": int(len(out_labels)),
        "shards": shards,
        "labels": "labels-idx1-ubyte",
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Return (signals (M, 1, 5H, W), labels (M,), manifest)."""
    mpath = os.path.join(path, "manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    arrays = []
    for sh in manifest["shards"]:
        sig = load_icosig(os.path.join(path, sh["file"]))
        if sig.batch != sh["count"]:
            raise FormatError(f"{sh['file']}: holds {sig.batch} items, manifest says {sh['count']}")
        arrays.append(sig.data)
    labels = read_idx(os.path.join(path, manifest["labels"])).data.astype(np.int64)
    data = np.concatenate(arrays) if arrays else np.zeros((0,), dtype=np.float32)
    if len(data) != len(labels):
        raise FormatError(f"{mpath}: {len(data)} signals but {len(labels)} labels")
    return data, labels, manifest
