"""Feature-field types and the padded chart-array signal container.

Channels are stored field-major: a field type with ``C`` fields of
dimension ``R`` occupies ``C`` consecutive blocks of ``R`` channels, so the
``(B, C*R, 5H, W)`` array is a view of ``(B, C, R, 5, H, W)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .geometry import NUM_CHARTS, NUM_CORNERS, Atlas, IcoGrid, chart_shape, num_pixels

STALE = "stale"
VALID = "valid"


@dataclass(frozen=True)
class RepMatrix:
    """A representation of C6: ``trivial`` (R=1) or ``regular`` (R=6).

    ``rho(1)`` moves channel ``c`` to channel ``c + 1 (mod 6)``.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in ("trivial", "regular"):
            raise ValueError(f"unknown representation {self.kind!r}")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "trivial" else 6

    def action(self, k: int) -> np.ndarray:
        if self.kind == "trivial":
            return np.eye(1)
        return np.roll(np.eye(6), k % 6, axis=0)

    def apply(self, k: int, vec) -> np.ndarray:
        vec = np.asarray(vec)
        if vec.shape[-1] != self.dim:
            raise ShapeError(f"expected last axis of length {self.dim}, got {vec.shape[-1]}")
        if self.kind == "trivial":
            return vec.copy()
        return np.roll(vec, k % 6, axis=-1)


TRIVIAL = RepMatrix("trivial")
REGULAR = RepMatrix("regular")


def rho_apply(rep: RepMatrix, k: int, vec) -> np.ndarray:
    return rep.apply(k, vec)


@dataclass(frozen=True)
class FieldType:
    entries: tuple[tuple[RepMatrix, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((r, int(m)) for r, m in self.entries))
        if not self.entries or any(m < 1 for _, m in self.entries):
            raise ValueError("a field type needs at least one field with positive multiplicity")

    @classmethod
    def scalar(cls, count: int = 1) -> FieldType:
        return cls(((TRIVIAL, count),))

    @classmethod
    def regular(cls, count: int = 1) -> FieldType:
        return cls(((REGULAR, count),))

    @property
    def total_channels(self) -> int:
        return sum(r.dim * m for r, m in self.entries)

    @property
    def num_fields(self) -> int:
        return sum(m for _, m in self.entries)

    @property
    def homogeneous(self) -> RepMatrix | None:
        kinds = {r for r, _ in self.entries}
        return next(iter(kinds)) if len(kinds) == 1 else None

    def channel_perm(self, k: int) -> np.ndarray:
        """Index array ``p`` with ``rho_total(k) @ v == v[p]``."""
        out = []
        base = 0
        for rep, mult in self.entries:
            for _ in range(mult):
                if rep.dim == 1:
                    out.append(base)
                else:
                    out.extend(base + (np.arange(6) - k) % 6)
                base += rep.dim
        return np.asarray(out, dtype=np.int64)

    def action(self, k: int) -> np.ndarray:
        eye = np.eye(self.total_channels)
        return eye[self.channel_perm(k)]

    def to_json(self) -> list:
        return [[r.kind, m] for r, m in self.entries]

    @classmethod
    def from_json(cls, doc) -> FieldType:
        return cls(tuple((RepMatrix(kind), m) for kind, m in doc))

    def __str__(self):
        return "+".join(f"{m}x{r.kind}" for r, m in self.entries)


@dataclass
class IcoSignal:
    """Batched feature fields in the padded ``(B, Ctot, 5H, W)`` chart layout."""

    data: np.ndarray
    resolution: int
    field_type: FieldType
    pad_state: str = STALE

    def __post_init__(self):
        h, w = chart_shape(self.resolution)
        if self.data.ndim != 4 or self.data.shape[2:] != (NUM_CHARTS * h, w):
            raise ShapeError(f"data shape {self.data.shape} does not match resolution {self.resolution}")
        if self.data.shape[1] != self.field_type.total_channels:
            raise ShapeError(
                f"{self.data.shape[1]} channels but field type {self.field_type} has {self.field_type.total_channels}"
            )
        if self.pad_state not in (STALE, VALID):
            raise ValueError(f"bad pad_state {self.pad_state!r}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def charts(self) -> np.ndarray:
        """View of shape (B, Ctot, 5, H, W)."""
        b, c, _, w = self.data.shape
        h, _ = chart_shape(self.resolution)
        return self.data.reshape(b, c, NUM_CHARTS, h, w)

    def replace(self, data: np.ndarray, **kw) -> IcoSignal:
        args = dict(resolution=self.resolution, field_type=self.field_type, pad_state=STALE)
        args.update(kw)
        return IcoSignal(data, **args)

    def astype(self, dtype) -> IcoSignal:
        return IcoSignal(self.data.astype(dtype), self.resolution, self.field_type, self.pad_state)


def empty_signal(r: int, field_type: FieldType, batch: int, dtype=np.float32) -> IcoSignal:
    h, w = chart_shape(r)
    return IcoSignal(np.zeros((batch, field_type.total_channels, NUM_CHARTS * h, w), dtype=dtype), r, field_type)


def signal_from_pixels(grid: IcoGrid | None, atlas: Atlas, field_type: FieldType, per_pixel, dtype=None) -> IcoSignal:
    """Scatter a per-pixel table (N, Ctot) or (B, N, Ctot) into chart interiors."""
    per_pixel = np.asarray(per_pixel)
    squeeze = per_pixel.ndim == 2
    if squeeze:
        per_pixel = per_pixel[None]
    n = num_pixels(atlas.resolution)
    if per_pixel.ndim != 3 or per_pixel.shape[1:] != (n, field_type.total_channels):
        raise ShapeError(f"per-pixel table of shape {per_pixel.shape} does not fit (N={n}, Ctot={field_type.total_channels})")
    if grid is not None and grid.resolution != atlas.resolution:
        raise ShapeError("grid and atlas resolutions differ")
    dtype = dtype or (per_pixel.dtype if per_pixel.dtype.kind == "f" else np.float64)
    sig = empty_signal(atlas.resolution, field_type, per_pixel.shape[0], dtype)
    flat, ids = atlas.interior_pixel_flat
    plane = sig.data.reshape(sig.batch, sig.channels, -1)
    plane[:, :, flat] = per_pixel[:, ids, :].transpose(0, 2, 1)
    return sig


def signal_to_pixels(atlas: Atlas, signal: IcoSignal) -> np.ndarray:
    """Gather interiors into a (B, N, Ctot) table; corners read back as zero."""
    if signal.resolution != atlas.resolution:
        raise ShapeError("signal and atlas resolutions differ")
    n = num_pixels(atlas.resolution)
    flat, ids = atlas.interior_pixel_flat
    out = np.zeros((signal.batch, n, signal.channels), dtype=signal.data.dtype)
    plane = signal.data.reshape(signal.batch, signal.channels, -1)
    out[:, ids, :] = plane[:, :, flat].transpose(0, 2, 1)
    return out


def random_signal(grid: IcoGrid, atlas: Atlas, field_type: FieldType, batch: int, seed: int, dtype=np.float64) -> IcoSignal:
    """Uniform[-1, 1] values on non-corner pixels; corners and borders zero."""
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-1.0, 1.0, size=(batch, grid.num_pixels, field_type.total_channels))
    vals[:, :NUM_CORNERS] = 0.0
    return signal_from_pixels(grid, atlas, field_type, vals.astype(dtype), dtype=dtype)


# --------------------------------------------------------------------------
# icosig v1 container

ICOSIG_VERSION = 1


def _dtype_name(dtype) -> str:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise FormatError(f"unsupported element type {dt}")
    return dt.name


def dumps_icosig(signal: IcoSignal) -> bytes:
    header = {
        "version": ICOSIG_VERSION,
        "r": signal.resolution,
        "B": signal.batch,
        "Ctot": signal.channels,
        "field_type": signal.field_type.to_json(),
        "dtype": _dtype_name(signal.data.dtype),
        "byte_order": "little",
    }
    data = np.ascontiguousarray(signal.data, dtype=signal.data.dtype.newbyteorder("<"))
    return json.dumps(header).encode("utf-8") + b"\n" + data.tobytes(order="C")


def loads_icosig(blob: bytes) -> IcoSignal:
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("icosig header line missing", offset=0)
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"icosig header is not JSON: {exc}", offset=0) from None
    if header.get("version") != ICOSIG_VERSION:
        raise FormatError(f"unsupported icosig version {header.get('version')!r}", offset=0)
    if header.get("byte_order") != "little":
        raise FormatError("icosig payload must be little-endian", offset=0)
    r, b, ctot = header["r"], header["B"], header["Ctot"]
    h, w = chart_shape(r)
    dtype = np.dtype(_dtype_name(header["dtype"])).newbyteorder("<")
    shape = (b, ctot, NUM_CHARTS * h, w)
    need = int(np.prod(shape)) * dtype.itemsize
    payload = blob[nl + 1 :]
    if len(payload) != need:
        raise FormatError(f"icosig payload has {len(payload)} bytes, expected {need}", offset=nl + 1 + min(len(payload), need))
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return IcoSignal(data, r, FieldType.from_json(header["field_type"]))


def save_icosig(path, signal: IcoSignal) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_icosig(signal))


def load_icosig(path) -> IcoSignal:
    with open(path, "rb") as fh:
        return loads_icosig(fh.read())
