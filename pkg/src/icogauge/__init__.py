"""Gauge-equivariant convolution on the icosahedron.

The grid, atlas and symmetry group live in :mod:`icogauge.geometry`, signals
in :mod:`icogauge.fields`, the convolution and its pieces in
:mod:`icogauge.ops`, a brute-force reference in :mod:`icogauge.oracle`, and
a small trainable stack in :mod:`icogauge.nn`.
"""
from .errors import (
    CapacityError,
    ConstructionError,
    ContractViolation,
    FormatError,
    GeometryError,
    IcoError,
    NumericalError,
    ShapeError,
)
from .fields import REGULAR, TRIVIAL, FieldType, IcoSignal, RepMatrix, random_signal, rho_apply, signal_from_pixels, signal_to_pixels
from .geometry import Atlas, IcoGrid, IcoSymmetry, build_atlas, build_grid, build_symmetry_group, chart_to_pixel, pixel_to_chart
from .ops import act, expand_kernel, gconv, gpad, hexconv2d, orientation_pool, pool_hex, rotate_hexkernel

__version__ = "0.1.0"
