"""Exception types raised across the package."""


class IcoError(Exception):
    """Base class for all package errors."""


class CapacityError(IcoError):
    """Requested resolution exceeds the memory guard."""


class ConstructionError(IcoError):
    """Atlas construction found an inconsistent layout."""

    def __init__(self, message, pixel=None):
        super().__init__(message)
        self.pixel = pixel


class GeometryError(IcoError):
    """Symmetry tables failed to close or did not match the grid."""


class ShapeError(IcoError, ValueError):
    """Array shapes or resolutions do not agree."""


class ContractViolation(IcoError):
    """An operation was given input in a state it must never consume."""


class NumericalError(IcoError, ArithmeticError):
    """A loss or gradient became non-finite."""


class FormatError(IcoError, ValueError):
    """A file or byte stream does not match its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
