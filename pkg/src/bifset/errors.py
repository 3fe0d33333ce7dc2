"""Exception types shared across the package."""


class BifsetError(Exception):
    """Base class for package errors."""


class UnsupportedDimensionError(BifsetError):
    """Operation not implemented for this many variables."""


class FieldSingularError(BifsetError):
    """Trivialization field undefined: the direction vector degenerates."""


class CriticalPointError(FieldSingularError):
    """Gradient vanishes where the field needs it nonzero."""
