"""Exception types shared across the package."""


class MtposeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MtposeError, ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class NumericsError(MtposeError, ArithmeticError):
    """A numerical routine produced or received non-finite values,
    or a factorization failed (e.g. non-SPD matrix, SVD breakdown)."""


class ConvergenceError(NumericsError):
    """An iterative routine exhausted its iteration budget without
    reaching its tolerance, where that is a hard failure."""


class DataFormatError(MtposeError, ValueError):
    """A file being ingested does not match the documented layout."""
