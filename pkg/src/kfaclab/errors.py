"""Exception types shared across the package."""


class KfacLabError(Exception):
    """Base class for all errors raised by this package."""


class SingularMatrix(KfacLabError):
    """A solve or inverse hit a pivot below the singularity threshold."""


class NotSymmetric(KfacLabError):
    """A symmetric-only operation received a matrix with too much asymmetry."""


class ShapeMismatch(KfacLabError):
    """Inputs whose dimensions do not chain or match the declared layer sizes."""


class TooLarge(KfacLabError):
    """A dense construction was requested above the supported size cap."""


class UnsupportedLayer(KfacLabError):
    """An operation was asked to handle a layer kind outside its contract."""


class SingularFactor(KfacLabError):
    """An undamped Kronecker factor could not be inverted."""
