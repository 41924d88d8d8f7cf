"""Exception types shared across the package."""


class NSN2NError(Exception):
    """Base class for package errors."""


class CorruptFileError(NSN2NError):
    """A volume, training-set or checkpoint file failed validation on load."""


class UnsupportedVersionError(CorruptFileError):
    pass


class DivergedError(NSN2NError, FloatingPointError):
    """Raised when a loss or gradient becomes non-finite during training."""
