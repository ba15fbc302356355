"""Exception types shared across the package."""


class DataError(Exception):
    """Raised when a dataset, checkpoint, or manifest on disk is unusable."""


class NumericError(RuntimeError):
    """Raised when an optimisation produces non-finite values."""
