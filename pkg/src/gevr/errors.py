"""Exception types shared across the package."""


class GevrError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(GevrError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class InvalidConfigError(GevrError, ValueError):
    """A configuration document is malformed or self-contradictory."""


class RasterFormatError(GevrError, ValueError):
    """A raster file is truncated, corrupt, or dimensionally inconsistent."""


class ConvergenceError(GevrError, RuntimeError):
    """An iterative solver exhausted its iteration budget.

    Carries the last iterate so callers can inspect how far the solve got.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class UndefinedTestError(GevrError, ValueError):
    """A statistical test has no defined value for the given data."""


class MissingCellError(GevrError, ValueError):
    """A requested statistic needs (method, fold) cells that were never run."""
