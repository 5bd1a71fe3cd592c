"""Exception types shared across the package."""


class DomainError(ValueError):
    """A time or log-SNR value lies outside the schedule's domain."""


class ConvergenceError(RuntimeError):
    """The adaptive reference integrator failed to reach the requested tolerance."""


class TableFormatError(ValueError):
    """A statistics-table file is malformed or inconsistent."""


class UnsupportedVersionError(TableFormatError):
    """A statistics-table file declares a version this code does not read."""
