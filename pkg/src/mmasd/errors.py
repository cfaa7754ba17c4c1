"""Exception types shared across the package."""


class MMASDError(Exception):
    """Base class for all package errors."""


class DimensionError(MMASDError, ValueError):
    pass


class ConfigurationError(MMASDError, ValueError):
    pass


class StateError(MMASDError, RuntimeError):
    pass


class UsageError(MMASDError, RuntimeError):
    pass


class ValidationError(MMASDError, ValueError):
    """Invalid input data. ``field`` names the offending field when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field
