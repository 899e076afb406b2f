"""Exception types shared across the package."""


class MalactError(Exception):
    """Base class for all package errors."""


class DimensionError(MalactError, ValueError):
    pass


class InputError(MalactError, ValueError):
    pass


class StateError(MalactError, RuntimeError):
    pass


class ConfigError(MalactError, ValueError):
    pass


class FormatError(MalactError, ValueError):
    pass


class MetricError(MalactError, ValueError):
    pass


class NotAPEError(MalactError, ValueError):
    """Raised when a buffer lacks the MZ or PE signatures."""
