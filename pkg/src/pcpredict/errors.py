"""Exception types raised across the package."""


class PCPredictError(Exception):
    """Base class for all package errors."""


class ShapeError(PCPredictError, ValueError):
    pass


class ConfigError(PCPredictError, ValueError):
    pass


class DegenerateFilterError(PCPredictError, ValueError):
    pass


class StateError(PCPredictError, RuntimeError):
    pass


class NumericError(PCPredictError, FloatingPointError):
    pass


class FormatError(PCPredictError, ValueError):
    """Malformed checkpoint or image data."""


class TruncatedFileError(PCPredictError, OSError):
    """A file ended before all declared content was read."""
