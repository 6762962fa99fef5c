"""Exception types shared across the package."""


class MocError(Exception):
    """Base class for all package errors."""


class ShapeError(MocError, ValueError):
    """Tensor extents or channel counts do not line up."""


class NumericError(MocError, ArithmeticError):
    """A computation produced NaN or Inf."""


class GraphStateError(MocError, RuntimeError):
    """Backward was requested on a graph that no longer exists."""


class ModeError(MocError, ValueError):
    """An operation was called on parameters it does not support."""


class ConfigError(MocError, ValueError):
    """Inconsistent model or run configuration."""


class FormatError(MocError, ValueError):
    """A file on disk does not follow the expected layout."""


class CompatibilityError(MocError, ValueError):
    """Stored data does not match the current model configuration."""
