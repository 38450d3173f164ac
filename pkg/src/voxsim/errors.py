"""Exception hierarchy shared across the package."""


class VoxsimError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VoxsimError, ValueError):
    """A tensor, grid, or image has an incompatible shape or dimension."""


class ConfigError(VoxsimError, ValueError):
    """A configuration value or key is invalid."""


class DataError(VoxsimError):
    """A data file is missing, truncated, or malformed."""


class NumericError(VoxsimError, ArithmeticError):
    """A computation produced non-finite values."""


class UntrainedModelError(VoxsimError):
    """A learned component was used before training or loading weights."""
