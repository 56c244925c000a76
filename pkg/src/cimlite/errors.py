"""Exception hierarchy shared by all cimlite modules."""


class CimliteError(Exception):
    """Base class for package errors."""


class ConfigurationError(CimliteError, ValueError):
    """Invalid hyperparameter or configuration value."""


class DimensionError(CimliteError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericalError(CimliteError, ArithmeticError):
    """A NaN/Inf appeared, or training diverged."""


class FormatError(CimliteError, ValueError):
    """A binary or text artifact is malformed (bad magic, version, truncation)."""
