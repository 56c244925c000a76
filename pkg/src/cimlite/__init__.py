"""Channel-independent encoders for multiplex single-cell patches, in numpy."""

__version__ = "0.1.0"

from .errors import CimliteError, ConfigurationError, DimensionError, FormatError, NumericalError  # noqa: E402
from .model import (  # noqa: E402
    BaselineConfig,
    CimConfig,
    Model,
    build_cim,
    build_earlyfusion_baseline,
    embed,
    forward_features,
    forward_head,
    parameter_count,
)

__all__ = [
    "__version__",
    "CimliteError",
    "ConfigurationError",
    "DimensionError",
    "FormatError",
    "NumericalError",
    "BaselineConfig",
    "CimConfig",
    "Model",
    "build_cim",
    "build_earlyfusion_baseline",
    "embed",
    "forward_features",
    "forward_head",
    "parameter_count",
]
