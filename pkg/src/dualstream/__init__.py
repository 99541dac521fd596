"""Dual-stream texture/edge ultrasound classifier built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DimensionError, DualStreamError, NumericError, StateError

__all__ = [
    "__version__",
    "ConfigError",
    "DataError",
    "DimensionError",
    "DualStreamError",
    "NumericError",
    "StateError",
]
