"""Data-free quantized knowledge distillation driven by BN-statistics matching."""

from .errors import (ConfigError, DataError, DegenerateBatchError, DFKDError, DivergenceError,
                     FormatError, ShapeError, UnsupportedModelError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DegenerateBatchError", "DFKDError", "DivergenceError",
    "FormatError", "ShapeError", "UnsupportedModelError", "UsageError",
]
