"""Exception hierarchy shared by every dfkd module."""


class DFKDError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DFKDError, ValueError):
    """Invalid hyperparameter or configuration value."""


class ShapeError(DFKDError, ValueError):
    """Tensor shapes that cannot be combined."""


class DegenerateBatchError(DFKDError, ValueError):
    """Batch too small to estimate per-channel statistics."""


class UsageError(DFKDError, RuntimeError):
    """API called in the wrong state or order."""


class FormatError(DFKDError, ValueError):
    """Corrupt or incompatible weight / dataset file."""


class DataError(DFKDError, ValueError):
    """Invalid data content (non-positive std, missing labels, ...)."""


class UnsupportedModelError(DFKDError, ValueError):
    """Model lacks a structure an operation requires."""


class DivergenceError(DFKDError, FloatingPointError):
    """A loss became NaN or infinite during optimization."""

    def __init__(self, step, component, value):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
