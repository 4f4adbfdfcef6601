"""Exception types shared across the package.

Each maps to one CLI exit code (see ``ctt.cli``).
"""


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class ShapeError(ValueError):
    """Tensor or array shapes that do not line up."""


class StateError(RuntimeError):
    """Operation called in a state that does not allow it (e.g. bank not full)."""


class CheckpointError(RuntimeError):
    """Corrupt or incompatible checkpoint / dataset archive."""


class DivergenceError(RuntimeError):
    """Non-finite loss during training."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class UndefinedMetricError(ValueError):
    """Metric requested on an empty confusion matrix."""
