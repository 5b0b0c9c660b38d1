"""Exception taxonomy shared across the package.

Every public operation raises one of these instead of bare ValueError /
RuntimeError so callers (and the CLI exit-code mapping) can tell input
mistakes apart from runtime failures.
"""


class ShapeError(ValueError):
    """Tensor dimensions incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration value (preset fields, generator specs, flags)."""


class LabelError(ValueError):
    """Annotation inconsistent with the declared label space or grid."""


class ScheduleError(ValueError):
    """Learning-rate schedule queried outside its valid range."""


class TrainingError(RuntimeError):
    """Non-recoverable failure inside the training loop (NaN gradients/loss)."""


class CheckpointError(ValueError):
    """Malformed checkpoint or serialized tensor container."""


class DatasetError(ValueError):
    """Malformed dataset file or invalid dataset content."""


class EmptyMaskError(ValueError):
    """An operation that requires a nonempty binary mask received an empty one."""


class DegenerateSampleError(ValueError):
    """Sample construction produced no usable instances."""


class EvaluationError(RuntimeError):
    """A function under test produced non-finite values during evaluation."""


class FixtureError(ValueError):
    """Golden fixture missing or unparseable."""
