"""Exception types shared across the package."""


class JointSbiError(Exception):
    """Base class for every error raised on purpose by this package."""


class DimensionMismatchError(JointSbiError):
    """An array shape differs from what the receiving component requires."""


class NonFiniteError(JointSbiError):
    """A NaN or infinity appeared at a public boundary.

    The ``site`` attribute names the operation that produced the value, so
    failures deep inside a training step can be traced without a debugger.
    """

    def __init__(self, site: str, message: str | None = None):
        self.site = site
        super().__init__(message or f"non-finite value produced at {site}")


class SimulationFailedError(JointSbiError):
    """A simulator raised repeatedly for the same parameter draw."""


class TrainingDivergedError(JointSbiError):
    """Total loss became non-finite during training.

    The approximator from the last finite step is retained on the
    ``last_approximator`` attribute together with the loss trace.
    """

    def __init__(self, step: int, last_approximator=None, trace=None):
        self.step = step
        self.last_approximator = last_approximator
        self.trace = trace
        super().__init__(f"training loss became non-finite at step {step}")


class FormatError(JointSbiError):
    """A serialized artifact is unreadable or has an unsupported version."""


class CheckpointError(FormatError):
    """A checkpoint file is unreadable, truncated, or has a wrong version."""


class ModelMismatchError(JointSbiError):
    """A checkpoint or dataset belongs to a different model than requested."""


class ConfigError(JointSbiError):
    """A run configuration failed schema validation."""


class FilterReferenceError(JointSbiError):
    """Surrogate filtering was requested without a critic reference."""
