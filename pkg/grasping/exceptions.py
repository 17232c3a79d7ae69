"""
Exception hierarchy shared by the grasping core and the bench harness.
"""


class GraspLabError(Exception):
    """Base class for every error raised by the grasp lab."""


class DimensionError(GraspLabError, ValueError):
    """Tensor or observation shapes do not fit together."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class ConfigError(GraspLabError, ValueError):
    """Invalid configuration value or unknown configuration key."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class UsageError(GraspLabError):
    """An operation was called in a state that does not allow it."""


class TrainingError(GraspLabError):
    """Non-finite gradient or loss during optimisation."""

    def __init__(self, message, name=None, step=None):
        context = []
        if name is not None:
            context.append(f"name={name}")
        if step is not None:
            context.append(f"step={step}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.name = name
        self.step = step


class CheckpointError(GraspLabError):
    """A checkpoint file could not be read or does not fit the model."""


class CheckpointVersionError(CheckpointError):
    """Magic bytes or format version do not match."""


class CheckpointFormatError(CheckpointError):
    """The file is truncated or a record is malformed."""


class UnknownParameterError(CheckpointError):
    """The checkpoint names a parameter the model does not have (or misses one)."""

    def __init__(self, message, name):
        super().__init__(f"{message}: {name}")
        self.name = name
