"""Exception hierarchy shared by every subsystem."""


class LBNetError(Exception):
    """Base class for all package errors."""


class DimensionError(LBNetError, ValueError):
    """Raised when tensor extents disagree.

    Attributes:
        axis: the offending axis, when a single axis is to blame.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigError(LBNetError, ValueError):
    """Invalid configuration (model hyperparameters, groups, run config files)."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class UsageError(LBNetError, RuntimeError):
    """An API was called in a state or with arguments it does not support."""


class ImageIOError(LBNetError, OSError):
    """Failure to read or write an image file."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class CheckpointError(LBNetError):
    """A checkpoint file is malformed or incompatible with the requested model."""


class NumericalError(LBNetError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, step, lr, loss):
        super().__init__(f"non-finite loss at step {step} (lr={lr:.6g}, loss={loss})")
        self.step = step
        self.lr = lr
        self.loss = loss


class DatasetError(LBNetError):
    """A dataset directory cannot supply the requested samples."""
