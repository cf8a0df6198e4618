"""Exception hierarchy shared by every module."""


class MPSTANError(Exception):
    """Base class for all package errors."""


class InputError(MPSTANError, ValueError):
    """Malformed or out-of-range user input."""


class GraphError(MPSTANError):
    """Patch graph violates a structural requirement (e.g. isolated patch)."""


class NumericError(MPSTANError, ArithmeticError):
    """Non-finite value produced or consumed."""


class ConfigurationError(MPSTANError, ValueError):
    """Run configuration is inconsistent with the data."""


class TrainingError(MPSTANError):
    """Optimization diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
