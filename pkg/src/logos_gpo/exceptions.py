"""Exception types raised across the package."""

import numpy as np


class NotPositiveDefinite(np.linalg.LinAlgError):
    """A covariance matrix failed to factorize even after jitter escalation."""


class DimensionMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonPowerOfTwoLength(ValueError):
    pass


class TooManyLevels(ValueError):
    pass


class InconsistentPyramid(ValueError):
    pass


class InvalidNeighborCount(ValueError):
    pass


class MissingForwardCache(RuntimeError):
    pass


class InstanceTooLarge(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when the objective turns non-finite; carries the last good state."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class UnstableStep(FloatingPointError):
    pass


class CorruptHeader(ValueError):
    pass


class UnsupportedVersion(ValueError):
    pass
