"""Exception hierarchy shared across the package."""


class NdrError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(NdrError, ValueError):
    pass


class NotPositiveDefinite(NdrError, ArithmeticError):
    pass


class NonFiniteValue(NdrError, ArithmeticError):
    pass


class NonFiniteGradient(NdrError, ArithmeticError):
    pass


class SingularInnovationCovariance(NdrError, ArithmeticError):
    pass


class DegenerateObservation(NdrError, ValueError):
    pass


class GimbalLockProximity(NdrError, ValueError):
    pass


class GroundTruthDiverged(NdrError, ArithmeticError):
    pass


class NonFiniteLoss(NdrError, ArithmeticError):
    pass


class AbortedOnNanStreak(NdrError, RuntimeError):
    pass


class AllRunsDiverged(NdrError, RuntimeError):
    pass


class OffsetOutOfRange(NdrError, ValueError):
    pass


class ConfigInvalid(NdrError, ValueError):
    pass


# Errors that mark a single filter run as diverged instead of aborting a batch.
FILTER_FAILURES = (
    NonFiniteValue,
    NotPositiveDefinite,
    SingularInnovationCovariance,
    GimbalLockProximity,
    DegenerateObservation,
    FloatingPointError,
)
