"""
Exception hierarchy

Every failure raised on purpose by freshrec derives from FreshrecError so
callers (CLI, HTTP layer, scheduler) can tell domain errors from bugs.
"""


class FreshrecError(Exception):
    """Base class for all freshrec errors."""


class ValidationError(FreshrecError, ValueError):
    """Input violates a documented precondition."""


class DimensionMismatchError(ValidationError):
    """Vector or matrix shapes do not chain."""


class DegenerateMatrixError(FreshrecError, ValueError):
    def __init__(self, message: str = "degenerate matrix") -> None:
        super().__init__(message)


class DegenerateWorldError(ValidationError):
    def __init__(self, message: str = "degenerate world") -> None:
        super().__init__(message)


class TrainingDivergedError(ValidationError):
    """Loss became non-finite during training."""


class ExpiredArmError(FreshrecError):
    def __init__(self, message: str = "expired arm") -> None:
        super().__init__(message)


class StaleSnapshotError(FreshrecError):
    def __init__(self, message: str = "stale snapshot") -> None:
        super().__init__(message)


class NoSnapshotError(FreshrecError):
    """Serving state required by the policy has not been published yet."""


class UnknownSlateError(FreshrecError, LookupError):
    """Feedback refers to a slate this service never issued (or already consumed)."""


class UnknownPolicyError(ValidationError):
    pass


class OverlappingSplitsError(ValidationError):
    pass


class TickAbortedError(FreshrecError):
    """A scheduler tick failed; previously published snapshots stay live."""


class FormatError(FreshrecError):
    """A persisted file does not match the expected layout."""


class IngestError(FreshrecError, OSError):
    """Event or catalog source could not be read at all."""
