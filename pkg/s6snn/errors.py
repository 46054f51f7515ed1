"""Error types shared by every stage.

Each exception carries the process exit code the orchestrator reports:
0 success, 1 internal error, 2 config/data error, 3 integrity error.
"""


class S6Error(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


# --- numerical / model errors (exit 1) ---


class SingularMatrixError(S6Error, ValueError):
    """(I - Δ/2·A) could not be factorized: A and Δ form a degenerate pair."""


class NonFiniteError(S6Error, ArithmeticError):
    """A kernel power iterate, adjoint state or activation overflowed."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class NonFiniteLossError(NonFiniteError):
    """The training loss went NaN/inf; ``layer`` names the first offending layer."""


class LengthMismatchError(S6Error, ValueError):
    pass


class ShapeMismatchError(S6Error, ValueError):
    pass


class ProbabilityOutOfRangeError(S6Error, ValueError):
    pass


class EmptyTraceError(S6Error, ValueError):
    pass


# --- config / data errors (exit 2) ---


class DataError(S6Error, ValueError):
    exit_code = 2


class InvalidLengthError(DataError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class InvalidLabelError(DataError):
    pass


class ConfigInvalidError(DataError):
    pass


class DataMissingError(DataError):
    pass


# --- integrity errors (exit 3) ---


class IntegrityError(S6Error, ValueError):
    exit_code = 3


class ChecksumMismatchError(IntegrityError):
    pass


class ShapeIncompatibleError(IntegrityError):
    pass
