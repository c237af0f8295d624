"""Exception types shared across the package."""


class MalariaDxError(Exception):
    """Base class for every error raised by this package."""


class RejectedInputError(MalariaDxError, ValueError):
    """An operation was called with arguments outside its domain."""


class NonFiniteError(RejectedInputError):
    """An operation produced NaN or Inf."""


class DegenerateInputError(RejectedInputError):
    """Input is valid in type but carries no usable structure (e.g. a constant image)."""


class UndefinedMetricError(MalariaDxError, ArithmeticError):
    """A metric has a zero denominator and is not applicable."""


class LayoutError(MalariaDxError):
    """A dataset folder does not follow the expected class-folder layout."""


class PersistenceError(MalariaDxError, OSError):
    """Writing an artifact to disk failed."""


class CheckpointError(MalariaDxError):
    """A checkpoint file could not be decoded."""


class BadMagicError(CheckpointError):
    pass


class UnknownVersionError(CheckpointError):
    pass


class CRCMismatchError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class UnexpectedParameterError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
