"""Exception hierarchy.

Two families matter to callers: :class:`ConfigError` covers bad input or
configuration (CLI exit code 1) and :class:`NumericError` covers numerical
failures at runtime (CLI exit code 2).
"""


class LFTError(Exception):
    """Base class for all package errors."""


class ConfigError(LFTError):
    """Invalid configuration, selector, or user input."""


class InvalidInputError(ConfigError, ValueError):
    pass


class InvalidShapeError(InvalidInputError):
    pass


class InvalidTimestepError(InvalidInputError):
    pass


class InvalidProposalError(InvalidInputError):
    pass


class InsufficientDataError(InvalidInputError):
    pass


class FormatError(ConfigError):
    """Malformed or version-mismatched binary file."""


class NumericError(LFTError, ArithmeticError):
    """Runtime numerical failure."""


class DegenerateBatchError(NumericError):
    pass


class DegenerateSeriesError(NumericError):
    pass


class NumericRangeError(NumericError):
    pass


class TrainingDivergenceError(NumericError):
    def __init__(self, msg, index=None, checkpoint=None):
        super().__init__(msg)
        self.index = index
        self.checkpoint = checkpoint


class TrajectoryDivergenceError(NumericError):
    pass


class TuningError(NumericError):
    pass


class UndefinedLengthError(NumericError):
    pass


class FitDomainError(NumericError):
    pass
