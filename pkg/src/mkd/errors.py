"""Exception hierarchy shared by every module.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`NumericError`
to exit code 3.
"""


class MkdError(Exception):
    """Base class for all package errors."""


class ConfigError(MkdError, ValueError):
    """Invalid or unsupported configuration / missing prerequisite."""


class NumericError(MkdError, ArithmeticError):
    """A numerical routine failed or produced non-finite values."""


class DomainError(MkdError, ValueError):
    """Input lies outside the mathematical domain of the operation."""


class DegenerateChannelError(NumericError):
    """Estimated channel is rank deficient after the rank cutoff."""


class FormatError(MkdError, ValueError):
    """Malformed binary file (bad magic, truncated payload, ...)."""


class TrainingDivergedError(NumericError):
    """Training loss became NaN or exploded."""
