"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: argument/usage problems -> 1,
data and format problems -> 2, numeric failures -> 3.
"""


class TDDError(Exception):
    """Base class for all package errors."""


class ArgumentError(TDDError, ValueError):
    """Invalid argument, shape mismatch or bad configuration."""


class ConfigError(ArgumentError):
    """Network or training configuration violates an invariant."""


class FormatError(TDDError):
    """Malformed container header or manifest."""


class SizeError(FormatError):
    """Payload length disagrees with the header."""


class DataError(TDDError):
    """Data values are unusable (non-finite, wrong label values)."""


class LoadError(TDDError):
    """Checkpoint does not match its configuration."""


class NumericError(TDDError, ArithmeticError):
    """Non-finite values or a failed factorization."""

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint
