"""Exception types.

The CLI maps these onto exit codes: InfeasibleBudgetError -> 2, file/format
errors -> 3, argument/config errors -> 4.
"""


class StunError(Exception):
    """Base class for package errors."""


class ShapeError(StunError, ValueError):
    """A tensor has the wrong rank or incompatible dimensions."""


class ArgumentError(StunError, ValueError):
    """An argument is outside its documented domain."""


class ConfigError(ArgumentError):
    """A run configuration failed validation."""


class InfeasibleBudgetError(StunError):
    """The requested sparsity split cannot be realised (s_u outside [0, 1])."""


class FormatError(StunError):
    """A serialized container is malformed."""


class MagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class FormatVersionError(FormatError):
    """The container declares an unsupported format version."""


class TruncatedFileError(FormatError):
    """The file ends before the declared payload does."""


class ChecksumError(FormatError):
    """The payload checksum does not match the trailer."""


class DegenerateInputError(StunError, ValueError):
    """A statistic is undefined for this input (e.g. zero-variance kurtosis)."""
