"""Exception hierarchy.

Everything raised on purpose derives from CcnnError so callers (and the CLI)
can catch one base type. File-format problems get their own subtree because
the readers promise structured, distinguishable failures on malformed bytes.
"""


class CcnnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CcnnError, ValueError):
    """Tensor shapes or dimensions are inconsistent with the operation."""


class SpecError(CcnnError, ValueError):
    """A network description is internally inconsistent."""


class ParameterError(CcnnError, ValueError):
    """An argument or configuration value is out of its legal range."""


class UsageError(CcnnError, RuntimeError):
    """An API was called in a state it does not support."""


class DivergenceError(CcnnError, ArithmeticError):
    """Training produced a non-finite loss."""


class AccountingError(CcnnError, ValueError):
    """A parameter could not be assigned to a storage bucket."""


class DataError(CcnnError, ValueError):
    """Numeric input data violates a precondition (for example NaN/Inf)."""


class FormatError(DataError):
    """Malformed binary input.

    offset, when not None, is the byte position the problem was detected at.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    """A file does not start with the expected magic number."""


class TruncatedError(FormatError):
    """A file ended before its declared payload, or carries trailing bytes."""


class CountMismatchError(FormatError):
    """Paired files disagree on how many items they contain."""


class CorruptRecordError(FormatError):
    """A record's declared size is inconsistent with its own fields."""


class VersionMismatchError(FormatError):
    """A container file carries an unsupported format version."""


class ChecksumError(FormatError):
    """A container file's checksum does not match its contents."""


class EncodingTagError(FormatError):
    """A container file uses an unknown per-tensor encoding tag."""
