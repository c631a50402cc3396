"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: usage problems -> 1,
data/format problems -> 2, numeric divergence -> 3.
"""


class EcgtlError(Exception):
    """Base class for all pipeline errors."""


class DataError(EcgtlError):
    """Bad or missing input data (exit code 2)."""


class ParseError(DataError):
    """Malformed text input (e.g. WFDB header line)."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class UnsupportedFormatError(DataError):
    """Signal format code other than 212."""


class TruncatedFileError(DataError):
    """Binary payload ends mid-record."""


class CodecError(DataError):
    """Annotation stream violates the MIT codec."""


class RangeError(DataError):
    """Value outside its representable range."""


class NotABeatError(DataError):
    """Annotation symbol is not a beat-type code."""


class ChecksumError(DataError):
    """Signal checksum mismatch (raised only in strict mode)."""


class DesignError(EcgtlError):
    """Impossible filter specification."""


class NumericError(EcgtlError):
    """Non-finite values where finite ones are required."""


class ShapeError(DataError):
    """Tensor/image shape incompatible with the requested operation."""


class ConfigError(EcgtlError):
    """Invalid configuration value."""


class IncompatibilityError(DataError):
    """Checkpoint fingerprint does not match the dataset preprocessing."""


class FormatError(DataError):
    """Tensor container file violates the on-disk format."""


class FileWriteError(EcgtlError):
    """Output path is not writable."""


class DivergenceError(EcgtlError):
    """Training loss became non-finite (exit code 3).

    Carries the last finite-loss checkpoint when one exists.
    """

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
