"""Exception hierarchy shared across the package.

Every error raised on purpose derives from DarsError so CLI handlers can
catch one type and turn it into a single-line diagnostic + exit code 1.
"""


class DarsError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(DarsError):
    """Tensor file has a bad magic tag, unknown dtype code, or trailing bytes."""


class TruncationError(DarsError):
    """Tensor file payload is shorter than the header promises."""


class DimsError(DarsError):
    """Tensor header declares an unsupported rank or implausible dimensions."""


class IoError(DarsError):
    """Filesystem operation failed (unwritable path, vanished file)."""


class ManifestError(DarsError):
    """Dataset manifest is malformed or internally inconsistent."""


class EmptyDistributionError(DarsError):
    """A class distribution was requested over zero countable pixels."""


class ShapeError(DarsError):
    """Operands disagree on class count or spatial dimensions."""


class ConsistencyError(DarsError):
    """Inputs that must have been produced together do not match."""


class EmptyResultError(DarsError):
    """A labeling run produced no pseudo-labeled pixels at all."""


class NumericError(DarsError):
    """Non-finite values where finite ones are required."""


class EmptyDatasetError(DarsError):
    """Training was asked to run on an empty labeled set."""


class ConfigError(DarsError):
    """A configuration value is outside its legal range."""
