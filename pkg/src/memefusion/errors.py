"""Exception hierarchy shared across the package.

Distinct kinds exist so callers (and the CLI exit-code mapping) can tell
usage problems, bad data, and internal state misuse apart.
"""


class MemefusionError(Exception):
    """Base class for all package errors."""


class ConfigError(MemefusionError, ValueError):
    """A configuration value is outside its legal domain."""


class DimensionError(MemefusionError, ValueError):
    """Operand shapes do not conform; message names the operands."""


class StateError(MemefusionError, RuntimeError):
    """An operation ran against missing or already-consumed state."""


class NormalizationError(MemefusionError, ValueError):
    """A row violates a unit/nonzero-norm contract; message names the row."""


class DataError(MemefusionError, ValueError):
    """Input data violates a precondition (labels, lengths, empty splits)."""


class FormatError(DataError):
    """A serialized file does not conform to its documented format."""


class CorruptionError(FormatError):
    """A payload ended early or is internally inconsistent; carries offsets."""


class VersionError(FormatError):
    """A serialized file declares an unsupported format version."""


class ShapeError(FormatError):
    """A stored tensor's shape disagrees with the configuration manifest."""
