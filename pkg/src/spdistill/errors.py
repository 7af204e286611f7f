"""Exception types shared across the package.

The CLI maps these to distinct exit codes: config errors, data-format
errors (including checkpoint files), and numeric errors each get their own
code so scripted callers can branch on the failure class.
"""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration: unknown tap ids, bad hyperparameters, etc."""


class NumericError(ArithmeticError):
    """Non-finite values where the computation requires finite input."""


class DataFormatError(ValueError):
    """Malformed dataset file (wrong size, bad label byte, ...)."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Bad magic, unsupported format version, or spec-hash mismatch."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload was read."""


class CheckpointChecksumError(CheckpointError):
    """Trailing CRC32 does not match the file contents."""
