"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration 2, numeric 3, I/O 4.
"""


class HncaError(Exception):
    """Base class for all package errors."""


class ConfigError(HncaError):
    """Invalid configuration, shape mismatch, or unsupported combination."""


class NumericError(HncaError):
    """Non-finite or degenerate value encountered during computation."""


class DataFormatError(HncaError):
    """Malformed on-disk data (bad magic, truncation, corrupt sidecar)."""


class SizeCapError(ConfigError):
    """Instance exceeds the exhaustive-enumeration cap."""
