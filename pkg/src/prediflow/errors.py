"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 1, data and
file-format problems exit 2, numeric failures (NaN/Inf) exit 3.
"""


class PrediflowError(Exception):
    """Base class for all package errors."""


class ConfigError(PrediflowError):
    """Invalid configuration value or unknown config key."""


class DimensionError(PrediflowError):
    """Tensor/sequence shapes do not agree."""


class UsageError(PrediflowError):
    """An API was called outside its contract (bad argument, wrong state)."""


class FormatError(PrediflowError):
    """A binary file failed validation (magic, version, truncation)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(PrediflowError):
    """Dataset content is unusable (empty split, degenerate statistics)."""


class NumericError(PrediflowError):
    """A computation produced NaN/Inf or diverged."""
