"""Exception hierarchy shared across the package.

The CLI maps :class:`ConfigError` to one exit code and every other
:class:`MultistainError` to another.
"""


class MultistainError(Exception):
    """Base class for all package errors."""


class ConfigError(MultistainError, ValueError):
    """Invalid configuration, arguments or preconditions."""


class DatasetError(MultistainError):
    """Dataset files are missing, unreadable or inconsistent."""


class TrainingError(MultistainError):
    """Training halted (non-finite loss, frozen-weight drift, ...)."""


class CheckpointError(MultistainError):
    """A checkpoint could not be read or does not match expectations."""
