"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI and service: ConfigError-family -> 2,
DataError -> 3, I/O (OSError) -> 4.
"""


class CrackfuseError(Exception):
    """Base class for all package errors."""


class ShapeError(CrackfuseError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(CrackfuseError):
    """Invalid configuration (bad hyperparameters, divisibility, presets)."""


class DomainError(CrackfuseError):
    """Values outside the operation's valid domain (e.g. mask not in [0,1])."""


class UsageError(CrackfuseError):
    """API misuse (non-scalar backward, missing gradients, empty input)."""


class DataError(CrackfuseError):
    """Dataset problems: missing counterpart files, empty splits."""


class CheckpointError(ConfigError):
    """Checkpoint file malformed or incompatible with the model config."""
