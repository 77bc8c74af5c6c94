"""Exception hierarchy shared by every module, with CLI exit codes attached."""


class DstaError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(DstaError):
    """Bad command-line usage or unresolvable experiment configuration."""

    exit_code = 1


class ConfigError(DstaError):
    """Invalid or inconsistent configuration values."""

    exit_code = 1


class DimensionError(ConfigError):
    """Tensor shapes do not fit the operation; message names both shapes."""


class ContractError(ConfigError):
    """An operation was called outside its stated preconditions."""


class DataError(DstaError):
    """Bad dataset contents, unreadable files, or out-of-range labels."""

    exit_code = 2


class CheckpointError(DataError):
    """Checkpoint file is truncated, mis-versioned, or shape-inconsistent."""


class NumericError(DstaError):
    """Non-finite values where finite ones are required."""

    exit_code = 3
