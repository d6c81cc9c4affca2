"""Exception hierarchy. CLI exit codes hang off these classes."""


class MextError(Exception):
    exit_code = 1


class ConfigError(MextError, ValueError):
    exit_code = 2


class DataError(MextError, ValueError):
    exit_code = 3


class CheckpointMismatch(MextError):
    exit_code = 4


class ContractError(MextError, ValueError):
    """A caller broke an operation's precondition (shape, rank, range)."""


class DimensionError(ContractError):
    pass
