"""Exception hierarchy. Each family maps onto one CLI exit code."""


class CherryQError(Exception):
    exit_code = 1


class ConfigError(CherryQError, ValueError):
    exit_code = 2


class ConfigMismatchError(ConfigError):
    pass


class DataError(CherryQError, ValueError):
    exit_code = 3


class CorruptCheckpointError(DataError):
    pass


class NumericError(CherryQError, ArithmeticError):
    exit_code = 4


class UsageError(CherryQError, RuntimeError):
    pass
