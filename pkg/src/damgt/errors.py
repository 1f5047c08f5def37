"""Exception hierarchy. Each family maps to a CLI exit code."""


class DamgtError(Exception):
    exit_code = 1


class ConfigError(DamgtError, ValueError):
    exit_code = 2


class DataError(DamgtError):
    exit_code = 3


class ParseError(DataError, ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class DimensionMismatchError(DataError, ValueError):
    pass


class NodeIndexError(DataError, IndexError):
    pass


class UndefinedMetricError(DataError, ValueError):
    pass


class StaleCacheError(DataError):
    pass


class CorruptCacheError(DataError):
    pass


class NumericError(DamgtError, ArithmeticError):
    exit_code = 4


class ShapeError(DamgtError, ValueError):
    exit_code = 2


class UnsupportedPatternError(ConfigError):
    pass
