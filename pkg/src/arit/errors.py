"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AritError(Exception):
    exit_code = 1


class ConfigError(AritError, ValueError):
    exit_code = 3


class DataError(AritError, ValueError):
    exit_code = 4


class NumericError(AritError, ArithmeticError):
    exit_code = 5


class FormatVersionError(DataError):
    """Binary file with a wrong magic/version or a truncated body."""
