"""Exception hierarchy. The CLI maps each family to an exit code."""


class LabError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class ConfigError(LabError, ValueError):
    exit_code = 1


class ShapeError(LabError, ValueError):
    exit_code = 2


class DataError(LabError, ValueError):
    exit_code = 2


class NumericError(LabError, ArithmeticError):
    exit_code = 3
