"""Exception hierarchy shared by every module.

Each class carries the process exit code the command-line front end uses.
"""


class WmaugError(Exception):
    exit_code = 1


class ConfigError(WmaugError, ValueError):
    exit_code = 2


class UsageError(WmaugError, ValueError):
    exit_code = 2


class ShapeError(UsageError):
    pass


class FormatError(WmaugError, IOError):
    exit_code = 3


class NumericError(WmaugError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    pass


class CalibrationError(NumericError):
    pass
