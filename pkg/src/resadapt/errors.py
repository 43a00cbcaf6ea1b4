"""Exception hierarchy shared by every module.

Each subclass maps onto one CLI exit code (see ``resadapt.cli``).
"""


class ResAdaptError(Exception):
    exit_code = 1


class DimensionError(ResAdaptError, ValueError):
    exit_code = 2


class ConfigError(ResAdaptError, ValueError):
    exit_code = 2


class NumericError(ResAdaptError, ArithmeticError):
    exit_code = 4


class IntegrityError(ResAdaptError):
    exit_code = 4


class FormatError(ResAdaptError):
    exit_code = 3


class CompatibilityError(ResAdaptError):
    exit_code = 5


class DegenerateAdapterError(ResAdaptError, ValueError):
    exit_code = 2


class PreconditionError(ResAdaptError, ValueError):
    exit_code = 2
