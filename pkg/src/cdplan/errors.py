"""Exception types shared across the package."""


class CdplanError(Exception):
    pass


class DimensionError(CdplanError, ValueError):
    pass


class NumericError(CdplanError, ArithmeticError):
    pass


class ConfigError(CdplanError, ValueError):
    pass


class SamplingError(CdplanError, ValueError):
    pass


class ParseError(CdplanError, ValueError):
    pass


class UsageError(CdplanError, RuntimeError):
    pass
