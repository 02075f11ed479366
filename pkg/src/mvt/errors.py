"""Exception types shared across the package."""


class MVTError(Exception):
    """Base class for all package errors."""


class DimensionError(MVTError, ValueError):
    pass


class NumericError(MVTError, ArithmeticError):
    pass


class ContractError(MVTError, ValueError):
    pass


class ConfigError(MVTError, ValueError):
    pass


class FormatError(MVTError, ValueError):
    pass
