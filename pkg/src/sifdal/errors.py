"""Exception hierarchy shared across the package."""


class SifdalError(Exception):
    """Base class for all package errors."""


class DimensionError(SifdalError, ValueError):
    pass


class ConfigurationError(SifdalError, ValueError):
    pass


class ContractError(SifdalError, ValueError):
    """A caller violated an operation's precondition."""


class NumericError(SifdalError, ArithmeticError):
    pass


class DataError(SifdalError, ValueError):
    """Malformed or out-of-range dataset content."""


class DatasetIOError(SifdalError, OSError):
    pass
