"""Exception hierarchy. The CLI maps these onto exit codes."""


class MsadgnError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MsadgnError, ValueError):
    pass


class LabelError(MsadgnError, ValueError):
    pass


class ContractError(MsadgnError, ValueError):
    pass


class ParameterError(MsadgnError, ValueError):
    pass


class ConfigurationError(MsadgnError, ValueError):
    pass


class DataError(MsadgnError, ValueError):
    pass


class FormatError(MsadgnError, ValueError):
    pass


class NumericError(MsadgnError, ArithmeticError):
    pass
