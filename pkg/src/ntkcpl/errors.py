"""Exception hierarchy. Each maps onto one CLI exit code."""


class NTKCPLError(Exception):
    exit_code = 1


class ConfigError(NTKCPLError):
    exit_code = 2


class DataError(NTKCPLError):
    exit_code = 3


class FormatError(DataError):
    """File does not parse under the declared format."""


class ValidationError(DataError):
    """Parsed values violate a data invariant (NaN, label range, ...)."""


class PreconditionError(NTKCPLError, ValueError):
    exit_code = 3


class EmptyPoolError(PreconditionError):
    pass


class ConstraintError(PreconditionError):
    """Cannot-link constraints could not be satisfied during assignment."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class NumericalRankError(NTKCPLError, ArithmeticError):
    exit_code = 4
