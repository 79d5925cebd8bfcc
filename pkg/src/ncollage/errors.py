"""Exception types raised across the package."""


class CollageError(Exception):
    """Base class for all package errors."""


class ParseError(CollageError):
    pass


class PartitionError(CollageError, ValueError):
    pass


class ShapeError(CollageError, ValueError):
    pass


class ContractivityError(CollageError):
    pass


class SizeError(CollageError):
    pass


class NumericalError(CollageError, ArithmeticError):
    pass


class FormatError(CollageError):
    pass


class ArgumentError(CollageError, ValueError):
    pass


class InvariantError(CollageError, ValueError):
    pass
