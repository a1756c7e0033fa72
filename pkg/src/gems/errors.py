"""Exception types shared across the package."""


class GemsError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(GemsError, ValueError):
    """Raised when arguments violate a documented precondition."""


class DisconnectedGraphError(InvalidInputError):
    """Raised when an operation needs a connected graph and got a disconnected one."""


class NumericalError(GemsError, ArithmeticError):
    """Raised when an iterative solver diverges or produces non-finite values."""
