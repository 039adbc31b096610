"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar hyper-parameter is outside its valid range."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf while finite checks were enabled."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DataError(RuntimeError):
    """Input data is missing, unreadable or inconsistent."""
