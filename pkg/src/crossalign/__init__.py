"""Non-parallel text style transfer with cross-aligned auto-encoders, built
on a small numpy autodiff engine."""

from .errors import ContractError, DataError, DimensionError, DivergenceError, NonFiniteError, ParameterError

__version__ = "0.1.0"

__all__ = ["ContractError", "DataError", "DimensionError", "DivergenceError", "NonFiniteError",
           "ParameterError", "__version__"]
