"""Scale-invariant feature disentangling with adversarial learning, on a small numpy detector."""

from .errors import (ConfigurationError, ContractError, DataError, DatasetIOError, DimensionError,
                     NumericError, SifdalError)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigurationError", "ContractError", "DataError", "DatasetIOError",
           "DimensionError", "NumericError", "SifdalError", "__version__"]
