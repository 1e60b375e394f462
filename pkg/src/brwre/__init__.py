"""Branching random walks in a time-random environment, killed above a moving barrier."""
from .errors import (BRWError, ConfigError, DomainError, NoRootError, NumericalError, RegimeError,
                     UnsupportedOperation)

__version__ = "0.1.0"

__all__ = ["BRWError", "ConfigError", "DomainError", "NoRootError", "NumericalError", "RegimeError",
           "UnsupportedOperation", "__version__"]
