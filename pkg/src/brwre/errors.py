"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3.
"""


class BRWError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(BRWError, ValueError):
    """Invalid parameters or configuration; names the violated precondition."""


class UnsupportedOperation(BRWError):
    """Operation not available for this kind of law (e.g. enumeration of a continuous law)."""


class NumericalError(BRWError, ArithmeticError):
    """A numeric routine could not produce a trustworthy answer."""


class DomainError(NumericalError):
    """Log-Laplace transform (or another quantity) is not finite at the requested point."""


class NoRootError(NumericalError):
    """Root search found no sign change on the searched bracket."""


class RegimeError(NumericalError):
    """Parameters fall outside the regime where the requested quantity is defined."""
