"""Exception hierarchy shared across the package."""


class AdaPruneError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AdaPruneError, ValueError):
    """Shapes, hyperparameters or model configuration do not agree."""


class ValidationError(AdaPruneError, ValueError):
    """Input data violates a type invariant (non-finite values, bad dims)."""


class UsageError(AdaPruneError):
    """An operation was called in the wrong mode or without prerequisites."""


class NumericalError(AdaPruneError, ArithmeticError):
    """A numerical routine could not produce a meaningful result."""
