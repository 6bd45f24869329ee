"""Exception and warning types raised across the package."""


class SparError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(SparError, ValueError):
    pass


class NonPositiveDataError(SparError, ValueError):
    pass


class DegenerateMarginError(SparError, ValueError):
    pass


class DegeneratePointError(SparError, ValueError):
    pass


class ShapeError(SparError, ValueError):
    pass


class InsufficientDataError(SparError, ValueError):
    pass


class InitializationError(SparError, RuntimeError):
    """Training loss was not finite before the first update."""


class NonFiniteGradientError(SparError, FloatingPointError):
    pass


class ModelStateError(SparError, RuntimeError):
    pass


class ResolutionError(SparError, ValueError):
    """Requested probability is too small for the Monte Carlo sample size."""

    def __init__(self, message, required_m_tail=None):
        super().__init__(message)
        self.required_m_tail = required_m_tail


class InfeasibleRegionError(SparError, RuntimeError):
    pass


class ParseError(SparError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(SparError, ValueError):
    pass


class BootstrapFailure(SparError, RuntimeError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or {}


class ConvergenceWarning(UserWarning):
    pass


class PrecisionWarning(UserWarning):
    pass
