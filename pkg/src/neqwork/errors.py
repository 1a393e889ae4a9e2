"""Exception hierarchy. CLI maps ConfigError-family to exit code 2."""


class NeqworkError(Exception):
    pass


class ConfigError(NeqworkError, ValueError):
    """Invalid configuration: dimension mismatch, unknown catalog name, bad field."""


class DomainError(NeqworkError, ValueError):
    """Argument outside the domain of an operation (e.g. time outside [0, T])."""


class EvaluationError(NeqworkError, ArithmeticError):
    """A model or integrand produced a non-finite value."""


class EstimationError(NeqworkError, RuntimeError):
    """Numerical quadrature failed to reach its tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class IntegrabilityError(NeqworkError, ArithmeticError):
    """The Boltzmann weight does not appear to be integrable."""


class AlignmentError(NeqworkError, ValueError):
    """A trajectory is missing a time point required by the protocol."""


class KernelRefusedError(ConfigError):
    """A kernel that does not conserve the canonical law was passed to an estimator."""


class StatisticsError(NeqworkError, ValueError):
    pass


class ObservableError(NeqworkError, ValueError):
    """An observable exceeded its declared bound."""


class SizeError(NeqworkError, ValueError):
    """Brute-force enumeration would exceed the combinatorial guard."""
