"""Exception types shared across the package."""


class MrtSimError(Exception):
    """Base class for all package errors."""


class InputError(MrtSimError, ValueError):
    """Malformed or out-of-range input."""


class NumericalError(MrtSimError, ArithmeticError):
    """A matrix that should be positive definite is not."""


class ModelSanityError(MrtSimError):
    """A participant model produces implausible outcomes."""


class FitError(MrtSimError):
    """Every restart of a MAP fit failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class SpecError(MrtSimError, ValueError):
    """An ill-posed null projection (e.g. a zero constraint vector)."""


class SetupError(MrtSimError):
    """Inconsistent configuration, models or fault plan for a run."""


class AnalysisError(MrtSimError):
    """Inputs to an analysis cannot be aligned or compared."""


class UndefinedStatisticError(AnalysisError, ZeroDivisionError):
    """A statistic with a zero denominator."""
