"""
Exception hierarchy for the Euclidean Gibbs lab.
Every error raised on purpose by the lab derives from GibbsLabError so the CLI
can turn it into an error record and a nonzero exit code.
"""


class GibbsLabError(Exception):
    """Base class for all lab errors."""


class DomainError(GibbsLabError, ValueError):
    """Argument outside the domain of an operation (bad site, unordered taus, ...)."""


class DivergenceError(GibbsLabError, ArithmeticError):
    """A series or seminorm that does not converge."""


class ConfigurationError(GibbsLabError, ValueError):
    """Invalid model document, manifest or boundary data."""


class CapacityError(GibbsLabError, RuntimeError):
    """Oracle problem too large for brute-force evaluation."""


class BasisSizeError(GibbsLabError, RuntimeError):
    """Exact diagonalization did not converge within the maximum basis size."""


class StepSizeError(GibbsLabError, FloatingPointError):
    """Integrator produced a non-finite drift."""


class InsufficientDataError(GibbsLabError, ValueError):
    """Too few effective samples for a statistical verdict."""


class DependencyError(GibbsLabError, RuntimeError):
    """A required upstream artifact (samples, fitted constants) is missing."""
