"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class PreconditionError(ValueError):
    """A numerical procedure was called with settings it cannot honour."""


class NumericalError(RuntimeError):
    """A factorization failed even after the jitter policy was exhausted.

    Attributes
    ----------
    min_eigenvalue : float or None
        Estimate of the smallest eigenvalue of the offending matrix.
    """

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class SamplerAbort(RuntimeError):
    """The MCMC sampler hit too many factorization failures to continue."""
