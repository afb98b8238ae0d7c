"""Exception types shared across the package."""


class PlanError(ValueError):
    """Raised for reshape plans whose modes overlap, repeat, or are incomplete."""


class SymmetryError(ValueError):
    """Raised when an operation requires a symmetric matrix and the input is not."""


class DegeneracyError(ValueError):
    """Raised when a matrix that must be full rank is numerically rank deficient."""


class ConfigError(ValueError):
    """Raised for malformed experiment configuration files."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver runs out of iterations.

    Carries the best iterate found so far in ``best`` so callers can inspect
    or salvage it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
