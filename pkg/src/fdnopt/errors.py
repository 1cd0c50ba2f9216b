"""Exception types shared across the package."""


class FdnError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FdnError, ValueError):
    """Invalid parameters, dimension mismatches, out-of-range values."""


class SingularResolventError(FdnError, ArithmeticError):
    """The resolvent is singular at an evaluation point (system pole hit)."""


class ConvergenceError(FdnError, RuntimeError):
    """An iterative procedure failed to converge (root finding, training)."""


class DesignError(FdnError, ValueError):
    """A design request cannot be satisfied (delays, filter gains)."""


class InsufficientDecayError(FdnError, RuntimeError):
    """A decay estimate could not be formed because the signal never decays far enough."""
