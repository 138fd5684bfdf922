"""Exception hierarchy shared by every module.

The command-line front end maps `ConfigError` to exit code 2 and every other
`UnbiasGeoError` to exit code 3.
"""


class UnbiasGeoError(Exception):
    """Base class for all errors raised by the toolkit."""


class ConfigError(UnbiasGeoError):
    """Malformed or inconsistent user input (unknown ids, bad fields)."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DomainError(UnbiasGeoError, ValueError):
    """A parameter point lies outside the open parameter box."""


class PreconditionError(UnbiasGeoError, ValueError):
    """An operation was called on inputs that violate its precondition."""


class NumericError(UnbiasGeoError, ArithmeticError):
    """A numerical computation produced an unusable result."""

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class SolverError(NumericError):
    """An iterative solver (optimizer, shooting, quadrature) did not converge."""


class BoundaryError(SolverError):
    """An optimizer iterate was driven to the edge of the parameter box."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class NotLevelConstantError(NumericError):
    """The integrand of the estimand-path prior varies along a level set."""


class ExperimentError(UnbiasGeoError):
    """A Monte Carlo experiment exceeded its failure budget."""
