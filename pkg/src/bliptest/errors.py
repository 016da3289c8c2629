"""Exception hierarchy shared by every module of the package."""


class BlipTestError(Exception):
    """Base class for all errors raised by bliptest."""


class ParseError(BlipTestError, ValueError):
    """Malformed input text; ``line`` is the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDatasetError(ParseError):
    pass


class DomainError(BlipTestError, ValueError):
    """A value lies outside the support of its declared distribution."""


class SchemaError(BlipTestError, ValueError):
    """Required columns are missing or declared inconsistently."""


class StatisticalError(BlipTestError):
    """Base class for failures that make an estimate or test undefined."""


class EstimabilityError(StatisticalError):
    """A point effect or transition probability cannot be estimated.

    ``strata`` lists the offending cells as ``(t, x, z)`` tuples.
    """

    def __init__(self, message, strata=()):
        self.strata = tuple(strata)
        super().__init__(message)


class IdentifiabilityError(StatisticalError):
    """The design matrix does not have full column rank."""

    def __init__(self, message, dependent=()):
        self.dependent = tuple(dependent)
        super().__init__(message)


class WeightingError(StatisticalError):
    """The covariance of the point effects is not positive definite."""


class ConstraintError(StatisticalError):
    """A linear constraint is degenerate in the covariance metric."""


class DegenerateTestError(StatisticalError):
    """The Wald quadratic form cannot be inverted."""


class ConvergenceError(StatisticalError):
    """Iterative fitting did not converge; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        self.last = last
        super().__init__(message)


class BootstrapError(StatisticalError):
    """Too many bootstrap or Monte Carlo replicates failed."""
