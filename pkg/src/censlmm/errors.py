"""Exception hierarchy shared across the package."""


class CensLmmError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(CensLmmError):
    """A required column is missing or the schema is inconsistent."""


class ParseError(CensLmmError):
    """A cell could not be parsed; carries the offending row number."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DimensionError(CensLmmError):
    """Design rows, covariates or integration dimensions do not match."""


class NotPositiveDefiniteError(CensLmmError):
    """A covariance matrix failed its Cholesky factorization."""


class InvalidParameterError(CensLmmError):
    """A parameter vector violates its constraints (e.g. sigma_e = 0)."""


class ModeSearchError(CensLmmError):
    """Newton search for the integrand mode did not converge.

    Carries the last iterate so callers can inspect where it stalled.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class IntegrationError(CensLmmError):
    """A quadrature node produced a non-finite integrand value."""


class GradientError(CensLmmError):
    """A finite-difference probe hit a non-finite objective value."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class OptimizationStall(CensLmmError):
    """The optimizer made no progress; carries the best iterate found."""

    def __init__(self, message, best_x=None, best_f=None, trace=None):
        super().__init__(message)
        self.best_x = best_x
        self.best_f = best_f
        self.trace = trace


class EvaluationError(CensLmmError):
    """A log-likelihood could not be evaluated; names the subject."""

    def __init__(self, message, subject_id=None):
        super().__init__(message)
        self.subject_id = subject_id
