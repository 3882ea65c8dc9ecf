"""Exception hierarchy for ivcox."""


class IVCoxError(Exception):
    """Base class for all errors raised by ivcox."""


class DataError(IVCoxError, ValueError):
    """Input data failed validation."""


class EmptyData(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    """A time, covariate or instrument is non-finite or outside its domain."""


class TiedEventTimes(DataError):
    pass


class IdentificationViolation(IVCoxError, ValueError):
    """The design/configuration cannot identify the model parameters.

    ``condition`` names the failed identification condition
    ("1", "2" or "3").
    """

    def __init__(self, condition: str, message: str):
        super().__init__(f"identification condition {condition}: {message}")
        self.condition = condition


class InvalidParameter(IVCoxError, ValueError):
    pass


class InvalidSpec(IVCoxError, ValueError):
    pass


class BaselineNotCovering(IVCoxError, ValueError):
    pass


class FitError(IVCoxError, RuntimeError):
    """A numerical fit could not be completed."""


class DegenerateWeights(FitError):
    def __init__(self, message: str, subject: int | None = None):
        super().__init__(message if subject is None else f"subject {subject}: {message}")
        self.subject = subject


class SingularHessian(FitError):
    pass


class MonotoneLikelihoodDivergence(FitError):
    """Cox coefficients diverge, usually because of separation."""


class Separation(FitError):
    """Probit coefficients diverge because the treatment is perfectly separated."""


class NonConvergence(FitError):
    pass


class TooManyFailures(FitError):
    pass


class EmptyEstimates(IVCoxError, ValueError):
    pass
