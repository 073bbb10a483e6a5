"""Exception and warning types shared across the package."""


class AugbinError(Exception):
    """Base class for all package errors."""


class NotPositiveSemiDefinite(AugbinError):
    """Covariance matrix has a pivot below the negative tolerance."""


class DegenerateRegion(AugbinError):
    """Integration region carries (numerically) zero probability mass."""


class NonPositiveSize(AugbinError):
    """Tumour size must be strictly positive."""


class ParseError(AugbinError):
    """Malformed input file; carries row/column context in the message."""


class ValidationError(AugbinError):
    """Structurally valid input violating a dataset invariant."""


class InsufficientData(AugbinError):
    """Too few patients/visits to identify the model."""


class SingularDesign(AugbinError):
    """Collinear regressors in a model fit."""


class EmptyRiskSet(AugbinError):
    """No patients at risk at some visit of a progression model."""


class BoundaryProbability(AugbinError, UserWarning):
    """Mean probability too close to 0/1 for a logit-scale interval.

    Usable both as a raised error and as a warning category when the caller
    falls back to a score interval on the dichotomized outcome.
    """


class TooManyFailures(AugbinError):
    """More replicate failures than the simulation harness tolerates."""


class ToleranceNotReached(UserWarning):
    """Quadrature returned before meeting the requested tolerance."""


class SeparationWarning(UserWarning):
    """Monotone likelihood in a logistic fit; coefficient was capped."""


class SingularInformation(UserWarning):
    """Observed information not invertible; pseudo-inverse used."""


class AllTrimmedWarning(UserWarning):
    """Every at-risk patient was trimmed; untrimmed mean used instead."""
