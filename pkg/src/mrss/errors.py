"""Exception types shared across the package.

Every error raised on a contract boundary derives from :class:`MrssError` so
callers can catch the package's failures without also swallowing programming
errors. Numeric failures (non-invertible innovation covariances, degenerate
importance weights, diverged mode iterations) are distinct classes because the
command-line layer maps them to different exit codes.
"""


class MrssError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(MrssError, ValueError):
    """Array shapes are inconsistent with the declared model dimensions."""


class NonPSDInnovation(MrssError):
    """An innovation covariance F_t failed its symmetric factorization.

    Signals a degenerate model (observation plus projected state noise not
    positive definite at working tolerance); the filter refuses to continue
    rather than regularize silently.
    """


class SingularJointCovariance(MrssError):
    """The stacked joint observation covariance is numerically singular."""


class UnsupportedValue(MrssError, ValueError):
    """An observation lies outside the support of its channel family."""


class ModeDiverged(MrssError):
    """Mode iteration hit max_iter with a step still above the soft bound."""


class DegenerateWeights(MrssError):
    """Importance weights collapsed (effective sample size below 1% of N)."""


class InitFailed(MrssError):
    """The Gaussian pre-optimizer failed to improve on the heuristic seed."""


class NotConverged(MrssError):
    """Block-coordinate fit used up max_outer iterations.

    Carries the partial fit so the caller can decide what to do with it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NotNested(MrssError, ValueError):
    """Likelihood-ratio test called on models that are not nested."""


class LayoutMismatch(MrssError, ValueError):
    """Parameter arrays do not match the model spec's loading layout."""


class UnknownGroup(MrssError, KeyError):
    """A subject references a group the model spec does not declare."""


class UntreatedGroup(MrssError):
    """Treatment-effect prediction requested for a group with no b states."""


class ScenarioIncomplete(MrssError, ValueError):
    """A forecast scenario is missing indicator or covariate values."""


class RankDeficient(MrssError):
    """A least-squares design matrix is singular (constant channel)."""


class ZeroPredVariance(MrssError):
    """A predictive variance of zero makes the Pearson residual undefined."""


class FileFormatError(MrssError, ValueError):
    """A data or config file does not match its declared format.

    The message carries the row/column or key that failed, so command-line
    users can find the offending cell.
    """
