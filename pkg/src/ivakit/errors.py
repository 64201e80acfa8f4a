"""Exception hierarchy shared by all ivakit modules."""


class IvakitError(Exception):
    """Base class for all errors raised by ivakit."""


class DataValidationError(IvakitError):
    """Input data violates a structural precondition (non-finite, wrong dims)."""


class ShapeError(IvakitError):
    """Array dimensions of two inputs do not agree."""


class ParameterError(IvakitError):
    """A model or configuration parameter is outside its valid range."""


class SingularityError(IvakitError):
    """A density or score was evaluated at a singular point."""


class RankDeficiencyError(IvakitError):
    """A sample covariance is (numerically) rank deficient."""

    def __init__(self, message, dataset_index=None):
        super().__init__(message)
        self.dataset_index = dataset_index


class DegenerateUnmixingError(IvakitError):
    """An unmixing matrix has collapsed rows (no usable decoupling vector)."""


class NearSingularUnmixingError(IvakitError):
    """abs(det W) fell below the configured floor during evaluation.

    Optimizers attach the partial convergence report as ``report`` when the
    collapse happens mid-run.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericalFailureError(IvakitError):
    """A linear solve or factorization failed and no fallback was allowed."""


class UndefinedMetricError(IvakitError):
    """A separation metric is undefined for the given input (zero row/column,
    zero-variance component)."""


class CombinatorialLimitError(IvakitError):
    """An exhaustive enumeration would exceed the configured size limit."""


class ConfigError(IvakitError):
    """An experiment configuration is inconsistent or incomplete."""
