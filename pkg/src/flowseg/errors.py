"""Exception hierarchy.

Errors are grouped by how the CLI maps them to exit codes: format/data
problems (exit 3) and numerical failures (exit 4). Invalid arguments are
raised as ValueError and mapped to exit 2.
"""


class FlowsegError(Exception):
    """Base class for all library errors."""


class FormatError(FlowsegError):
    """Malformed or inconsistent on-disk data (manifest, raster, missing file)."""


class NumericalError(FlowsegError):
    """Base class for numerical failures."""


class IllConditionedError(NumericalError):
    """A per-region system was numerically non-SPD; carries the region index."""

    def __init__(self, message, region=None):
        super().__init__(message)
        self.region = region


class RankDeficiencyError(NumericalError):
    """Least-squares normal matrix is singular (degenerate coordinate spread)."""


class OracleCapacityError(NumericalError):
    """A region is too large for the dense full-covariance oracle."""


class EstimationFailedError(NumericalError):
    """Covariance estimation found no qualifying regions."""


class DivergenceError(NumericalError):
    """Optimization produced a non-finite loss; carries the iteration index."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class UndefinedMetricError(NumericalError):
    """A metric is undefined for the given input (e.g. no foreground pixels)."""


class GenerationError(FlowsegError):
    """Scene generation failed (e.g. object placement exhausted its retries)."""
