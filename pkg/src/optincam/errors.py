"""Exception types shared across the toolkit."""


class OptincamError(Exception):
    """Base class for all toolkit errors."""


class DegeneratePoint(OptincamError):
    """Point coincides with the anchor; polar angles are undefined."""


class BadBox(OptincamError):
    """Head bounding box has non-positive width."""


class NonPositiveDt(OptincamError):
    """Time step must be strictly positive."""


class CovarianceNotPD(OptincamError):
    """Covariance failed Cholesky factorization even after jitter."""


class SingularCovariance(OptincamError):
    """Position covariance not invertible after jitter."""


class DegenerateLabels(OptincamError):
    """Training labels contain only one class."""


class DimensionMismatch(OptincamError):
    """Feature/image dimensions do not match the expected shape."""


class NonFiniteObjective(OptincamError):
    """Objective returned a non-finite value at the start point."""


class NoValidHypothesis(OptincamError):
    """Every RANSAC hypothesis fit failed."""


class InsufficientData(OptincamError):
    """Not enough samples for the requested operation."""


class EmptyInput(OptincamError):
    """An input sequence was empty."""


class NonMonotonicTimestamps(OptincamError):
    """Timestamps must be strictly increasing."""


class InvalidPolygon(OptincamError):
    """Scene polygon is not simple and convex."""


class SchemaError(OptincamError):
    """Malformed record in an input stream."""


class ClockSkew(OptincamError):
    """Input streams interleave non-monotonically beyond tolerance."""


class MissingGroundTruth(OptincamError):
    """Evaluation requested without ground-truth labels."""
