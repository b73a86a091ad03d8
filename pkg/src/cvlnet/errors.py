"""Exception types shared across the package."""


class CvlError(Exception):
    """Base class for every error raised deliberately by cvlnet."""

    kind = "error"


class DimensionError(CvlError, ValueError):
    kind = "dimension"


class ContractError(CvlError, ValueError):
    """A precondition of an operation was violated by the caller."""

    kind = "contract"


class ConfigError(CvlError, ValueError):
    kind = "config"


class FormatError(CvlError, ValueError):
    """A file could not be parsed or failed its header/shape checks."""

    kind = "format"


class ValidationError(CvlError, ValueError):
    kind = "validation"


class AlignmentError(CvlError, ValueError):
    kind = "alignment"


class UndefinedMetricError(CvlError, ValueError):
    kind = "undefined-metric"


class NonFiniteGradientError(CvlError, FloatingPointError):
    kind = "non-finite-gradient"
