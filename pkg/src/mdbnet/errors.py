"""Exception types raised across the package."""


class MdbNetError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(MdbNetError, ValueError):
    pass


class DimensionMismatch(MdbNetError, ValueError):
    pass


class ShapeMismatch(MdbNetError, ValueError):
    pass


class NonScalarLoss(MdbNetError, ValueError):
    pass


class MissingGradient(MdbNetError, RuntimeError):
    pass


class NonFinite(MdbNetError, FloatingPointError):
    pass


class LabelOutOfRange(MdbNetError, ValueError):
    pass


class InvalidK(MdbNetError, ValueError):
    pass


class AllZeroFrequencies(MdbNetError, ValueError):
    pass


class EmptyMask(MdbNetError, ValueError):
    pass


class EmptyEvaluationRegion(MdbNetError, ValueError):
    pass


class TooFewFolds(MdbNetError, ValueError):
    pass


class InvalidSpec(MdbNetError, ValueError):
    pass


class FormatViolation(MdbNetError, ValueError):
    pass


class ProviderFileMissing(MdbNetError, FileNotFoundError):
    pass
