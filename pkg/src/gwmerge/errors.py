"""Exception hierarchy shared by every stage of the pipeline."""


class GWMergeError(Exception):
    """Base class for all errors raised by this package."""


# tensor-io
class FormatError(GWMergeError):
    pass


class MalformedHeader(FormatError):
    pass


class MalformedManifest(FormatError):
    pass


class DimensionMismatch(FormatError):
    pass


class ShapeDataMismatch(FormatError):
    pass


class DuplicateTensorName(FormatError):
    pass


class UntaggedTensor(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


class InvariantViolation(GWMergeError):
    pass


class IoFailure(GWMergeError):
    pass


# gw-core / similarity
class NumericalUnderflow(GWMergeError):
    pass


class PairFailure(GWMergeError):
    pass


class DegenerateRange(UserWarning):
    """All pairwise distances are equal, so the similarity rescaling is undefined."""


class ZeroVariance(UserWarning):
    """Paired differences are constant; the t statistic is undefined."""


# planner
class InvalidPartition(GWMergeError):
    pass


class TargetOutOfRange(GWMergeError):
    pass


class TooManyTasks(GWMergeError):
    pass


# merger
class ShapeMismatch(GWMergeError):
    pass


class EmptyInput(GWMergeError):
    pass


class NegativeFisher(GWMergeError):
    pass


class LambdaCountMismatch(GWMergeError):
    pass


class InvalidDensity(GWMergeError):
    pass


class MissingSnapshot(GWMergeError):
    pass


class MethodRequiresBase(GWMergeError):
    pass


# metrics
class LengthMismatch(GWMergeError):
    pass


class NonPositiveWeight(GWMergeError):
    pass


# cli / pipeline
class ConfigError(GWMergeError):
    pass


class StageError(GWMergeError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
