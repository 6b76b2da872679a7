"""Exception types shared across the toolkit."""


class GradSurgeonError(Exception):
    """Base class for all library errors."""


class ZeroNormError(GradSurgeonError):
    """A cosine was requested for a zero-norm vector."""


class NonFiniteError(GradSurgeonError):
    """A numeric probe or result came out NaN/Inf."""


class ShapeMismatchError(GradSurgeonError):
    """Adjacent layers or an input do not agree on shapes."""


class UnknownTaskError(GradSurgeonError):
    pass


class UnknownUnitError(GradSurgeonError):
    pass


class NonFiniteLossError(GradSurgeonError):
    """A task loss evaluated to NaN/Inf.

    Carries enough context to locate the offending forward pass.
    """

    def __init__(self, message, task=None, batch_index=None, iteration=None):
        super().__init__(message)
        self.task = task
        self.batch_index = batch_index
        self.iteration = iteration


class NotSharedError(GradSurgeonError):
    """A per-layer operation was applied to a unit that is not shared."""


class MissingGradientError(GradSurgeonError):
    def __init__(self, message, task=None):
        super().__init__(message)
        self.task = task


class SeverityOutOfRangeError(GradSurgeonError):
    """Conflict severity threshold must lie in (-1, 0]."""


class DuplicateIterationError(GradSurgeonError):
    pass


class LayerSetMismatchError(GradSurgeonError):
    pass


class KTooLargeError(GradSurgeonError):
    pass


class AlreadyTaskSpecificError(GradSurgeonError):
    pass


class WeightsNotNormalizedError(GradSurgeonError):
    pass


class LengthMismatchError(GradSurgeonError):
    pass


class InnerSolveFailedError(GradSurgeonError):
    pass


class EmptySplitError(GradSurgeonError):
    pass


class ZeroReferenceError(GradSurgeonError):
    pass


class BadMagicError(GradSurgeonError):
    pass


class TruncatedPayloadError(GradSurgeonError):
    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class SizeMismatchError(GradSurgeonError):
    pass
