"""Exception types shared across the package."""


class LrmmError(Exception):
    """Base class for every error this package raises on purpose."""


class InvalidArgument(LrmmError, ValueError):
    """A caller passed a value that violates an operation's precondition."""


class StateError(LrmmError, RuntimeError):
    """An operation was invoked in the wrong order (e.g. backward before forward)."""


class NonFiniteValues(LrmmError, FloatingPointError):
    """A tensor operation produced or received NaN/Inf."""


class TrainingDiverged(LrmmError, RuntimeError):
    """Optimization produced non-finite gradients or values."""


class FormatError(LrmmError, ValueError):
    """A file does not conform to its declared binary or text format."""


class MissingEntity(LrmmError, KeyError):
    """A lookup referenced a user or item the corpus does not contain."""


class DegenerateSample(LrmmError, ValueError):
    """A sample ended up with no usable modality at all."""


class EmptyModalityError(LrmmError, ValueError):
    """An encoder was handed an empty document; the caller should impute instead."""
