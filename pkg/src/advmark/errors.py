"""Exception types raised across the pipeline."""


class AdvmarkError(Exception):
    """Base class for all package errors."""


# geometry
class DuplicatePoints(AdvmarkError, ValueError):
    pass


class InvalidCount(AdvmarkError, ValueError):
    pass


class EmptyMask(AdvmarkError):
    pass


# labels / phantom / data
class InvalidSigma(AdvmarkError, ValueError):
    pass


class SpecOutOfBounds(AdvmarkError, ValueError):
    pass


class DegenerateImage(AdvmarkError, ValueError):
    pass


class OverlapError(AdvmarkError, ValueError):
    pass


class CoverageError(AdvmarkError, ValueError):
    pass


class ManifestError(AdvmarkError, ValueError):
    pass


# networks / losses
class ShapeError(AdvmarkError, ValueError):
    pass


class ShapeMismatch(AdvmarkError, ValueError):
    pass


class DomainError(AdvmarkError, ValueError):
    pass


class CheckpointError(AdvmarkError):
    pass


# training / evaluation
class NonFiniteLoss(AdvmarkError, FloatingPointError):
    def __init__(self, step, terms):
        self.step = step
        self.terms = dict(terms)
        super().__init__(f"non-finite loss at step {step}: {self.terms}")


class AlternationViolation(AdvmarkError, RuntimeError):
    """A frozen network's parameters changed during the other network's step."""


class EmptySplit(AdvmarkError, ValueError):
    pass


class ConfigError(AdvmarkError, ValueError):
    pass


class GridMismatch(AdvmarkError, ValueError):
    pass


class CountMismatch(AdvmarkError, ValueError):
    pass


class ShortSweep(UserWarning):
    """Warning category for sweeps with fewer than two frames."""
