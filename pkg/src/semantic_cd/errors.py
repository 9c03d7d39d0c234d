"""Exception and warning types raised across the package."""


class SemanticCDError(Exception):
    """Base class for package errors."""


class ShapeMismatch(SemanticCDError, ValueError):
    pass


class ShapeError(ShapeMismatch):
    """Image dimensions are not divisible by the patch size."""


class GridMismatch(ShapeMismatch):
    pass


class LevelMismatch(ShapeMismatch):
    pass


class WidthMismatch(ShapeMismatch):
    pass


# data
class MissingDirectory(SemanticCDError, FileNotFoundError):
    pass


class EmptyDataset(SemanticCDError):
    pass


class LabelOutOfRange(SemanticCDError, ValueError):
    pass


class DecodeError(SemanticCDError):
    pass


# model
class CheckpointMismatch(SemanticCDError):
    pass


class NonFiniteInput(SemanticCDError, ValueError):
    pass


class SequenceTooLong(SemanticCDError, ValueError):
    pass


# training
class NonBinaryTarget(SemanticCDError, ValueError):
    pass


class FrozenParameterDrift(SemanticCDError):
    pass


class DivergedLoss(SemanticCDError, FloatingPointError):
    pass


class VersionMismatch(SemanticCDError):
    pass


class CorruptFile(SemanticCDError):
    pass


# metrics
class EmptyMatrix(SemanticCDError, ValueError):
    pass


class AllPixelsIgnored(UserWarning):
    """Every pixel of a semantic loss carried the ignore label; loss set to 0."""


class DegenerateMatrix(UserWarning):
    """The confusion matrix without the no-change/no-change cell is empty; SeK set to 0."""
