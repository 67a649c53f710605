class SegLandError(Exception):
    """Base class for every error raised by the toolkit"""


# Taxonomy
class TaxonomyError(SegLandError):
    pass


class OverlapError(TaxonomyError):
    pass


class GapError(TaxonomyError):
    pass


class BackgroundError(TaxonomyError):
    pass


class PhaseError(TaxonomyError):
    pass


# Data
class DataError(SegLandError):
    pass


class PathError(DataError):
    pass


class MissingLabelError(DataError):
    pass


class BadValueError(DataError):
    pass


class ShapeError(DataError):
    pass


class EmptyError(DataError):
    pass


class ZeroFrequencyError(DataError):
    pass


class CropTooLargeError(DataError):
    pass


class IgnoreInSupportError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


# Model
class ModelError(SegLandError):
    pass


class DimensionMismatchError(ModelError):
    pass


class DegenerateBasisError(ModelError):
    pass


class DegenerateError(ModelError):
    pass


class UnknownArchError(ModelError):
    pass


# Training
class TrainingError(SegLandError):
    pass


class AllIgnoredError(TrainingError):
    pass


class NovelIdInBaseSetError(TrainingError):
    pass


class UnknownNovelIdError(TrainingError):
    pass


class EmptySupportError(TrainingError):
    pass


# Ensemble / fusion
class FusionError(SegLandError):
    pass


class EmptyListError(FusionError):
    pass


class ForeignIdError(FusionError):
    pass


# Evaluation
class EvaluationError(SegLandError):
    pass


class BadIdError(EvaluationError):
    pass


class NoDefinedIoUError(EvaluationError):
    pass


class RangeError(EvaluationError):
    pass


# Artifacts
class ArtifactError(SegLandError):
    pass


class DigestMismatchError(ArtifactError):
    pass


class MissingArtifactError(ArtifactError):
    pass


# Configuration
class ConfigError(SegLandError):
    pass
