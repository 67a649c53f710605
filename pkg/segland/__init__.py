"""Generalized few-shot land-cover segmentation toolkit."""
from segland.core import (
    ArchConfig,
    Checkpoint,
    ClassTaxonomy,
    LabelMap,
    ProbabilityMap,
    PrototypeBank,
    Tile,
    validate_taxonomy,
)
from segland.errors import SegLandError

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "Checkpoint",
    "ClassTaxonomy",
    "LabelMap",
    "ProbabilityMap",
    "PrototypeBank",
    "SegLandError",
    "Tile",
    "validate_taxonomy",
]
