"""Domain types shared by every stage of the pipeline.

All types are pydantic models frozen after construction. Raster payloads are
numpy arrays in H x W (x C) layout; prototype rows are torch tensors because
they feed the network directly.
"""
import json
import hashlib
import logging
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from segland.errors import (
    BackgroundError,
    GapError,
    OverlapError,
    PhaseError,
    ShapeError,
    BadValueError,
)

logger = logging.getLogger(__name__)

IGNORE_ID = 255
BACKGROUND_ID = 0
SIMPLEX_TOLERANCE = 1e-5


def canonical_json(payload: Any) -> str:
    """Stable JSON text: sorted keys, no whitespace"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest_of(model: BaseModel) -> str:
    """SHA-256 of a model's canonical JSON serialization"""
    text = canonical_json(model.model_dump(mode="json"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class TaxonomyPhase(str, Enum):
    BASE_ONLY = "base-only"
    PHASE1 = "phase1"
    PHASE2 = "phase2"


class TrainingPhase(str, Enum):
    BASE = "base"
    NOVEL = "novel"


class Tile(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str
    image: np.ndarray
    label: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check_shapes(self) -> "Tile":
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ShapeError(f"Tile {self.id}: image must be HxWx3 uint8, got {self.image.shape} {self.image.dtype}")
        if self.label is not None:
            if self.label.shape != self.image.shape[:2]:
                raise ShapeError(f"Tile {self.id}: label {self.label.shape} does not match image {self.image.shape[:2]}")
        return self

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


class ClassTaxonomy(BaseModel):
    model_config = ConfigDict(frozen=True)

    background_id: int = BACKGROUND_ID
    base_ids: List[int]
    novel_ids: List[int] = Field(default_factory=list)
    names: Dict[int, str] = Field(default_factory=dict)
    phase: TaxonomyPhase = TaxonomyPhase.BASE_ONLY

    @property
    def num_classes(self) -> int:
        return 1 + len(self.base_ids) + len(self.novel_ids)

    @property
    def num_base_rows(self) -> int:
        """Background plus base classes"""
        return 1 + len(self.base_ids)

    @property
    def all_ids(self) -> List[int]:
        return [self.background_id] + list(self.base_ids) + list(self.novel_ids)

    def name_of(self, class_id: int) -> str:
        return self.names.get(class_id, f"class_{class_id}")

    def is_novel(self, class_id: int) -> bool:
        return class_id in self.novel_ids

    def base_view(self) -> "ClassTaxonomy":
        """The base-only taxonomy this one extends"""
        names = {k: v for k, v in self.names.items() if k == self.background_id or k in self.base_ids}
        return ClassTaxonomy(
            background_id=self.background_id,
            base_ids=list(self.base_ids),
            novel_ids=[],
            names=names,
            phase=TaxonomyPhase.BASE_ONLY,
        )

    def digest(self) -> str:
        return digest_of(self)


def validate_taxonomy(taxonomy: ClassTaxonomy) -> None:
    """Raise if the taxonomy breaks the id layout rules, return silently otherwise"""
    base, novel = list(taxonomy.base_ids), list(taxonomy.novel_ids)

    overlap = set(base) & set(novel)
    if overlap:
        raise OverlapError(f"Base and novel ids intersect: {sorted(overlap)}")

    if taxonomy.background_id != BACKGROUND_ID:
        raise BackgroundError(f"Background id must be {BACKGROUND_ID}, got {taxonomy.background_id}")
    if taxonomy.background_id in base or taxonomy.background_id in novel:
        raise BackgroundError(f"Background id {taxonomy.background_id} reused as a class id")

    if base != list(range(1, len(base) + 1)):
        raise GapError(f"Base ids must be contiguous from 1, got {base}")
    first_novel = len(base) + 1
    if novel != list(range(first_novel, first_novel + len(novel))):
        raise GapError(f"Novel ids must follow base ids contiguously from {first_novel}, got {novel}")
    if max(taxonomy.all_ids) >= IGNORE_ID:
        raise GapError(f"Class ids must stay below the ignore value {IGNORE_ID}")

    if taxonomy.phase == TaxonomyPhase.BASE_ONLY and novel:
        raise PhaseError("A base-only taxonomy cannot list novel ids")


class ArchConfig(BaseModel):
    """Shape of a segmentation network; enough to rebuild it from a checkpoint"""
    model_config = ConfigDict(frozen=True)

    encoder: str = "reference"
    widths: Tuple[int, int, int, int] = (32, 64, 128, 256)
    decoder: str = "upernetplus"
    fpn_dim: int = Field(64, ge=1)
    ppm_dim: int = Field(32, ge=1)
    embed_dim: int = Field(64, ge=1)
    temperature: float = Field(0.1, gt=0)


class PrototypeBank(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    prototypes: torch.Tensor
    frozen_mask: List[bool]
    temperature: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _check_rows(self) -> "PrototypeBank":
        if self.prototypes.ndim != 2:
            raise ShapeError(f"Prototype bank must be K x D, got {tuple(self.prototypes.shape)}")
        if len(self.frozen_mask) != self.prototypes.shape[0]:
            raise ShapeError(f"frozen_mask has {len(self.frozen_mask)} entries for {self.prototypes.shape[0]} rows")
        if not bool(torch.isfinite(self.prototypes).all()):
            raise BadValueError("Prototype bank contains non-finite entries")
        return self

    @property
    def num_classes(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.prototypes.shape[1])

    def append(self, rows: torch.Tensor, frozen: bool = False) -> "PrototypeBank":
        """New bank with rows appended after the existing ones"""
        rows = rows.detach().to(self.prototypes.dtype)
        return PrototypeBank(
            prototypes=torch.cat([self.prototypes.detach(), rows], dim=0),
            frozen_mask=list(self.frozen_mask) + [frozen] * rows.shape[0],
            temperature=self.temperature,
        )


class ProbabilityMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    probs: np.ndarray

    @model_validator(mode="after")
    def _check_simplex(self) -> "ProbabilityMap":
        if self.probs.ndim != 3:
            raise ShapeError(f"Probability map must be H x W x K, got {self.probs.shape}")
        if self.probs.size:
            if self.probs.min() < 0 or self.probs.max() > 1 + SIMPLEX_TOLERANCE:
                raise BadValueError("Probabilities must lie in [0, 1]")
            drift = np.abs(self.probs.sum(axis=2, dtype=np.float64) - 1.0).max()
            if drift > SIMPLEX_TOLERANCE:
                raise BadValueError(f"Per-pixel probabilities do not sum to 1 (max drift {drift:.2e})")
        return self

    @property
    def num_classes(self) -> int:
        return int(self.probs.shape[2])


class LabelMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    labels: np.ndarray

    @model_validator(mode="after")
    def _check_labels(self) -> "LabelMap":
        if self.labels.ndim != 2:
            raise ShapeError(f"Label map must be H x W, got {self.labels.shape}")
        return self

    def check_ids(self, taxonomy: ClassTaxonomy) -> None:
        """Raise BadValueError on ids outside the taxonomy (ignore value allowed)"""
        allowed = np.array(taxonomy.all_ids + [IGNORE_ID])
        bad = np.setdiff1d(np.unique(self.labels), allowed)
        if bad.size:
            raise BadValueError(f"Label ids {bad.tolist()} are not in the taxonomy")


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    encoder_params: Dict[str, np.ndarray]
    decoder_params: Dict[str, np.ndarray]
    bank: PrototypeBank
    taxonomy: ClassTaxonomy
    arch: ArchConfig
    config_digest: str
    phase: TrainingPhase
    parent_digest: Optional[str] = None
