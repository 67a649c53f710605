"""Ultimate fusion of the ensemble base map with the POP label map.

The ensemble decides every background/base pixel. Novel regions predicted by
the POP network survive only after opening and an area filter, and are then
closed to fill small holes.
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from segland.config import load_config
from segland.core import ClassTaxonomy, LabelMap
from segland.errors import ForeignIdError, ShapeError

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class FusionMode(str, Enum):
    REPLACE_BASE = "replace-base"
    INTERSECT_BASE = "intersect-base"


class FusionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kernel: int = Field(3, ge=1)
    min_region: int = Field(16, ge=0)
    mode: FusionMode = FusionMode.REPLACE_BASE

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel must be odd")
        return value


def load_fusion_config(path: Union[str, Path, None], mode: Optional[str] = None) -> FusionConfig:
    return load_config(path, FusionConfig, mode=mode or None)


def _square(kernel: int) -> np.ndarray:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    return np.ones((kernel, kernel), dtype=bool)


def morphological_open(mask: np.ndarray, kernel: int) -> np.ndarray:
    """Erosion then dilation with a square element; outside the tile counts as empty"""
    return ndimage.binary_opening(mask.astype(bool), structure=_square(kernel), border_value=0)


def morphological_close(mask: np.ndarray, kernel: int) -> np.ndarray:
    """Dilation then erosion with a square element; outside the tile counts as empty"""
    structure = _square(kernel)
    pad = kernel // 2
    padded = np.pad(mask.astype(bool), pad, mode="constant", constant_values=False)
    closed = ndimage.binary_closing(padded, structure=structure, border_value=0)
    return closed[pad: pad + mask.shape[0], pad: pad + mask.shape[1]]


def remove_small_regions(mask: np.ndarray, min_region: int) -> np.ndarray:
    """Drop 4-connected components smaller than min_region pixels"""
    if min_region <= 1 or not mask.any():
        return mask.astype(bool)
    components, _ = ndimage.label(mask, structure=FOUR_CONNECTED)
    sizes = np.bincount(components.ravel())
    keep = sizes >= min_region
    keep[0] = False
    return keep[components]


def ultimate_fuse(
    ensemble_map: LabelMap,
    pop_labels: LabelMap,
    taxonomy: ClassTaxonomy,
    config: Optional[FusionConfig] = None,
) -> LabelMap:
    config = config or FusionConfig()
    ens, pop = ensemble_map.labels, pop_labels.labels
    if ens.shape != pop.shape:
        raise ShapeError(f"Ensemble map {ens.shape} and POP map {pop.shape} differ in size")

    base_ids = [taxonomy.background_id] + list(taxonomy.base_ids)
    foreign = np.setdiff1d(np.unique(ens), base_ids)
    if foreign.size:
        raise ForeignIdError(f"Ensemble map carries non-base ids {foreign.tolist()}")
    foreign = np.setdiff1d(np.unique(pop), taxonomy.all_ids)
    if foreign.size:
        raise ForeignIdError(f"POP map carries ids {foreign.tolist()} outside the taxonomy")

    if config.mode == FusionMode.INTERSECT_BASE:
        agree = pop == ens
        out = np.where(agree, pop, ens).astype(np.uint8)
    else:
        out = ens.astype(np.uint8).copy()

    kept: Dict[int, np.ndarray] = {}
    for class_id in taxonomy.novel_ids:
        mask = pop == class_id
        if not mask.any():
            continue
        mask = remove_small_regions(morphological_open(mask, config.kernel), config.min_region)
        if mask.any():
            kept[class_id] = mask

    claimed = np.zeros(ens.shape, dtype=bool)
    for class_id, mask in kept.items():
        others = np.zeros(ens.shape, dtype=bool)
        for other_id, other in kept.items():
            if other_id != class_id:
                others |= other
        region = morphological_close(mask, config.kernel) & ~others & ~claimed
        out[region] = class_id
        claimed |= region

    n_pruned = int(np.isin(pop, taxonomy.novel_ids).sum() - sum(int(m.sum()) for m in kept.values()))
    logger.debug(f"Fusion kept {len(kept)} novel classes, pruned {max(n_pruned, 0)} novel pixels")
    return LabelMap(labels=out)
