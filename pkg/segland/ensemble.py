"""Multiple base learners and probability-average fusion."""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict

from segland.checkpoint import network_from_checkpoint, save_checkpoint
from segland.core import (
    ArchConfig,
    Checkpoint,
    ClassTaxonomy,
    LabelMap,
    ProbabilityMap,
    Tile,
    canonical_json,
)
from segland.data import TileSet
from segland.errors import (
    BadValueError,
    EmptyListError,
    MissingArtifactError,
    ShapeError,
    UnknownArchError,
)
from segland.model import images_to_tensor, predict
from segland.training import TrainConfig, train_base_phase

logger = logging.getLogger(__name__)

ARCH_REGISTRY: Dict[str, ArchConfig] = {
    "reference-s": ArchConfig(widths=(16, 32, 64, 128), fpn_dim=32, ppm_dim=16),
    "reference-m": ArchConfig(),
    "reference-l": ArchConfig(widths=(48, 96, 192, 384), fpn_dim=96, ppm_dim=48),
    "reference-m-upernet": ArchConfig(decoder="upernet"),
    "reference-m-fpn": ArchConfig(decoder="fpn"),
}


def resolve_arch(arch_id: str) -> ArchConfig:
    if arch_id not in ARCH_REGISTRY:
        raise UnknownArchError(f"Unknown architecture '{arch_id}'. Available: {sorted(ARCH_REGISTRY)}")
    return ARCH_REGISTRY[arch_id]


class LearnerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    arch_id: str
    config: TrainConfig
    checkpoint_path: Optional[str] = None

    @property
    def key(self) -> Tuple[str, int]:
        return self.arch_id, self.config.seed

    @property
    def name(self) -> str:
        return f"{self.arch_id}-s{self.config.seed}"


def check_learners(specs: Sequence[LearnerSpec]) -> None:
    """Every learner must use a registered arch and a distinct (arch, seed) pair"""
    seen = set()
    for spec in specs:
        resolve_arch(spec.arch_id)
        if spec.key in seen:
            raise BadValueError(f"Learner {spec.name} appears twice in the ensemble")
        seen.add(spec.key)


def train_base_learner(spec: LearnerSpec, train_set: TileSet, taxonomy: ClassTaxonomy) -> Checkpoint:
    arch = resolve_arch(spec.arch_id)
    logger.info(f"Training base learner {spec.name}")
    ckpt = train_base_phase(train_set, taxonomy, spec.config, arch=arch)
    if spec.checkpoint_path:
        save_checkpoint(ckpt, spec.checkpoint_path)
    return ckpt


def average_fusion(maps: Sequence[ProbabilityMap]) -> ProbabilityMap:
    """Unweighted per-pixel mean of the learners' class probabilities"""
    if not maps:
        raise EmptyListError("Nothing to fuse")
    shape = maps[0].probs.shape
    for m in maps[1:]:
        if m.probs.shape != shape:
            raise ShapeError(f"Probability maps disagree in shape: {shape} vs {m.probs.shape}")
    mean = np.mean(np.stack([m.probs.astype(np.float64) for m in maps]), axis=0)
    return ProbabilityMap(probs=mean.astype(np.float32))


def labels_from_probs(pmap: ProbabilityMap) -> LabelMap:
    """Arg-max class per pixel; ties go to the lowest id"""
    return LabelMap(labels=np.argmax(pmap.probs, axis=2).astype(np.uint8))


def predict_tiles(
    checkpoints: Sequence[Checkpoint], tiles: Union[TileSet, List[Tile]]
) -> Dict[str, Tuple[ProbabilityMap, LabelMap]]:
    """Run every checkpoint on every tile and fuse; one checkpoint is the N = 1 case"""
    if not checkpoints:
        raise EmptyListError("No checkpoints to predict with")
    k = checkpoints[0].taxonomy.num_classes
    for ckpt in checkpoints[1:]:
        if ckpt.taxonomy.num_classes != k:
            raise ShapeError("Checkpoints in one ensemble must share a taxonomy")

    networks = [network_from_checkpoint(c) for c in checkpoints]
    results = {}
    with torch.no_grad():
        for tile in tiles:
            x = images_to_tensor(tile.image)
            maps = [predict(net(x))[0] for net in networks]
            fused = maps[0] if len(maps) == 1 else average_fusion(maps)
            results[tile.id] = (fused, labels_from_probs(fused))
    logger.info(f"Predicted {len(results)} tiles with {len(networks)} network(s)")
    return results


def save_probability_map(pmap: ProbabilityMap, path: Union[str, Path], taxonomy: ClassTaxonomy) -> Path:
    """`.npy` float32 in K x H x W layout plus a `.json` sidecar naming the taxonomy"""
    path = Path(path).with_suffix(".npy")
    path.parent.mkdir(parents=True, exist_ok=True)
    planar = np.ascontiguousarray(pmap.probs.transpose(2, 0, 1), dtype="<f4")
    np.save(path, planar, allow_pickle=False)
    sidecar = {
        "layout": "KHW",
        "shape": list(planar.shape),
        "taxonomy": taxonomy.model_dump(mode="json"),
        "taxonomy_digest": taxonomy.digest(),
    }
    path.with_suffix(".json").write_text(canonical_json(sidecar) + "\n", encoding="utf-8")
    return path


def load_probability_map(path: Union[str, Path]) -> Tuple[ProbabilityMap, ClassTaxonomy]:
    path = Path(path).with_suffix(".npy")
    sidecar_path = path.with_suffix(".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise MissingArtifactError(f"Probability map {path} or its sidecar is missing")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    planar = np.load(path, allow_pickle=False)
    return ProbabilityMap(probs=planar.transpose(1, 2, 0).astype(np.float32)), ClassTaxonomy.model_validate(
        sidecar["taxonomy"]
    )
