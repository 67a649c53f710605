"""Two-phase training: base-class learning, then novel-class updating.

Phase 1 trains encoder, decoder and the background/base prototype rows.
Phase 2 keeps the extractor and base rows fixed, appends one row per novel
class and trains only the background and novel rows, with support-background
pixels ignored.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, field_validator
from torch.utils.data import DataLoader, Dataset

from segland.checkpoint import checkpoint_from_network, network_from_checkpoint
from segland.config import get_settings, load_config
from segland.core import (
    IGNORE_ID,
    ArchConfig,
    Checkpoint,
    ClassTaxonomy,
    PrototypeBank,
    Tile,
    TrainingPhase,
    digest_of,
    validate_taxonomy,
)
from segland.data import (
    FrequencyTable,
    Placement,
    TileSet,
    WeightMode,
    WeightVector,
    augment_geometric,
    compute_class_frequencies,
    compute_class_weights,
    novel_cutmix,
)
from segland.errors import (
    AllIgnoredError,
    EmptyDatasetError,
    EmptySupportError,
    IgnoreInSupportError,
    NovelIdInBaseSetError,
    PhaseError,
    ShapeError,
    UnknownNovelIdError,
)
from segland.model import (
    PrototypeHead,
    SegmentationNetwork,
    images_to_tensor,
    init_novel_prototypes,
    initial_prototypes,
    orthogonality_loss,
)

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    ortho_weight: float = Field(1.0, ge=0, description="Lambda of the orthogonality loss")
    weight_mode: WeightMode = WeightMode.INVERSE_SQRT
    seed: int = 0
    crop: int = Field(64, ge=32)
    flip_prob: float = Field(0.5, ge=0, le=1)
    cutmix_copies: int = Field(4, ge=0, description="NovelCutMix samples per support tile")
    placement: Placement = Placement.ALIGNED

    @field_validator("crop")
    @classmethod
    def _crop_multiple_of_32(cls, value: int) -> int:
        if value % 32:
            raise ValueError("crop must be a multiple of 32")
        return value

    @classmethod
    def novel_defaults(cls, **overrides) -> "TrainConfig":
        """Defaults for the short support-set phase"""
        return load_config(None, cls, **{"epochs": 100, "learning_rate": 0.01, **overrides})

    def digest(self) -> str:
        return digest_of(self)


def load_train_config(path: Union[str, Path, None], **overrides) -> TrainConfig:
    return load_config(path, TrainConfig, **overrides)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def segmentation_loss(
    logits: torch.Tensor,
    truth: torch.Tensor,
    weights: Optional[torch.Tensor] = None,
    ignore: int = IGNORE_ID,
) -> torch.Tensor:
    """Class-weighted cross entropy averaged over non-ignore pixels"""
    if logits.shape[0] != truth.shape[0] or logits.shape[2:] != truth.shape[1:]:
        raise ShapeError(f"Logits {tuple(logits.shape)} and truth {tuple(truth.shape)} disagree")
    truth = truth.long()
    valid = truth != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise AllIgnoredError("Every pixel carries the ignore label")

    ce = F.cross_entropy(logits, truth, reduction="none", ignore_index=ignore)
    if weights is None:
        weights = torch.ones(logits.shape[1], dtype=logits.dtype, device=logits.device)
    per_pixel = weights.to(logits.dtype)[torch.where(valid, truth, torch.zeros_like(truth))]
    return (ce * per_pixel * valid).sum() / n_valid


def class_weight_tensor(weights: Optional[WeightVector], num_classes: int) -> torch.Tensor:
    if weights is None:
        return torch.ones(num_classes)
    return torch.from_numpy(weights.as_array(num_classes)).float()


# ---------------------------------------------------------------------------
# Sample streams
# ---------------------------------------------------------------------------

def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample)"""
    return np.random.default_rng([seed, epoch, index])


def effective_crop(tiles: List[Tile], crop: int) -> int:
    smallest = min(min(t.size) for t in tiles)
    size = min(crop, smallest) // 32 * 32
    if size < 32:
        raise ShapeError(f"Tiles of {smallest} px are too small for a 32-multiple crop")
    return size


def _to_sample(tile: Tile, ignore_background: bool):
    label = tile.label.astype(np.int64)
    if ignore_background:
        label = np.where(label == 0, IGNORE_ID, label)
    return images_to_tensor(tile.image)[0], torch.from_numpy(label)


class BaseTileDataset(Dataset):
    """Augmented base training tiles"""

    def __init__(self, tiles: List[Tile], config: TrainConfig, crop: int):
        self.tiles = tiles
        self.config = config
        self.crop = crop
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.tiles)

    def __getitem__(self, index: int):
        rng = sample_rng(self.config.seed, self.epoch, index)
        tile = augment_geometric(self.tiles[index], rng, self.crop, self.config.flip_prob)
        return _to_sample(tile, ignore_background=False)


def mixed_target(mixed_label: np.ndarray, train_label: np.ndarray) -> np.ndarray:
    """Pasted novel pixels keep their class; every other pixel keeps the base tile's label"""
    return np.where(mixed_label > 0, mixed_label, train_label).astype(np.uint8)


class SupportDataset(Dataset):
    """Support tiles followed by NovelCutMix samples.

    Support-background pixels are ignored. Outside the pasted regions a mixed
    sample shows a base tile, so those pixels are supervised with that tile's
    background/base labels.
    """

    def __init__(self, support: List[Tile], base_tiles: List[Tile], config: TrainConfig, crop: int):
        self.support = support
        self.config = config
        self.crop = crop
        self.epoch = 0
        self.mixers: Dict[Tuple[int, int], List[Tile]] = {}
        for tile in base_tiles:
            self.mixers.setdefault(tile.size, []).append(tile)
        self.copies = config.cutmix_copies if base_tiles else 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.support) * (1 + self.copies)

    def __getitem__(self, index: int):
        rng = sample_rng(self.config.seed, self.epoch, index)
        if index < len(self.support):
            return self._sample(self.support[index], rng, ignore_background=True)

        source = self.support[(index - len(self.support)) // self.copies]
        candidates = self.mixers.get(source.size)
        if not candidates:
            return self._sample(source, rng, ignore_background=True)
        train = candidates[int(rng.integers(len(candidates)))]
        mixed = novel_cutmix(train, source, self.config.placement, rng)
        tile = Tile(id=mixed.id, image=mixed.image, label=mixed_target(mixed.label, train.label))
        return self._sample(tile, rng, ignore_background=False)

    def _sample(self, tile: Tile, rng: np.random.Generator, ignore_background: bool):
        tile = augment_geometric(tile, rng, self.crop, self.config.flip_prob)
        return _to_sample(tile, ignore_background)


def _loader(dataset: Dataset, config: TrainConfig) -> DataLoader:
    generator = torch.Generator().manual_seed(config.seed)
    return DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=get_settings().num_workers,
    )


def _seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return torch.Generator().manual_seed(seed)


def _run_epochs(network, loader, dataset, parameters, weights, config: TrainConfig, phase: str) -> None:
    optimizer = torch.optim.SGD(
        parameters, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )
    total_steps = max(1, config.epochs * len(loader))
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)
    device = torch.device(get_settings().device)
    network.to(device)
    weights = weights.to(device) if weights is not None else None

    for epoch in range(config.epochs):
        dataset.set_epoch(epoch)
        running, steps = 0.0, 0
        for images, labels in loader:
            images, labels = images.to(device), labels.to(device)
            logits = network(images)
            try:
                loss = segmentation_loss(logits, labels, weights)
            except AllIgnoredError:
                # crop missed every labeled pixel; the scheduler still advances
                scheduler.step()
                continue
            if config.ortho_weight > 0:
                loss = loss + config.ortho_weight * orthogonality_loss(network.head.prototypes())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            running += float(loss.detach())
            steps += 1
        if steps:
            logger.info(f"[{phase}] epoch {epoch + 1}/{config.epochs} loss {running / steps:.4f}")
        else:
            logger.warning(f"[{phase}] epoch {epoch + 1}/{config.epochs} had no labeled pixels")
    network.to("cpu")


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def train_base_phase(
    train_set: TileSet,
    taxonomy: ClassTaxonomy,
    config: TrainConfig,
    arch: Optional[ArchConfig] = None,
    weights: Optional[WeightVector] = None,
) -> Checkpoint:
    """Phase 1: learn extractor plus background and base prototypes"""
    validate_taxonomy(taxonomy)
    base = taxonomy.base_view()
    arch = arch or ArchConfig()
    if len(train_set) == 0:
        raise EmptyDatasetError("Base training set is empty")

    allowed = set(base.all_ids) | {IGNORE_ID}
    for tile in train_set:
        foreign = set(np.unique(tile.label).tolist()) - allowed
        if foreign:
            raise NovelIdInBaseSetError(f"Tile {tile.id} carries non-base ids {sorted(foreign)}")

    if weights is None:
        weights = compute_class_weights(compute_class_frequencies(train_set, base), config.weight_mode)
    weight_tensor = class_weight_tensor(weights, base.num_classes)

    generator = _seed_everything(config.seed)
    bank = PrototypeBank(
        prototypes=initial_prototypes(base.num_classes, arch.embed_dim, generator),
        frozen_mask=[False] * base.num_classes,
        temperature=arch.temperature,
    )
    network = SegmentationNetwork(arch, bank, base.num_base_rows)
    network.train()

    crop = effective_crop(train_set.tiles, config.crop)
    dataset = BaseTileDataset(train_set.tiles, config, crop)
    logger.info(f"Phase 1: {len(train_set)} tiles, {base.num_classes} classes, crop {crop}, {config.epochs} epochs")
    _run_epochs(network, _loader(dataset, config), dataset, list(network.parameters()), weight_tensor, config, "base")

    network.eval()
    return checkpoint_from_network(network, base, config.digest(), TrainingPhase.BASE)


def _check_support(support: TileSet, taxonomy: ClassTaxonomy) -> None:
    allowed = {taxonomy.background_id, IGNORE_ID} | set(taxonomy.novel_ids)
    for tile in support:
        foreign = set(np.unique(tile.label).tolist()) - allowed
        if foreign:
            raise UnknownNovelIdError(f"Support tile {tile.id} carries ids {sorted(foreign)} outside the novel set")


def _histogram(label: np.ndarray) -> np.ndarray:
    return np.bincount(label.ravel(), minlength=IGNORE_ID + 1)[: IGNORE_ID + 1].astype(np.float64)


def novel_phase_weights(
    support: TileSet,
    mixers: List[Tile],
    taxonomy: ClassTaxonomy,
    config: TrainConfig,
) -> Optional[WeightVector]:
    """Class-balanced weights over the pixels phase 2 supervises.

    Every support tile feeds its novel pixels once plus once per NovelCutMix
    copy; each copy also brings the mean background/base histogram of the
    base tiles it is mixed onto.
    """
    copies = config.cutmix_copies if mixers else 0
    novel = list(taxonomy.novel_ids)
    counts = np.zeros(IGNORE_ID + 1, dtype=np.float64)
    for tile in support:
        counts[novel] += _histogram(tile.label)[novel] * (1 + copies)
    if copies:
        base = [taxonomy.background_id] + list(taxonomy.base_ids)
        mean = sum(_histogram(t.label) for t in mixers) / len(mixers)
        counts[base] += mean[base] * copies * len(support)

    present = np.flatnonzero(counts)
    if present.size == 0:
        return None
    total = counts.sum()
    table = FrequencyTable(
        pixel_counts={int(i): int(round(counts[i])) for i in present},
        frequencies={int(i): float(counts[i] / total) for i in present},
    )
    return compute_class_weights(table, config.weight_mode)


def _support_features(network: SegmentationNetwork, support: TileSet) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pixel features (M x D) and labels (M) of every support tile, each cropped to a 32-multiple"""
    features, labels = [], []
    with torch.no_grad():
        for tile in support:
            h, w = (side // 32 * 32 for side in tile.size)
            fmap = network.features(images_to_tensor(tile.image[:h, :w]))[0]
            features.append(fmap.reshape(fmap.shape[0], -1).t())
            labels.append(torch.from_numpy(tile.label[:h, :w].astype(np.int64)).reshape(-1))
    return torch.cat(features), torch.cat(labels)


def _mixers(base_tiles: Optional[TileSet], support: TileSet, taxonomy: ClassTaxonomy) -> List[Tile]:
    """Base tiles that share a size with some support tile"""
    if base_tiles is None or len(base_tiles) == 0:
        return []
    allowed = {taxonomy.background_id, IGNORE_ID} | set(taxonomy.base_ids)
    sizes = {t.size for t in support}
    mixers = []
    for tile in base_tiles:
        foreign = set(np.unique(tile.label).tolist()) - allowed
        if foreign:
            raise NovelIdInBaseSetError(f"Base tile {tile.id} carries non-base ids {sorted(foreign)}")
        if tile.size in sizes:
            mixers.append(tile)
    if len(mixers) < len(base_tiles):
        logger.warning(f"NovelCutMix: skipped {len(base_tiles) - len(mixers)} base tiles of an unmatched size")
    return mixers


def update_novel_phase(
    base_ckpt: Checkpoint,
    support: TileSet,
    taxonomy: ClassTaxonomy,
    config: TrainConfig,
    base_tiles: Optional[TileSet] = None,
) -> Checkpoint:
    """Phase 2: append and train novel prototypes on a frozen extractor"""
    if base_ckpt.phase != TrainingPhase.BASE:
        raise PhaseError(f"Novel updating needs a base checkpoint, got phase '{base_ckpt.phase.value}'")
    validate_taxonomy(taxonomy)
    if list(taxonomy.base_ids) != list(base_ckpt.taxonomy.base_ids):
        raise PhaseError("Taxonomy base classes differ from the checkpoint's")
    if not taxonomy.novel_ids:
        raise UnknownNovelIdError("Taxonomy lists no novel classes to learn")
    if len(support) == 0:
        raise EmptySupportError("Support set is empty")
    _check_support(support, taxonomy)

    generator = _seed_everything(config.seed)
    network = network_from_checkpoint(base_ckpt)
    for p in list(network.encoder.parameters()) + list(network.decoder.parameters()):
        p.requires_grad_(False)
    crop = effective_crop(support.tiles, config.crop)

    base_rows = base_ckpt.bank.prototypes[1: base_ckpt.taxonomy.num_base_rows]
    novel_rows = init_novel_prototypes(
        *_support_features(network, support), base_rows, taxonomy.novel_ids, generator
    )

    frozen = [False] + [True] * len(taxonomy.base_ids)
    bank = PrototypeBank(
        prototypes=base_ckpt.bank.prototypes.clone(), frozen_mask=frozen, temperature=base_ckpt.bank.temperature
    ).append(novel_rows, frozen=False)
    network.head = PrototypeHead(bank, taxonomy.num_base_rows)

    mixers = _mixers(base_tiles, support, taxonomy) if config.cutmix_copies else []
    if not mixers:
        logger.warning("Phase 2 without base tiles: only novel pixels are supervised")
    if mixers and any(np.any(t.label == IGNORE_ID) for t in support):
        raise IgnoreInSupportError("NovelCutMix needs support labels without ignore pixels")

    weights = class_weight_tensor(novel_phase_weights(support, mixers, taxonomy, config), taxonomy.num_classes)
    dataset = SupportDataset(support.tiles, mixers, config, crop)
    logger.info(
        f"Phase 2: {len(support)} support tiles, {len(dataset) - len(support)} NovelCutMix samples, "
        f"{len(taxonomy.novel_ids)} novel classes, {config.epochs} epochs"
    )

    # Encoder/decoder stay in eval mode so BN statistics are untouched
    network.head.train()
    _run_epochs(network, _loader(dataset, config), dataset, [network.head.trainable_rows], weights, config, "novel")

    network.eval()
    return checkpoint_from_network(
        network, taxonomy, config.digest(), TrainingPhase.NOVEL, parent_digest=base_ckpt.config_digest
    )
