"""Dataset ingestion, class-frequency analysis, class-balanced weights and augmentation.

Every random operation takes an explicit ``numpy.random.Generator`` so callers
can hand each sample its own seed-derived stream and replay it exactly.
"""
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, model_validator

from segland.core import IGNORE_ID, ClassTaxonomy, LabelMap, Tile
from segland.errors import (
    BadValueError,
    CropTooLargeError,
    EmptyDatasetError,
    EmptyError,
    IgnoreInSupportError,
    MissingLabelError,
    PathError,
    ShapeError,
    ZeroFrequencyError,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class Split(str, Enum):
    BASE_TRAIN = "base-train"
    SUPPORT = "support"
    QUERY = "query"
    TEST = "test"


class WeightMode(str, Enum):
    INVERSE = "inverse"
    INVERSE_SQRT = "inverse-sqrt"
    NONE = "none"


class Placement(str, Enum):
    ALIGNED = "aligned"
    RANDOM_SHIFT = "random-shift"


class TileSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    tiles: List[Tile]
    root: str = ""
    split: Split = Split.BASE_TRAIN

    @model_validator(mode="after")
    def _check_tiles(self) -> "TileSet":
        ids = [t.id for t in self.tiles]
        if len(ids) != len(set(ids)):
            raise BadValueError(f"Duplicate tile ids in {self.root or 'tile set'}")
        if self.split != Split.TEST:
            unlabeled = [t.id for t in self.tiles if t.label is None]
            if unlabeled:
                raise MissingLabelError(f"Split {self.split.value} requires labels; missing for {unlabeled[:5]}")
        return self

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)


class FrequencyTable(BaseModel):
    pixel_counts: Dict[int, int]
    frequencies: Dict[int, float]


class WeightVector(BaseModel):
    weights: Dict[int, float]
    mode: WeightMode

    def as_array(self, num_classes: int) -> np.ndarray:
        """Dense weight per class id; ids without a weight get 1"""
        dense = np.ones(num_classes, dtype=np.float64)
        for class_id, weight in self.weights.items():
            if class_id < num_classes:
                dense[class_id] = weight
        return dense


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------

def _index_rasters(folder: Path) -> Dict[str, Path]:
    found = {}
    for path in sorted(folder.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            found.setdefault(path.stem, path)
    return found


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def read_label(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        label = np.asarray(img)
    if label.ndim != 2:
        raise ShapeError(f"Label {path.name} must be single-channel, got shape {label.shape}")
    return label.astype(np.uint8)


def write_label(labels: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def write_tile(tile: Tile, root: Union[str, Path]) -> None:
    """Write a tile in the dataset layout that load_dataset reads"""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    Image.fromarray(tile.image, mode="RGB").save(root / "images" / f"{tile.id}.png")
    if tile.label is not None:
        write_label(tile.label, root / "labels" / f"{tile.id}.png")


def load_dataset(root: Union[str, Path], split: Union[Split, str], taxonomy: ClassTaxonomy) -> TileSet:
    """Load `<root>/images` paired with `<root>/labels` by filename stem"""
    root, split = Path(root), Split(split)
    image_dir, label_dir = root / "images", root / "labels"
    if not image_dir.is_dir():
        raise PathError(f"No images directory under {root}")

    images = _index_rasters(image_dir)
    labels = _index_rasters(label_dir) if label_dir.is_dir() else {}
    if split != Split.TEST and not label_dir.is_dir():
        raise MissingLabelError(f"Labeled split {split.value} has no labels directory under {root}")

    tiles = []
    for stem, image_path in images.items():
        label = None
        if stem in labels:
            label = read_label(labels[stem])
            LabelMap(labels=label).check_ids(taxonomy)
        elif split != Split.TEST:
            raise MissingLabelError(f"Image {image_path.name} has no label in {label_dir}")
        image = read_image(image_path)
        if label is not None and label.shape != image.shape[:2]:
            raise ShapeError(f"{stem}: image {image.shape[:2]} and label {label.shape} differ in size")
        tiles.append(Tile(id=stem, image=image, label=label))

    logger.info(f"Loaded {len(tiles)} tiles from {root} ({split.value})")
    return TileSet(tiles=tiles, root=str(root), split=split)


def split_holdout(tiles: TileSet, fraction: float = 0.2, seed: int = 0) -> Tuple[TileSet, TileSet]:
    """Deterministic train / held-out split of a labeled tile set"""
    n_hold = int(round(fraction * len(tiles)))
    if n_hold < 1 or n_hold >= len(tiles):
        raise EmptyDatasetError(f"Cannot hold out {fraction:.0%} of {len(tiles)} tiles")
    order = np.random.default_rng(seed).permutation(len(tiles))
    held = sorted(order[:n_hold].tolist())
    kept = sorted(order[n_hold:].tolist())
    return (
        TileSet(tiles=[tiles.tiles[i] for i in kept], root=tiles.root, split=tiles.split),
        TileSet(tiles=[tiles.tiles[i] for i in held], root=tiles.root, split=Split.QUERY),
    )


# ---------------------------------------------------------------------------
# Class balance
# ---------------------------------------------------------------------------

def compute_class_frequencies(tiles: TileSet, taxonomy: ClassTaxonomy) -> FrequencyTable:
    """Count every non-ignore pixel per class id"""
    counts = np.zeros(IGNORE_ID + 1, dtype=np.int64)
    for tile in tiles:
        if tile.label is None:
            raise MissingLabelError(f"Tile {tile.id} has no label to count")
        counts += np.bincount(tile.label.ravel(), minlength=IGNORE_ID + 1)[: IGNORE_ID + 1]
    counts[IGNORE_ID] = 0

    present = np.flatnonzero(counts)
    foreign = sorted(set(present.tolist()) - set(taxonomy.all_ids))
    if foreign:
        raise BadValueError(f"Label ids {foreign} are not in the taxonomy")
    total = int(counts.sum())
    if total == 0:
        raise EmptyError("No labeled pixels to count")

    pixel_counts = {int(i): int(counts[i]) for i in present}
    frequencies = {i: c / total for i, c in pixel_counts.items()}
    return FrequencyTable(pixel_counts=pixel_counts, frequencies=frequencies)


def compute_class_weights(freqs: FrequencyTable, mode: Union[WeightMode, str]) -> WeightVector:
    """Class-balanced weights, rescaled to mean 1 over the listed classes"""
    mode = WeightMode(mode)
    ids = sorted(freqs.frequencies)
    f = np.array([freqs.frequencies[i] for i in ids], dtype=np.float64)
    if np.any(f <= 0):
        zero = [i for i, v in zip(ids, f) if v <= 0]
        raise ZeroFrequencyError(f"Classes {zero} have zero frequency")

    if mode == WeightMode.INVERSE:
        raw = 1.0 / f
    elif mode == WeightMode.INVERSE_SQRT:
        raw = 1.0 / np.sqrt(f)
    else:
        raw = np.ones_like(f)
    weights = raw / raw.mean()
    return WeightVector(weights={i: float(w) for i, w in zip(ids, weights)}, mode=mode)


def save_table(table: BaseModel, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_table(path: Union[str, Path], kind: type) -> BaseModel:
    return kind.model_validate_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment_geometric(
    tile: Tile,
    rng: np.random.Generator,
    crop: Union[int, Tuple[int, int]],
    flip_prob: float = 0.5,
    vertical_flip: bool = True,
) -> Tile:
    """Random crop then random flips, applied identically to image and label"""
    ch, cw = (crop, crop) if isinstance(crop, int) else crop
    h, w = tile.size
    if ch > h or cw > w:
        raise CropTooLargeError(f"Crop {ch}x{cw} exceeds tile {h}x{w}")

    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    hflip = rng.random() < flip_prob
    vflip = vertical_flip and rng.random() < flip_prob

    def transform(arr: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if arr is None:
            return None
        out = arr[top:top + ch, left:left + cw]
        if hflip:
            out = out[:, ::-1]
        if vflip:
            out = out[::-1]
        return np.ascontiguousarray(out)

    return Tile(id=tile.id, image=transform(tile.image), label=transform(tile.label))


def build_novel_mask(support_label: np.ndarray) -> np.ndarray:
    """Binary mask of support pixels holding a novel class (label > 0)"""
    if np.any(support_label == IGNORE_ID):
        raise IgnoreInSupportError("Support labels may not contain the ignore value")
    return support_label > 0


def _translate(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift by (dy, dx) with zero fill"""
    out = np.zeros_like(arr)
    h, w = arr.shape[:2]
    src_y, dst_y = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
    src_x, dst_x = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def novel_cutmix(
    train: Tile,
    support: Tile,
    placement: Union[Placement, str] = Placement.ALIGNED,
    rng: Optional[np.random.Generator] = None,
) -> Tile:
    """Paste the novel-class pixels of a support tile onto a training tile.

    The output label is the (possibly shifted) support label, so base-class
    content of the training image is relabeled as background.
    """
    placement = Placement(placement)
    if support.label is None:
        raise MissingLabelError(f"Support tile {support.id} has no label")
    if train.size != support.size:
        raise ShapeError(f"Train tile {train.size} and support tile {support.size} differ in size")

    mask = build_novel_mask(support.label)
    image_v, label_v = support.image, support.label
    if placement == Placement.RANDOM_SHIFT:
        if rng is None:
            raise BadValueError("Random-shift placement needs an explicit random generator")
        h, w = support.size
        dy = int(rng.integers(-(h // 2), h // 2 + 1))
        dx = int(rng.integers(-(w // 2), w // 2 + 1))
        image_v, label_v = _translate(image_v, dy, dx), _translate(label_v, dy, dx)
        mask = build_novel_mask(label_v)

    image = np.where(mask[..., None], image_v, train.image)
    return Tile(id=f"{train.id}+{support.id}", image=image.astype(np.uint8), label=label_v.copy())
