"""Procedural desk-scale scenes and the class taxonomies used with them.

Land-cover classes fill large Voronoi cells; novel classes are small
rectangles placed on top, so the two groups differ in scale the way
cropland and vehicles do in aerial tiles.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from segland.core import ClassTaxonomy, TaxonomyPhase, Tile, validate_taxonomy
from segland.data import Split, write_tile
from segland.errors import PathError, ShapeError

logger = logging.getLogger(__name__)

PALETTE = np.array([
    [60, 60, 60],      # background
    [34, 139, 34],
    [189, 183, 107],
    [160, 82, 45],
    [230, 30, 30],
    [128, 128, 128],
    [30, 90, 200],
    [255, 255, 255],
    [238, 221, 130],
    [0, 200, 200],
    [255, 140, 0],
    [150, 0, 150],
    [255, 0, 255],
    [0, 0, 0],
    [120, 200, 60],
    [250, 250, 0],
], dtype=np.float64)
NOISE_STD = 12.0

CHALLENGE_BASE = {
    1: "tree",
    2: "rangeland",
    3: "bareland",
    4: "agric_land_type_1",
    5: "road_type_1",
    6: "sea_lake_pond",
    7: "building_type_1",
}
CHALLENGE_NOVEL = {
    1: {8: "road_type_2", 9: "river", 10: "boat_ship", 11: "agric_land_type_2"},
    2: {8: "vehicle", 9: "parking_space", 10: "sports_field", 11: "building_type_2"},
}


def challenge_taxonomy(phase: int = 2) -> ClassTaxonomy:
    if phase not in CHALLENGE_NOVEL:
        raise ValueError(f"Challenge phase must be 1 or 2, got {phase}")
    novel = CHALLENGE_NOVEL[phase]
    return ClassTaxonomy(
        base_ids=sorted(CHALLENGE_BASE),
        novel_ids=sorted(novel),
        names={0: "background", **CHALLENGE_BASE, **novel},
        phase=TaxonomyPhase.PHASE1 if phase == 1 else TaxonomyPhase.PHASE2,
    )


def desk_taxonomy() -> ClassTaxonomy:
    return ClassTaxonomy(
        base_ids=[1, 2, 3],
        novel_ids=[4],
        names={0: "background", 1: "tree", 2: "cropland", 3: "water", 4: "vehicle"},
        phase=TaxonomyPhase.PHASE1,
    )


TAXONOMY_PRESETS = {
    "desk": desk_taxonomy,
    "challenge-phase1": lambda: challenge_taxonomy(1),
    "challenge-phase2": lambda: challenge_taxonomy(2),
}


def _object_extent(size: int) -> Tuple[int, int]:
    low = max(4, size // 16)
    return low, max(low, size // 6)


def generate_scene(
    rng: np.random.Generator,
    size: int,
    region_ids: Sequence[int],
    object_ids: Sequence[int] = (),
    n_objects: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """One H x W x 3 image with its full label"""
    n_seeds = int(rng.integers(4, 9))
    seeds = rng.uniform(0, size, size=(n_seeds, 2))
    classes = rng.choice(np.asarray(region_ids), size=n_seeds)
    yy, xx = np.mgrid[0:size, 0:size]
    dist = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    label = classes[np.argmin(dist, axis=2)].astype(np.uint8)

    low, high = _object_extent(size)
    for _ in range(n_objects if object_ids else 0):
        class_id = object_ids[int(rng.integers(len(object_ids)))]
        oh, ow = (int(v) for v in rng.integers(low, high + 1, size=2))
        top = int(rng.integers(0, size - oh + 1))
        left = int(rng.integers(0, size - ow + 1))
        label[top: top + oh, left: left + ow] = class_id

    colours = PALETTE[label % len(PALETTE)]
    image = colours + rng.normal(0.0, NOISE_STD, size=colours.shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), label


def _split_rng(seed: int, split: Split) -> np.random.Generator:
    return np.random.default_rng([seed, list(Split).index(split)])


def make_base_tiles(taxonomy: ClassTaxonomy, n_tiles: int, size: int, seed: int) -> List[Tile]:
    rng = _split_rng(seed, Split.BASE_TRAIN)
    regions = [taxonomy.background_id] + list(taxonomy.base_ids)
    tiles = []
    for i in range(n_tiles):
        image, label = generate_scene(rng, size, regions)
        tiles.append(Tile(id=f"base_{i:04d}", image=image, label=label))
    return tiles


def make_support_tiles(taxonomy: ClassTaxonomy, shots: int, size: int, seed: int) -> List[Tile]:
    """`shots` tiles per novel class; everything but that class is annotated background"""
    rng = _split_rng(seed, Split.SUPPORT)
    regions = [taxonomy.background_id] + list(taxonomy.base_ids)
    tiles = []
    for class_id in taxonomy.novel_ids:
        for shot in range(shots):
            image, label = generate_scene(rng, size, regions, [class_id], int(rng.integers(2, 5)))
            support_label = np.where(label == class_id, class_id, taxonomy.background_id).astype(np.uint8)
            tiles.append(Tile(id=f"support_{class_id:02d}_{shot:02d}", image=image, label=support_label))
    return tiles


def make_test_tiles(taxonomy: ClassTaxonomy, n_tiles: int, size: int, seed: int) -> List[Tile]:
    rng = _split_rng(seed, Split.TEST)
    regions = [taxonomy.background_id] + list(taxonomy.base_ids)
    tiles = []
    for i in range(n_tiles):
        image, label = generate_scene(rng, size, regions, list(taxonomy.novel_ids), int(rng.integers(1, 4)))
        tiles.append(Tile(id=f"test_{i:04d}", image=image, label=label))
    return tiles


def write_synthetic_dataset(
    out: Union[str, Path],
    taxonomy: ClassTaxonomy,
    n_tiles: int,
    size: int = 64,
    seed: int = 0,
    shots: int = 5,
    n_test: Optional[int] = None,
) -> Dict[str, int]:
    """Write base-train, support and test splits under out; returns tiles per split"""
    validate_taxonomy(taxonomy)
    if size < 32 or size % 32:
        raise ShapeError(f"Tile size {size} must be a positive multiple of 32")
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise PathError(f"{out} exists and is not a directory")
    n_test = max(n_tiles // 4, 1) if n_test is None and n_tiles else (n_test or 0)

    splits = {
        Split.BASE_TRAIN: make_base_tiles(taxonomy, n_tiles, size, seed),
        Split.SUPPORT: make_support_tiles(taxonomy, shots, size, seed) if n_tiles else [],
        Split.TEST: make_test_tiles(taxonomy, n_test, size, seed),
    }
    counts = {}
    for split, tiles in splits.items():
        root = out / split.value
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        for tile in tiles:
            write_tile(tile, root)
        counts[split.value] = len(tiles)
    logger.info(f"Synthetic dataset at {out}: {counts}")
    return counts
