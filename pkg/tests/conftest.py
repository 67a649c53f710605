import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from segland.core import ArchConfig, ClassTaxonomy, TaxonomyPhase  # noqa: E402
from segland.data import Split, TileSet  # noqa: E402
from segland.synthetic import desk_taxonomy, make_base_tiles, make_support_tiles, make_test_tiles  # noqa: E402
from segland.training import TrainConfig  # noqa: E402


@pytest.fixture
def desk() -> ClassTaxonomy:
    return desk_taxonomy()


@pytest.fixture
def base_only() -> ClassTaxonomy:
    return ClassTaxonomy(base_ids=[1, 2, 3], names={0: "background"}, phase=TaxonomyPhase.BASE_ONLY)


@pytest.fixture
def tiny_arch() -> ArchConfig:
    return ArchConfig(widths=(8, 16, 16, 32), fpn_dim=16, ppm_dim=8, embed_dim=16)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(epochs=1, batch_size=2, learning_rate=0.05, crop=64, seed=0)


@pytest.fixture
def base_tiles(desk) -> TileSet:
    return TileSet(tiles=make_base_tiles(desk, 4, 64, seed=0), split=Split.BASE_TRAIN)


@pytest.fixture
def support_tiles(desk) -> TileSet:
    return TileSet(tiles=make_support_tiles(desk, 2, 64, seed=0), split=Split.SUPPORT)


@pytest.fixture
def eval_tiles(desk) -> TileSet:
    return TileSet(tiles=make_test_tiles(desk, 2, 64, seed=0), split=Split.TEST)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale learning checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (minutes on CPU)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
