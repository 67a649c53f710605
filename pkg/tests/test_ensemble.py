import numpy as np
import pytest

from segland.core import ProbabilityMap
from segland.ensemble import (
    ARCH_REGISTRY,
    LearnerSpec,
    average_fusion,
    check_learners,
    labels_from_probs,
    load_probability_map,
    predict_tiles,
    save_probability_map,
    train_base_learner,
)
from segland.errors import BadValueError, EmptyListError, ShapeError, UnknownArchError
from segland.training import TrainConfig, train_base_phase


def random_maps(rng, n, h=4, w=5, k=3):
    maps = []
    for _ in range(n):
        probs = rng.dirichlet(np.ones(k), size=(h, w)).astype(np.float32)
        maps.append(ProbabilityMap(probs=probs))
    return maps


class TestAverageFusion:
    def test_single_map(self):
        m = random_maps(np.random.default_rng(0), 1)[0]
        np.testing.assert_allclose(average_fusion([m]).probs, m.probs, atol=1e-7)

    def test_pixel_example(self):
        a = ProbabilityMap(probs=np.array([[[0.8, 0.2]]], dtype=np.float32))
        b = ProbabilityMap(probs=np.array([[[0.6, 0.4]]], dtype=np.float32))
        np.testing.assert_allclose(average_fusion([a, b]).probs, [[[0.7, 0.3]]], atol=1e-7)

    def test_identical_maps(self):
        m = random_maps(np.random.default_rng(1), 1)[0]
        np.testing.assert_allclose(average_fusion([m, m, m]).probs, m.probs, atol=1e-7)

    def test_brute_force_mean_and_simplex(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            maps = random_maps(rng, int(rng.integers(1, 6)))
            fused = average_fusion(maps).probs
            expected = np.zeros_like(maps[0].probs, dtype=np.float64)
            for m in maps:
                expected += m.probs
            expected /= len(maps)
            assert np.abs(fused - expected).max() <= 1e-7
            assert np.abs(fused.sum(axis=2) - 1).max() <= 1e-5

    def test_permutation_and_crop(self):
        maps = random_maps(np.random.default_rng(3), 4, h=8, w=8)
        fused = average_fusion(maps).probs
        np.testing.assert_allclose(average_fusion(maps[::-1]).probs, fused, atol=1e-7)
        cropped = [ProbabilityMap(probs=m.probs[2:6, 1:5]) for m in maps]
        np.testing.assert_allclose(average_fusion(cropped).probs, fused[2:6, 1:5], atol=1e-7)

    def test_errors(self):
        with pytest.raises(EmptyListError):
            average_fusion([])
        a, = random_maps(np.random.default_rng(4), 1, k=3)
        b, = random_maps(np.random.default_rng(4), 1, k=4)
        with pytest.raises(ShapeError):
            average_fusion([a, b])

    def test_labels_break_ties_low(self):
        pmap = ProbabilityMap(probs=np.array([[[0.5, 0.5], [0.25, 0.75]]], dtype=np.float32))
        np.testing.assert_array_equal(labels_from_probs(pmap).labels, [[0, 1]])


class TestLearners:
    def test_registry(self):
        assert {"reference-s", "reference-m", "reference-l"} <= set(ARCH_REGISTRY)

    def test_unknown_arch(self, base_tiles, desk):
        spec = LearnerSpec(arch_id="hrnet48", config=TrainConfig(epochs=1))
        with pytest.raises(UnknownArchError):
            train_base_learner(spec, base_tiles, desk)

    def test_distinct_learners(self):
        spec = LearnerSpec(arch_id="reference-s", config=TrainConfig(seed=1))
        check_learners([spec, LearnerSpec(arch_id="reference-s", config=TrainConfig(seed=2))])
        with pytest.raises(BadValueError):
            check_learners([spec, spec])

    def test_learner_writes_checkpoint(self, tmp_path, base_tiles, desk):
        spec = LearnerSpec(
            arch_id="reference-s",
            config=TrainConfig(epochs=1, batch_size=2),
            checkpoint_path=str(tmp_path / "s"),
        )
        ckpt = train_base_learner(spec, base_tiles, desk)
        assert (tmp_path / "s" / "meta.json").is_file()
        assert ckpt.arch == ARCH_REGISTRY["reference-s"]


class TestPrediction:
    def test_two_learners_fuse(self, base_tiles, eval_tiles, desk, tiny_arch, tiny_config):
        a = train_base_phase(base_tiles, desk, tiny_config, arch=tiny_arch)
        b = train_base_phase(base_tiles, desk, tiny_config.model_copy(update={"seed": 1}), arch=tiny_arch)
        single_a = predict_tiles([a], eval_tiles)
        single_b = predict_tiles([b], eval_tiles)
        fused = predict_tiles([a, b], eval_tiles)
        for tile in eval_tiles:
            probs, labels = fused[tile.id]
            expected = (single_a[tile.id][0].probs.astype(np.float64) + single_b[tile.id][0].probs) / 2
            np.testing.assert_allclose(probs.probs, expected, atol=1e-6)
            assert labels.labels.shape == tile.size
            assert probs.num_classes == desk.base_view().num_classes

    def test_probability_map_files(self, tmp_path, desk):
        pmap = random_maps(np.random.default_rng(5), 1, k=desk.num_classes)[0]
        path = save_probability_map(pmap, tmp_path / "tile.npy", desk)
        assert np.load(path).shape == (desk.num_classes, 4, 5)
        loaded, taxonomy = load_probability_map(path)
        np.testing.assert_array_equal(loaded.probs, pmap.probs)
        assert taxonomy == desk
