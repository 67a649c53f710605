import json

import numpy as np
import pytest

from segland.cli import build_parser, main, read_manifest
from segland.data import Split, load_dataset
from segland.errors import (
    ConfigError,
    DigestMismatchError,
    MissingArtifactError,
    MissingLabelError,
    PhaseError,
)
from segland.synthetic import desk_taxonomy

FAST_TRAIN = {"epochs": 1, "batch_size": 2, "crop": 64, "seed": 0}


def run(*argv) -> int:
    return main([str(a) for a in argv])


def invoke(*argv):
    """Run a command without the top-level error handler"""
    args = build_parser().parse_args([str(a) for a in argv])
    return args.func(args)


def run_pipeline(root, config):
    data = root / "data"
    assert run("synth", "--out", data, "--n-tiles", 4, "--size", 64, "--shots", 2, "--n-test", 2, "--seed", 0) == 0
    assert run("prepare", "--out", root / "prepare", "--data-root", data / "base-train", "--mode", "inverse-sqrt") == 0
    assert run("train-base", "--out", root / "base", "--data-root", data / "base-train", "--config", config,
               "--arch", "reference-s", "--weights", root / "prepare" / "weights.json") == 0
    assert run("train-ensemble", "--out", root / "ensemble", "--data-root", data / "base-train", "--config", config,
               "--archs", "reference-s,reference-s", "--seeds", "1,2") == 0
    assert run("update-novel", "--out", root / "pop", "--checkpoint", root / "base", "--data-root", data / "support",
               "--base-root", data / "base-train", "--config", config) == 0
    assert run("predict", "--out", root / "pred-ensemble", "--checkpoint", root / "ensemble",
               "--data-root", data / "test", "--taxonomy", "desk") == 0
    assert run("predict", "--out", root / "pred-pop", "--checkpoint", root / "pop",
               "--data-root", data / "test", "--taxonomy", "desk") == 0
    assert run("fuse", "--out", root / "fused", "--ensemble", root / "pred-ensemble", "--pop", root / "pred-pop") == 0
    assert run("evaluate", "--out", root / "eval", "--pred", root / "fused", "--data-root", data / "test") == 0


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("configs") / "train.json"
    path.write_text(json.dumps(FAST_TRAIN))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, fast_config):
    root = tmp_path_factory.mktemp("run")
    run_pipeline(root, fast_config)
    return root


class TestSynth:
    def test_counts_and_manifest(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--n-tiles", 3, "--size", 64, "--shots", 2) == 0
        tiles = load_dataset(tmp_path / "base-train", Split.BASE_TRAIN, desk_taxonomy())
        assert len(tiles) == 3
        assert len(load_dataset(tmp_path / "support", Split.SUPPORT, desk_taxonomy())) == 2
        assert read_manifest(tmp_path).command == "synth"

    def test_support_has_only_novel_and_background(self, tmp_path):
        run("synth", "--out", tmp_path, "--n-tiles", 2, "--shots", 3)
        for tile in load_dataset(tmp_path / "support", Split.SUPPORT, desk_taxonomy()):
            assert set(np.unique(tile.label)) <= {0, 4}
            assert (tile.label == 4).any()
        for tile in load_dataset(tmp_path / "base-train", Split.BASE_TRAIN, desk_taxonomy()):
            assert 4 not in tile.label

    def test_empty(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--n-tiles", 0) == 0
        assert not any((tmp_path / "base-train" / "images").iterdir())
        assert (tmp_path / "manifest.json").is_file()

    def test_replay_is_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            run("synth", "--out", tmp_path / name, "--n-tiles", 2, "--seed", 7)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_bad_size(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--size", 48) == 1

    def test_unexpected_failure_exits_2(self, tmp_path, monkeypatch):
        def broken(*args, **kwargs):
            raise RuntimeError("disk vanished")

        monkeypatch.setattr("segland.cli.write_synthetic_dataset", broken)
        assert run("synth", "--out", tmp_path) == 2



class TestPrepare:
    def test_uniform_inverse(self, tmp_path):
        run("synth", "--out", tmp_path / "data", "--n-tiles", 2)
        assert run("prepare", "--out", tmp_path / "prep", "--data-root", tmp_path / "data" / "base-train",
                   "--mode", "inverse") == 0
        weights = json.loads((tmp_path / "prep" / "weights.json").read_text())
        assert weights["mode"] == "inverse"
        assert np.mean(list(weights["weights"].values())) == pytest.approx(1.0)

    def test_missing_labels(self, tmp_path):
        run("synth", "--out", tmp_path / "data", "--n-tiles", 1)
        for path in (tmp_path / "data" / "base-train" / "labels").iterdir():
            path.unlink()
        (tmp_path / "data" / "base-train" / "labels").rmdir()
        with pytest.raises(MissingLabelError):
            invoke("prepare", "--out", tmp_path / "prep", "--data-root", tmp_path / "data" / "base-train")


class TestPipeline:
    def test_report(self, pipeline):
        report = json.loads((pipeline / "eval" / "report.json").read_text())
        assert report["total_score"] is not None
        assert 0.0 <= report["total_score"] <= 100.0
        for name in ("base", "ensemble", "pop", "pred-ensemble", "pred-pop", "fused", "eval"):
            assert (pipeline / name / "manifest.json").is_file()

    def test_predictions_written(self, pipeline):
        labels = sorted((pipeline / "pred-pop" / "labels").glob("*.png"))
        probs = sorted((pipeline / "pred-pop" / "probs").glob("*.npy"))
        assert len(labels) == len(probs) == 2
        assert np.load(probs[0]).shape == (desk_taxonomy().num_classes, 64, 64)

    def test_update_novel_needs_base_checkpoint(self, pipeline, tmp_path, fast_config):
        with pytest.raises(PhaseError):
            invoke("update-novel", "--out", tmp_path / "again", "--checkpoint", pipeline / "pop",
                   "--data-root", pipeline / "data" / "support", "--config", fast_config)

    def test_taxonomy_mismatch(self, pipeline, tmp_path):
        with pytest.raises(DigestMismatchError):
            invoke("evaluate", "--out", tmp_path / "eval", "--pred", pipeline / "pred-ensemble",
                   "--data-root", pipeline / "data" / "test")
        assert run("evaluate", "--out", tmp_path / "eval", "--pred", pipeline / "pred-ensemble",
                   "--data-root", pipeline / "data" / "test") == 1

    def test_missing_artifact(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            invoke("fuse", "--out", tmp_path / "f", "--ensemble", tmp_path / "nope", "--pop", tmp_path / "nope")

    def test_fuse_rejects_unknown_mode(self, tmp_path):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["fuse", "--out", str(tmp_path), "--ensemble", "e", "--pop", "p",
                                       "--mode", "bogus"])

    def test_fuse_bad_config(self, tmp_path):
        bad = tmp_path / "fusion.json"
        bad.write_text('{"mode": "bogus"}')
        with pytest.raises(ConfigError):
            invoke("fuse", "--out", tmp_path / "f", "--ensemble", tmp_path, "--pop", tmp_path, "--config", bad)
        bad.write_text("{not json")
        assert run("fuse", "--out", tmp_path / "f", "--ensemble", tmp_path, "--pop", tmp_path,
                   "--config", bad) == 1


    def test_plot(self, pipeline, tmp_path):
        assert run("plot", "--out", tmp_path / "plots", "--report", pipeline / "eval" / "report.json") == 0
        assert (tmp_path / "plots" / "iou.png").is_file()
        assert (tmp_path / "plots" / "confusion.png").is_file()

    def test_rerun_is_byte_identical(self, pipeline, tmp_path_factory, fast_config):
        again = tmp_path_factory.mktemp("rerun")
        run_pipeline(again, fast_config)
        assert (pipeline / "eval" / "report.json").read_bytes() == (again / "eval" / "report.json").read_bytes()
        for name in ("pred-ensemble", "pred-pop", "fused"):
            for path in sorted((pipeline / name / "labels").glob("*.png")):
                assert path.read_bytes() == (again / name / "labels" / path.name).read_bytes()
        for name in ("base", "pop"):
            assert (pipeline / name / "tensors.npz").read_bytes() == (again / name / "tensors.npz").read_bytes()
