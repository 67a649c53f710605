"""Command-line entry point: `python -m segland <command>`.

Every command reads its inputs from declared artifact directories, writes its
outputs under ``--out`` and leaves a ``manifest.json`` there recording the
configs, inputs and digests the run used.
"""
import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, ValidationError

from segland.checkpoint import META_FILE, load_checkpoint, save_checkpoint
from segland.config import setup_logging
from segland.core import ClassTaxonomy, LabelMap, TrainingPhase, canonical_json, digest_of, validate_taxonomy
from segland.data import (
    Split,
    WeightMode,
    WeightVector,
    compute_class_frequencies,
    compute_class_weights,
    load_dataset,
    load_table,
    read_label,
    save_table,
    split_holdout,
    write_label,
)
from segland.ensemble import (
    LearnerSpec,
    check_learners,
    predict_tiles,
    resolve_arch,
    save_probability_map,
    train_base_learner,
)
from segland.errors import (
    ConfigError,
    DigestMismatchError,
    MissingArtifactError,
    PathError,
    PhaseError,
    SegLandError,
)
from segland.evaluation import EvaluationReport, evaluate_tiles, plot_report
from segland.fusion import FusionMode, load_fusion_config, ultimate_fuse
from segland.synthetic import TAXONOMY_PRESETS, write_synthetic_dataset
from segland.training import TrainConfig, load_train_config, train_base_phase, update_novel_phase

logger = logging.getLogger("segland")

MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.json"


class RunManifest(BaseModel):
    command: str
    seed: Optional[int] = None
    config_paths: Dict[str, str] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    config_digest: Optional[str] = None
    taxonomy_digest: Optional[str] = None
    details: Dict[str, Any] = Field(default_factory=dict)
    started_at: str
    finished_at: Optional[str] = None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest.model_copy(update={"finished_at": _now()})
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(directory: Path) -> RunManifest:
    path = Path(directory) / MANIFEST_FILE
    if not path.is_file():
        raise MissingArtifactError(f"No {MANIFEST_FILE} in {directory}")
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def resolve_taxonomy(ref: str) -> ClassTaxonomy:
    """A preset name or a path to a taxonomy JSON file"""
    if ref in TAXONOMY_PRESETS:
        taxonomy = TAXONOMY_PRESETS[ref]()
    else:
        path = Path(ref)
        if not path.is_file():
            raise PathError(f"'{ref}' is neither a taxonomy preset {sorted(TAXONOMY_PRESETS)} nor a file")
        try:
            taxonomy = ClassTaxonomy.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ConfigError(f"Invalid taxonomy file {path}: {e}") from e
    validate_taxonomy(taxonomy)
    return taxonomy


def _require_dir(path: Optional[Path], what: str) -> Path:
    if path is None or not Path(path).is_dir():
        raise MissingArtifactError(f"{what} directory {path} does not exist")
    return Path(path)


def _config_paths(args) -> Dict[str, str]:
    return {"config": str(args.config)} if getattr(args, "config", None) else {}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = _now()
    taxonomy = resolve_taxonomy(args.taxonomy)
    counts = write_synthetic_dataset(
        args.out, taxonomy, args.n_tiles, size=args.size, seed=args.seed, shots=args.shots, n_test=args.n_test
    )
    (args.out / "taxonomy.json").write_text(
        json.dumps(taxonomy.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_manifest(args.out, RunManifest(
        command="synth",
        seed=args.seed,
        outputs={split: str(args.out / split) for split in counts},
        taxonomy_digest=taxonomy.digest(),
        details={"tiles": counts, "size": args.size},
        started_at=started,
    ))
    return 0


def cmd_prepare(args) -> int:
    started = _now()
    taxonomy = resolve_taxonomy(args.taxonomy)
    tiles = load_dataset(args.data_root, Split.BASE_TRAIN, taxonomy)
    freqs = compute_class_frequencies(tiles, taxonomy)
    weights = compute_class_weights(freqs, args.mode or WeightMode.INVERSE_SQRT)
    save_table(freqs, args.out / "frequencies.json")
    save_table(weights, args.out / "weights.json")
    logger.info(f"Class weights ({weights.mode.value}): {weights.weights}")
    write_manifest(args.out, RunManifest(
        command="prepare",
        inputs={"data_root": str(args.data_root)},
        outputs={"frequencies": str(args.out / "frequencies.json"), "weights": str(args.out / "weights.json")},
        taxonomy_digest=taxonomy.digest(),
        details={"weight_mode": weights.mode.value},
        started_at=started,
    ))
    return 0


def _train_config(args, novel: bool = False) -> TrainConfig:
    overrides = {"seed": args.seed, "epochs": args.epochs}
    if novel and not args.config:
        return TrainConfig.novel_defaults(**{k: v for k, v in overrides.items() if v is not None})
    return load_train_config(args.config, **overrides)


def cmd_train_base(args) -> int:
    started = _now()
    taxonomy = resolve_taxonomy(args.taxonomy)
    config = _train_config(args)
    arch = resolve_arch(args.arch)
    tiles = load_dataset(args.data_root, Split.BASE_TRAIN, taxonomy.base_view())
    weights = load_table(args.weights, WeightVector) if args.weights else None

    held = None
    if args.holdout:
        tiles, held = split_holdout(tiles, args.holdout, config.seed)
    ckpt = train_base_phase(tiles, taxonomy, config, arch=arch, weights=weights)
    save_checkpoint(ckpt, args.out)

    details: Dict[str, Any] = {"arch": args.arch, "tiles": len(tiles)}
    if held is not None:
        predictions = predict_tiles([ckpt], held)
        report = evaluate_tiles(
            ((predictions[t.id][1], LabelMap(labels=t.label)) for t in held), ckpt.taxonomy
        )
        (args.out / "holdout_report.json").write_text(canonical_json(report.model_dump(mode="json")) + "\n", encoding="utf-8")
        details["holdout_base_miou"] = report.base_miou

    write_manifest(args.out, RunManifest(
        command="train-base",
        seed=config.seed,
        config_paths=_config_paths(args),
        inputs={"data_root": str(args.data_root), **({"weights": str(args.weights)} if args.weights else {})},
        outputs={"checkpoint": str(args.out)},
        config_digest=ckpt.config_digest,
        taxonomy_digest=ckpt.taxonomy.digest(),
        details=details,
        started_at=started,
    ))
    return 0


def cmd_train_ensemble(args) -> int:
    started = _now()
    taxonomy = resolve_taxonomy(args.taxonomy)
    base_config = _train_config(args)
    tiles = load_dataset(args.data_root, Split.BASE_TRAIN, taxonomy.base_view())

    specs = [
        LearnerSpec(
            arch_id=arch_id,
            config=base_config.model_copy(update={"seed": seed}),
            checkpoint_path=str(args.out / f"{arch_id}-s{seed}"),
        )
        for arch_id, seed in zip(args.archs, args.seeds)
    ]
    check_learners(specs)

    members = []
    for spec in specs:
        learner_started = _now()
        ckpt = train_base_learner(spec, tiles, taxonomy)
        write_manifest(Path(spec.checkpoint_path), RunManifest(
            command="train-ensemble",
            seed=spec.config.seed,
            config_paths=_config_paths(args),
            inputs={"data_root": str(args.data_root)},
            outputs={"checkpoint": spec.checkpoint_path},
            config_digest=ckpt.config_digest,
            taxonomy_digest=ckpt.taxonomy.digest(),
            details={"arch": spec.arch_id},
            started_at=learner_started,
        ))
        members.append(spec.name)

    write_manifest(args.out, RunManifest(
        command="train-ensemble",
        seed=base_config.seed,
        config_paths=_config_paths(args),
        inputs={"data_root": str(args.data_root)},
        outputs={name: str(args.out / name) for name in members},
        config_digest=base_config.digest(),
        taxonomy_digest=taxonomy.base_view().digest(),
        details={"learners": members},
        started_at=started,
    ))
    return 0


def cmd_update_novel(args) -> int:
    started = _now()
    taxonomy = resolve_taxonomy(args.taxonomy)
    config = _train_config(args, novel=True)
    base_ckpt = load_checkpoint(_require_dir(args.checkpoint, "Checkpoint"))
    if base_ckpt.phase != TrainingPhase.BASE:
        raise PhaseError(f"{args.checkpoint} holds a {base_ckpt.phase.value}-phase checkpoint; expected base")

    support = load_dataset(args.data_root, Split.SUPPORT, taxonomy)
    base_tiles = load_dataset(args.base_root, Split.BASE_TRAIN, taxonomy.base_view()) if args.base_root else None
    ckpt = update_novel_phase(base_ckpt, support, taxonomy, config, base_tiles=base_tiles)
    save_checkpoint(ckpt, args.out)

    write_manifest(args.out, RunManifest(
        command="update-novel",
        seed=config.seed,
        config_paths=_config_paths(args),
        inputs={"checkpoint": str(args.checkpoint), "data_root": str(args.data_root)},
        outputs={"checkpoint": str(args.out)},
        config_digest=ckpt.config_digest,
        taxonomy_digest=ckpt.taxonomy.digest(),
        details={"parent_digest": ckpt.parent_digest, "support_tiles": len(support)},
        started_at=started,
    ))
    return 0


def _checkpoint_dirs(paths: List[Path]) -> List[Path]:
    """Expand ensemble directories into their member checkpoints"""
    found = []
    for path in paths:
        path = _require_dir(path, "Checkpoint")
        if (path / META_FILE).is_file():
            found.append(path)
        else:
            members = sorted(p.parent for p in path.glob(f"*/{META_FILE}"))
            if not members:
                raise MissingArtifactError(f"No checkpoint under {path}")
            found.extend(members)
    return found


def cmd_predict(args) -> int:
    started = _now()
    ckpt_dirs = _checkpoint_dirs(args.checkpoint)
    checkpoints = [load_checkpoint(d) for d in ckpt_dirs]
    digests = {c.taxonomy.digest() for c in checkpoints}
    if len(digests) > 1:
        raise DigestMismatchError("Checkpoints were trained on different taxonomies")
    model_taxonomy = checkpoints[0].taxonomy
    taxonomy = resolve_taxonomy(args.taxonomy) if args.taxonomy else model_taxonomy

    tiles = load_dataset(args.data_root, Split.TEST, taxonomy)
    results = predict_tiles(checkpoints, tiles)
    for tile_id in sorted(results):
        probs, labels = results[tile_id]
        write_label(labels.labels, args.out / "labels" / f"{tile_id}.png")
        save_probability_map(probs, args.out / "probs" / f"{tile_id}.npy", model_taxonomy)

    write_manifest(args.out, RunManifest(
        command="predict",
        inputs={"data_root": str(args.data_root), **{f"checkpoint_{i}": str(d) for i, d in enumerate(ckpt_dirs)}},
        outputs={"labels": str(args.out / "labels"), "probs": str(args.out / "probs")},
        taxonomy_digest=model_taxonomy.digest(),
        details={"config_digests": [c.config_digest for c in checkpoints], "tiles": len(results)},
        started_at=started,
    ))
    return 0


def _check_digest(directory: Path, expected: str, what: str) -> None:
    found = read_manifest(directory).taxonomy_digest
    if found != expected:
        raise DigestMismatchError(f"{what} at {directory} was produced for taxonomy {found}, expected {expected}")


def cmd_fuse(args) -> int:
    started = _now()
    taxonomy = resolve_taxonomy(args.taxonomy)
    config = load_fusion_config(args.config, args.mode)
    ens_dir = _require_dir(args.ensemble, "Ensemble prediction")
    pop_dir = _require_dir(args.pop, "POP prediction")
    _check_digest(ens_dir, taxonomy.base_view().digest(), "Ensemble prediction")
    _check_digest(pop_dir, taxonomy.digest(), "POP prediction")

    pop_labels = sorted((pop_dir / "labels").glob("*.png"))
    for pop_path in pop_labels:
        ens_path = ens_dir / "labels" / pop_path.name
        if not ens_path.is_file():
            raise MissingArtifactError(f"Ensemble prediction for {pop_path.stem} is missing")
        fused = ultimate_fuse(
            LabelMap(labels=read_label(ens_path)), LabelMap(labels=read_label(pop_path)), taxonomy, config
        )
        write_label(fused.labels, args.out / "labels" / pop_path.name)

    write_manifest(args.out, RunManifest(
        command="fuse",
        config_paths=_config_paths(args),
        inputs={"ensemble": str(ens_dir), "pop": str(pop_dir)},
        outputs={"labels": str(args.out / "labels")},
        config_digest=digest_of(config),
        taxonomy_digest=taxonomy.digest(),
        details={"tiles": len(pop_labels), "mode": config.mode.value},
        started_at=started,
    ))
    return 0


def cmd_evaluate(args) -> int:
    started = _now()
    taxonomy = resolve_taxonomy(args.taxonomy)
    pred_dir = _require_dir(args.pred, "Prediction")
    _check_digest(pred_dir, taxonomy.digest(), "Prediction")

    truth = load_dataset(args.data_root, Split.QUERY, taxonomy)
    pairs = []
    for tile in truth:
        pred_path = pred_dir / "labels" / f"{tile.id}.png"
        if not pred_path.is_file():
            raise MissingArtifactError(f"No prediction for tile {tile.id}")
        pairs.append((LabelMap(labels=read_label(pred_path)), LabelMap(labels=tile.label)))

    report = evaluate_tiles(pairs, taxonomy, include_undefined=args.include_undefined)
    args.out.mkdir(parents=True, exist_ok=True)
    report_path = args.out / REPORT_FILE
    report_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs = {"report": str(report_path)}
    if args.plot:
        for path in plot_report(report, args.out):
            outputs[path.stem] = str(path)

    write_manifest(args.out, RunManifest(
        command="evaluate",
        inputs={"pred": str(pred_dir), "data_root": str(args.data_root)},
        outputs=outputs,
        taxonomy_digest=taxonomy.digest(),
        details={"total_score": report.total_score},
        started_at=started,
    ))
    if report.total_score is not None:
        print(f"base mIoU {report.base_miou:.2f}  novel mIoU {report.novel_miou:.2f}  score {report.total_score:.2f}")
    return 0


def cmd_plot(args) -> int:
    started = _now()
    if not args.report.is_file():
        raise MissingArtifactError(f"No evaluation report at {args.report}")
    report = EvaluationReport.model_validate_json(args.report.read_text(encoding="utf-8"))
    paths = plot_report(report, args.out)
    write_manifest(args.out, RunManifest(
        command="plot",
        inputs={"report": str(args.report)},
        outputs={p.stem: str(p) for p in paths},
        taxonomy_digest=report.taxonomy_digest,
        started_at=started,
    ))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _csv(kind):
    return lambda text: [kind(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segland", description="Generalized few-shot land-cover segmentation")
    parser.add_argument("--log-level", default=None, help="Overrides SEGLAND_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", type=Path, required=True)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "Generate a synthetic dataset")
    p.add_argument("--taxonomy", default="desk")
    p.add_argument("--n-tiles", type=int, default=32)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = add("prepare", cmd_prepare, "Class frequencies and weights")
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--taxonomy", default="desk")
    p.add_argument("--mode", choices=[m.value for m in WeightMode], default=None)

    for name, func, help_text in (
        ("train-base", cmd_train_base, "Phase 1 on the base training set"),
        ("train-ensemble", cmd_train_ensemble, "Independent base learners"),
        ("update-novel", cmd_update_novel, "Phase 2 on the support set"),
    ):
        p = add(name, func, help_text)
        p.add_argument("--data-root", type=Path, required=True)
        p.add_argument("--taxonomy", default="desk")
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        if name == "train-base":
            p.add_argument("--arch", default="reference-m")
            p.add_argument("--weights", type=Path, default=None)
            p.add_argument("--holdout", type=float, default=0.0)
        elif name == "train-ensemble":
            p.add_argument("--archs", type=_csv(str), default=["reference-s", "reference-m"])
            p.add_argument("--seeds", type=_csv(int), default=[0, 1])
        else:
            p.add_argument("--checkpoint", type=Path, required=True)
            p.add_argument("--base-root", type=Path, default=None, help="Base tiles for NovelCutMix")

    p = add("predict", cmd_predict, "Per-tile probabilities and labels")
    p.add_argument("--checkpoint", type=Path, action="append", required=True)
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--taxonomy", default=None)

    p = add("fuse", cmd_fuse, "Ultimate fusion of ensemble and POP labels")
    p.add_argument("--ensemble", type=Path, required=True)
    p.add_argument("--pop", type=Path, required=True)
    p.add_argument("--taxonomy", default="desk")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--mode", choices=[m.value for m in FusionMode], default=None)

    p = add("evaluate", cmd_evaluate, "Score predictions against labels")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--taxonomy", default="desk")
    p.add_argument("--include-undefined", action="store_true")
    p.add_argument("--plot", action="store_true")

    p = add("plot", cmd_plot, "Plots from an evaluation report")
    p.add_argument("--report", type=Path, required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    if getattr(args, "archs", None) is not None and len(args.archs) != len(args.seeds):
        logger.error("--archs and --seeds must list the same number of learners")
        return 2
    try:
        return args.func(args)
    except SegLandError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return 1
    except Exception:
        logger.exception(f"{args.command} failed unexpectedly")
        return 2


if __name__ == "__main__":
    sys.exit(main())
