"""Confusion matrices, per-class IoU, base/novel mIoU and the challenge score."""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from sklearn.metrics import confusion_matrix

from segland.core import IGNORE_ID, ClassTaxonomy, LabelMap
from segland.errors import BadIdError, NoDefinedIoUError, RangeError, ShapeError

logger = logging.getLogger(__name__)

BASE_SHARE = 0.4
NOVEL_SHARE = 0.6


class ConfusionMatrix(BaseModel):
    """Pixel counts; rows are truth, columns prediction"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    counts: np.ndarray

    @model_validator(mode="after")
    def _check_counts(self) -> "ConfusionMatrix":
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"Confusion matrix must be K x K, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise BadIdError("Confusion counts must be non-negative")
        return self

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError(f"Cannot add {other.counts.shape} counts to {self.counts.shape}")
        return ConfusionMatrix(counts=self.counts + other.counts)


def accumulate_confusion(pred: LabelMap, truth: LabelMap, num_classes: int, ignore: int = IGNORE_ID) -> ConfusionMatrix:
    p, t = pred.labels, truth.labels
    if p.shape != t.shape:
        raise ShapeError(f"Prediction {p.shape} and truth {t.shape} differ in size")
    for name, arr in (("prediction", p), ("truth", t)):
        bad = np.setdiff1d(np.unique(arr), np.append(np.arange(num_classes), ignore))
        if bad.size:
            raise BadIdError(f"{name} holds ids {bad.tolist()} outside 0..{num_classes - 1}")

    # a pixel counts when its truth is labeled and the model made a class decision
    valid = (t != ignore) & (p != ignore)
    if not valid.any():
        return ConfusionMatrix.zeros(num_classes)
    counts = confusion_matrix(t[valid].ravel(), p[valid].ravel(), labels=np.arange(num_classes))
    return ConfusionMatrix(counts=counts.astype(np.int64))


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from truth and prediction"""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), np.nan)


def miou(ious: Sequence[float], subset: Iterable[int], include_undefined: bool = False) -> float:
    """Mean IoU over the class ids in subset"""
    values = np.asarray(ious, dtype=np.float64)
    subset = [int(i) for i in subset]
    bad = [i for i in subset if not 0 <= i < values.size]
    if bad:
        raise BadIdError(f"Class ids {bad} are outside 0..{values.size - 1}")
    picked = values[subset] if subset else np.array([])
    if include_undefined:
        picked = np.nan_to_num(picked, nan=0.0)
    picked = picked[~np.isnan(picked)]
    if picked.size == 0:
        raise NoDefinedIoUError("No defined IoU in the requested classes")
    return float(picked.mean())


def challenge_score(base_miou: float, novel_miou: float) -> float:
    """0.4 x base + 0.6 x novel, both in percent"""
    for name, value in (("base", base_miou), ("novel", novel_miou)):
        if not 0.0 <= value <= 100.0:
            raise RangeError(f"{name} mIoU {value} is outside [0, 100]")
    return BASE_SHARE * base_miou + NOVEL_SHARE * novel_miou


class EvaluationReport(BaseModel):
    class_names: Dict[int, str]
    iou: Dict[int, Optional[float]]
    base_miou: Optional[float] = None
    novel_miou: Optional[float] = None
    total_score: Optional[float] = None
    confusion: List[List[int]]
    num_tiles: int
    taxonomy_digest: str


def _maybe_miou(ious: np.ndarray, subset: List[int], include_undefined: bool) -> Optional[float]:
    if not subset:
        return None
    try:
        return 100.0 * miou(ious, subset, include_undefined)
    except NoDefinedIoUError:
        logger.warning(f"No defined IoU for classes {subset}")
        return None


def evaluate_tiles(
    pairs: Iterable[Tuple[LabelMap, LabelMap]],
    taxonomy: ClassTaxonomy,
    include_undefined: bool = False,
) -> EvaluationReport:
    """Score (prediction, truth) label map pairs against one taxonomy"""
    cm = ConfusionMatrix.zeros(taxonomy.num_classes)
    n = 0
    for pred, truth in pairs:
        cm = cm + accumulate_confusion(pred, truth, taxonomy.num_classes)
        n += 1
    ious = iou_per_class(cm)

    base = _maybe_miou(ious, list(taxonomy.base_ids), include_undefined)
    novel = _maybe_miou(ious, list(taxonomy.novel_ids), include_undefined)
    total = challenge_score(base, novel) if base is not None and novel is not None else None
    logger.info(f"Evaluated {n} tiles: base mIoU {base}, novel mIoU {novel}, score {total}")
    return EvaluationReport(
        class_names={i: taxonomy.name_of(i) for i in taxonomy.all_ids},
        iou={i: (None if np.isnan(ious[i]) else 100.0 * float(ious[i])) for i in taxonomy.all_ids},
        base_miou=base,
        novel_miou=novel,
        total_score=total,
        confusion=cm.counts.tolist(),
        num_tiles=n,
        taxonomy_digest=taxonomy.digest(),
    )


def plot_report(report: EvaluationReport, out_dir: Union[str, Path]) -> List[Path]:
    """IoU bar chart and row-normalized confusion heatmap as PNG"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = sorted(report.iou)
    names = [report.class_names.get(i, str(i)) for i in ids]
    values = [report.iou[i] if report.iou[i] is not None else 0.0 for i in ids]

    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(ids)), 4))
    ax.bar(range(len(ids)), values, color="#4c72b0")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    title = "Per-class IoU"
    if report.total_score is not None:
        title += f" (score {report.total_score:.2f})"
    ax.set_title(title)
    fig.tight_layout()
    bar_path = out_dir / "iou.png"
    fig.savefig(bar_path, dpi=100, metadata={"Software": None})
    plt.close(fig)

    counts = np.asarray(report.confusion, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(normalized, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(names)))
    ax.set_yticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_yticklabels(names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Truth")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    heat_path = out_dir / "confusion.png"
    fig.savefig(heat_path, dpi=100, metadata={"Software": None})
    plt.close(fig)

    logger.info(f"Plots written to {out_dir}")
    return [bar_path, heat_path]
