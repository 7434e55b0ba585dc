"""Segmentation metrics: confusion, IoU/mIoU, pseudo-label incorrect ratios.

Undefined entries (a class with an empty IoU denominator, a class without
pseudo-labels, a zero baseline) are ``None``, never 0 or NaN, and are left
out of every mean. CSV output leaves them empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pseudolabel_lab.mapcore import LabelMap, PathLike, PseudoLabelMap
from pseudolabel_lab.settings import dump_json, load_json

OptionalFloats = Tuple[Optional[float], ...]


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """``C x C`` pixel tallies, rows are ground truth and columns predictions.

    ``void_pixels`` counts pixels skipped because the ground truth is VOID;
    ``null_pixels`` counts pixels skipped because the prediction is a NULL
    pseudo-label (only for pseudo-label tallies).
    """

    counts: np.ndarray
    void_pixels: int = 0
    null_pixels: int = 0

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion counts must be square, got {counts.shape}")
        if counts.min(initial=0) < 0 or self.void_pixels < 0 or self.null_pixels < 0:
            raise ValueError("confusion counts must be non-negative")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError(f"cannot add {self.num_classes}- and {other.num_classes}-class confusion matrices")
        return ConfusionMatrix(
            self.counts + other.counts,
            self.void_pixels + other.void_pixels,
            self.null_pixels + other.null_pixels,
        )


def _tally(pred_ids: np.ndarray, gt_ids: np.ndarray, num_classes: int) -> np.ndarray:
    flat = gt_ids.astype(np.int64) * num_classes + pred_ids.astype(np.int64)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _check_pair(pred, gt: LabelMap) -> None:
    if pred.labels.shape != gt.labels.shape:
        raise ValueError(f"prediction {pred.labels.shape} and ground truth {gt.labels.shape} differ in size")
    if pred.num_classes != gt.num_classes:
        raise ValueError(f"prediction has {pred.num_classes} classes, ground truth has {gt.num_classes}")


def confusion(pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    """Tally a predicted label map against ground truth, skipping VOID ground truth.

    Raises:
        ValueError: on a size or class-count mismatch, or a VOID prediction.
    """
    _check_pair(pred, gt)
    if not pred.labeled.all():
        raise ValueError("predicted label maps must not contain VOID pixels")
    valid = gt.labeled
    counts = _tally(pred.labels[valid], gt.labels[valid], gt.num_classes)
    return ConfusionMatrix(counts, void_pixels=int((~valid).sum()))


def pseudo_confusion(pseudo: PseudoLabelMap, gt: LabelMap) -> ConfusionMatrix:
    """Tally pseudo-labels against ground truth, skipping NULL pseudo-labels and VOID ground truth."""
    _check_pair(pseudo, gt)
    valid = gt.labeled
    labeled = pseudo.labeled
    keep = valid & labeled
    counts = _tally(pseudo.labels[keep], gt.labels[keep], gt.num_classes)
    return ConfusionMatrix(counts, void_pixels=int((~valid).sum()), null_pixels=int((valid & ~labeled).sum()))


def sum_confusions(matrices: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    matrices = list(matrices)
    if not matrices:
        raise ValueError("need at least one confusion matrix")
    total = matrices[0]
    for cm in matrices[1:]:
        total = total + cm
    return total


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return math.fsum(defined) / len(defined) if defined else None


@dataclass(frozen=True)
class IoUResult:
    per_class: OptionalFloats
    miou: Optional[float]
    pixel_accuracy: Optional[float]


def iou(cm: ConfusionMatrix, class_subset: Optional[Sequence[int]] = None) -> IoUResult:
    """Per-class ``TP / (TP + FP + FN)`` and their mean over defined classes.

    Args:
        cm: the confusion matrix.
        class_subset: when given, only these classes enter the mean.
    """
    counts = cm.counts
    tp = np.diag(counts)
    denominator = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per_class = tuple(
        float(tp[c]) / float(denominator[c]) if denominator[c] > 0 else None for c in range(cm.num_classes)
    )
    subset = range(cm.num_classes) if class_subset is None else sorted(set(class_subset))
    for c in subset:
        if not 0 <= c < cm.num_classes:
            raise ValueError(f"class {c} is not in [0, {cm.num_classes})")
    accuracy = float(tp.sum()) / cm.total if cm.total else None
    return IoUResult(per_class, _mean(per_class[c] for c in subset), accuracy)


@dataclass(frozen=True)
class IncorrectRatio:
    """Share of pseudo-labels of each class whose ground truth is another class."""

    per_class: OptionalFloats
    global_ratio: Optional[float]
    labeled_counts: Tuple[int, ...]
    wrong_counts: Tuple[int, ...]


def incorrect_ratio_from_confusion(cm: ConfusionMatrix) -> IncorrectRatio:
    labeled = cm.counts.sum(axis=0)
    wrong = labeled - np.diag(cm.counts)
    per_class = tuple(float(wrong[c]) / float(labeled[c]) if labeled[c] > 0 else None for c in range(cm.num_classes))
    total = int(labeled.sum())
    global_ratio = float(wrong.sum()) / total if total else None
    return IncorrectRatio(per_class, global_ratio, tuple(int(n) for n in labeled), tuple(int(n) for n in wrong))


def incorrect_ratio(pseudo: PseudoLabelMap, gt: LabelMap) -> IncorrectRatio:
    """Per-class and global incorrect-prediction ratios of one pseudo-label map."""
    return incorrect_ratio_from_confusion(pseudo_confusion(pseudo, gt))


def _percent_change(new: Optional[float], base: Optional[float]) -> Optional[float]:
    if new is None or base is None or base == 0:
        return None
    return 100.0 * (new - base) / base


@dataclass(frozen=True)
class RelativeChange:
    """Signed percentage change ``100 * (new - base) / base`` per class and overall."""

    metric: str
    baseline: str
    per_class: OptionalFloats
    overall: Optional[float]


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation of one model or one pseudo-label set.

    IoU fields come from a prediction tally, incorrect ratios and coverage
    from a pseudo-label tally; either half may be absent.
    """

    name: str
    num_classes: int
    per_class_iou: OptionalFloats = ()
    miou: Optional[float] = None
    pixel_accuracy: Optional[float] = None
    gt_counts: Tuple[int, ...] = ()
    per_class_incorrect_ratio: OptionalFloats = ()
    global_incorrect_ratio: Optional[float] = None
    pseudo_counts: Tuple[int, ...] = ()
    coverage: Optional[float] = None
    relative_change: Optional[RelativeChange] = field(default=None, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        change = self.relative_change
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "per_class_iou": list(self.per_class_iou),
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "gt_counts": list(self.gt_counts),
            "per_class_incorrect_ratio": list(self.per_class_incorrect_ratio),
            "global_incorrect_ratio": self.global_incorrect_ratio,
            "pseudo_counts": list(self.pseudo_counts),
            "coverage": self.coverage,
            "relative_change": None
            if change is None
            else {
                "metric": change.metric,
                "baseline": change.baseline,
                "per_class": list(change.per_class),
                "overall": change.overall,
            },
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        change = data.get("relative_change")
        return cls(
            name=data["name"],
            num_classes=int(data["num_classes"]),
            per_class_iou=tuple(data.get("per_class_iou", ())),
            miou=data.get("miou"),
            pixel_accuracy=data.get("pixel_accuracy"),
            gt_counts=tuple(data.get("gt_counts", ())),
            per_class_incorrect_ratio=tuple(data.get("per_class_incorrect_ratio", ())),
            global_incorrect_ratio=data.get("global_incorrect_ratio"),
            pseudo_counts=tuple(data.get("pseudo_counts", ())),
            coverage=data.get("coverage"),
            relative_change=None
            if change is None
            else RelativeChange(change["metric"], change["baseline"], tuple(change["per_class"]), change["overall"]),
        )

    def to_frame(self) -> pd.DataFrame:
        """One row per class plus a ``global`` summary row."""

        def column(values: Sequence[Any]) -> List[Any]:
            return list(values) if values else [None] * self.num_classes

        frame = pd.DataFrame(
            {
                "id": [str(c) for c in range(self.num_classes)],
                "iou": column(self.per_class_iou),
                "incorrect_ratio": column(self.per_class_incorrect_ratio),
                "count": column(self.gt_counts),
                "pseudo_count": column(self.pseudo_counts),
            },
            dtype=object,
        )
        summary = {
            "id": "global",
            "iou": self.miou,
            "incorrect_ratio": self.global_incorrect_ratio,
            "count": sum(self.gt_counts) if self.gt_counts else None,
            "pseudo_count": sum(self.pseudo_counts) if self.pseudo_counts else None,
        }
        if self.relative_change is not None:
            frame["relative_change"] = list(self.relative_change.per_class)
            summary["relative_change"] = self.relative_change.overall
        return pd.concat([frame, pd.DataFrame([summary], dtype=object)], ignore_index=True)


def build_report(
    name: str,
    prediction: Optional[ConfusionMatrix] = None,
    pseudo: Optional[ConfusionMatrix] = None,
    class_subset: Optional[Sequence[int]] = None,
) -> MetricsReport:
    """Assemble a report from a prediction tally and/or a pseudo-label tally."""
    if prediction is None and pseudo is None:
        raise ValueError("need a prediction or a pseudo-label confusion matrix")
    num_classes = (prediction or pseudo).num_classes
    fields: Dict[str, Any] = {}
    if prediction is not None:
        scores = iou(prediction, class_subset)
        fields.update(
            per_class_iou=scores.per_class,
            miou=scores.miou,
            pixel_accuracy=scores.pixel_accuracy,
            gt_counts=tuple(int(n) for n in prediction.counts.sum(axis=1)),
        )
    if pseudo is not None:
        if pseudo.num_classes != num_classes:
            raise ValueError("prediction and pseudo-label tallies differ in class count")
        ratios = incorrect_ratio_from_confusion(pseudo)
        evaluated = pseudo.total + pseudo.null_pixels
        fields.update(
            per_class_incorrect_ratio=ratios.per_class,
            global_incorrect_ratio=ratios.global_ratio,
            pseudo_counts=ratios.labeled_counts,
            coverage=pseudo.total / evaluated if evaluated else None,
        )
    return MetricsReport(name=name, num_classes=num_classes, **fields)


_CHANGE_FIELDS = {
    "incorrect_ratio": ("per_class_incorrect_ratio", "global_incorrect_ratio"),
    "iou": ("per_class_iou", "miou"),
}


def relative_change(new: MetricsReport, base: MetricsReport, metric: str = "incorrect_ratio") -> RelativeChange:
    """Signed percentage change of ``new`` against ``base``.

    Args:
        new: the report being compared.
        base: the baseline report.
        metric: ``incorrect_ratio`` (per class and global) or ``iou`` (per
            class and mIoU).
    """
    if new.num_classes != base.num_classes:
        raise ValueError(f"reports cover {new.num_classes} and {base.num_classes} classes")
    per_class_field, overall_field = _CHANGE_FIELDS[metric]
    new_values = getattr(new, per_class_field) or (None,) * new.num_classes
    base_values = getattr(base, per_class_field) or (None,) * base.num_classes
    return RelativeChange(
        metric=metric,
        baseline=base.name,
        per_class=tuple(_percent_change(n, b) for n, b in zip(new_values, base_values)),
        overall=_percent_change(getattr(new, overall_field), getattr(base, overall_field)),
    )


def _percent(value: Optional[float]) -> str:
    return "" if value is None else f"{100.0 * value:.1f}"


def format_report(report: MetricsReport) -> str:
    """Plain-text table in percent with one decimal."""
    miou = _percent(report.miou) or "-"
    incorrect = _percent(report.global_incorrect_ratio) or "-"
    lines = [f"{report.name}: mIoU {miou}  global incorrect {incorrect}"]
    frame = report.to_frame()
    for row in frame.itertuples(index=False):
        lines.append(f"  {row.id:>6}  iou {_percent(row.iou):>5}  incorrect {_percent(row.incorrect_ratio):>5}")
    return "\n".join(lines)


def write_report(report: MetricsReport, out_dir: PathLike, stem: str = "metrics") -> Tuple[Path, Path]:
    """Write ``<stem>.json`` (full precision) and ``<stem>.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = dump_json(report.to_dict(), out_dir / f"{stem}.json")
    csv_path = out_dir / f"{stem}.csv"
    report.to_frame().to_csv(csv_path, index=False, na_rep="")
    return json_path, csv_path


def read_report(path: PathLike) -> MetricsReport:
    return MetricsReport.from_dict(load_json(path))
