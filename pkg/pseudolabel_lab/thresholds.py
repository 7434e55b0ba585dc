"""Dataset-wide per-class thresholds on softmax scores and entropies.

Both thresholds start from the per-class median of the confidence values of
every target pixel whose arg max is that class. Softmax thresholds are capped
from above by ``mu_star``; entropy thresholds are floored by ``nu_star``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from pseudolabel_lab.confidence import ConfidenceKind, confidence_values
from pseudolabel_lab.mapcore import EntropyMap, PathLike, ProbMap
from pseudolabel_lab.settings import THRESHOLDS_SCHEMA, dump_json, load_json, validate_config
from pseudolabel_lab.workers import map_ordered

logger = logging.getLogger(__name__)

DEFAULT_MU_STAR = 0.9
DEFAULT_NU_STAR = 0.1

NO_SAMPLES = "no-samples"
CLAMPED = "clamped"
MEDIAN = "median"


class ClassSampleBag:
    """Per-class confidence samples gathered over a set of images.

    Samples for class ``c`` come only from pixels whose arg max is ``c``.
    The kind is fixed at construction.
    """

    def __init__(self, num_classes: int, kind: ConfidenceKind) -> None:
        if num_classes < 2:
            raise ValueError(f"need at least two classes, got {num_classes}")
        self.num_classes = int(num_classes)
        self.kind = ConfidenceKind(kind)
        self._chunks: List[List[np.ndarray]] = [[] for _ in range(self.num_classes)]

    def samples(self, class_id: int) -> np.ndarray:
        """All samples of one class as a float64 array (insertion order)."""
        chunks = self._chunks[class_id]
        if not chunks:
            return np.empty(0, dtype=np.float64)
        return np.concatenate(chunks)

    def counts(self) -> np.ndarray:
        return np.array([sum(chunk.size for chunk in chunks) for chunks in self._chunks], dtype=np.int64)

    def __repr__(self) -> str:
        counts = self.counts().tolist()
        return f"ClassSampleBag(num_classes={self.num_classes}, kind={self.kind.value}, counts={counts})"


def accumulate(bag: ClassSampleBag, prob: ProbMap, entropy: Optional[EntropyMap] = None) -> ClassSampleBag:
    """Append one sample per pixel of ``prob`` to the bag of its arg-max class.

    Args:
        bag: the bag to extend in place.
        prob: a probability map with ``bag.num_classes`` channels.
        entropy: precomputed entropy of ``prob``; computed when omitted and
            the bag collects entropies.

    Returns:
        ``bag`` itself.

    Raises:
        ValueError: on a class-count mismatch.
    """
    if prob.num_classes != bag.num_classes:
        raise ValueError(f"bag has {bag.num_classes} classes, probability map has {prob.num_classes}")
    labels = np.argmax(prob.values, axis=2).ravel()
    values = confidence_values(prob, bag.kind, entropy).ravel()
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=bag.num_classes)
    for class_id, chunk in enumerate(np.split(values[order], np.cumsum(counts)[:-1])):
        if chunk.size:
            bag._chunks[class_id].append(chunk)
    return bag


def merge(a: ClassSampleBag, b: ClassSampleBag) -> ClassSampleBag:
    """Per-class multiset union of two bags; neither input is modified.

    Raises:
        ValueError: if kinds or class counts differ.
    """
    if a.kind is not b.kind:
        raise ValueError(f"cannot merge a {a.kind.value} bag with a {b.kind.value} bag")
    if a.num_classes != b.num_classes:
        raise ValueError(f"cannot merge bags with {a.num_classes} and {b.num_classes} classes")
    merged = ClassSampleBag(a.num_classes, a.kind)
    for class_id in range(a.num_classes):
        merged._chunks[class_id] = list(a._chunks[class_id]) + list(b._chunks[class_id])
    return merged


def collect(
    probs: Sequence[ProbMap],
    kind: ConfidenceKind,
    entropies: Optional[Sequence[EntropyMap]] = None,
    jobs: Optional[int] = None,
) -> ClassSampleBag:
    """Accumulate a whole dataset, one private bag per shard, merged in shard order."""
    if not probs:
        raise ValueError("need at least one probability map")
    num_classes = probs[0].num_classes
    pairs = list(zip(probs, entropies if entropies is not None else [None] * len(probs)))
    shards = max(1, min(len(pairs), jobs or 1))
    bounds = np.linspace(0, len(pairs), shards + 1).astype(int)

    def build(shard: int) -> ClassSampleBag:
        bag = ClassSampleBag(num_classes, kind)
        lo, hi = bounds[shard], bounds[shard + 1]
        for prob, entropy in pairs[lo:hi]:
            accumulate(bag, prob, entropy)
        return bag

    bags = map_ordered(build, range(shards), jobs)
    result = bags[0]
    for bag in bags[1:]:
        result = merge(result, bag)
    return result


def median_index(count: int, kind: ConfidenceKind) -> int:
    """Index into the ascending sort of ``count`` samples that holds the median.

    For even counts the less-confident middle element is used: the lower one
    for softmax scores, the upper one for entropies.
    """
    if count < 1:
        raise ValueError("median of an empty sample set")
    if ConfidenceKind(kind) is ConfidenceKind.SOFTMAX:
        return (count + 1) // 2 - 1
    return count // 2


def class_median(samples: np.ndarray, kind: ConfidenceKind) -> Optional[float]:
    if samples.size == 0:
        return None
    k = median_index(samples.size, kind)
    return float(np.partition(samples, k)[k])


@dataclass(frozen=True, eq=False)
class ClassThresholds:
    """Per-class thresholds ``mu^(c)`` (softmax) or ``nu^(c)`` (entropy).

    ``hyper`` is the governing ``mu_star`` / ``nu_star``; ``None`` means the
    thresholds are the bare medians.
    """

    kind: ConfidenceKind
    hyper: Optional[float]
    values: np.ndarray
    counts: np.ndarray
    medians: Tuple[Optional[float], ...]

    def __post_init__(self) -> None:
        kind = ConfidenceKind(self.kind)
        values = np.array(self.values, dtype=np.float64, copy=True)
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        medians = tuple(None if m is None else float(m) for m in self.medians)
        if not values.ndim == counts.ndim == 1 or not values.size == counts.size == len(medians):
            raise ValueError("values, counts and medians must be length-C vectors")
        if self.hyper is not None:
            if kind is ConfidenceKind.SOFTMAX and np.any(values > self.hyper):
                raise ValueError(f"softmax thresholds must not exceed mu_star={self.hyper}")
            if kind is ConfidenceKind.ENTROPY and np.any(values < self.hyper):
                raise ValueError(f"entropy thresholds must not fall below nu_star={self.hyper}")
        values.flags.writeable = False
        counts.flags.writeable = False
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "hyper", None if self.hyper is None else float(self.hyper))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "medians", medians)

    @property
    def num_classes(self) -> int:
        return int(self.values.size)


def _check_hyper(name: str, value: float) -> float:
    if not 0.0 < value <= 1.0:
        raise ValueError(f"{name} must lie in (0, 1], got {value}")
    return float(value)


def _medians(bag: ClassSampleBag) -> List[Optional[float]]:
    return [class_median(bag.samples(c), bag.kind) for c in range(bag.num_classes)]


def _require_kind(bag: ClassSampleBag, kind: ConfidenceKind) -> None:
    if bag.kind is not kind:
        raise ValueError(f"expected a {kind.value} bag, got a {bag.kind.value} bag")


def _warn_empty(medians: Sequence[Optional[float]]) -> None:
    empty = [c for c, m in enumerate(medians) if m is None]
    if empty:
        logger.warning("No pixel is predicted as class(es) %s; using the fallback threshold", empty)


def clamp_medians(
    kind: ConfidenceKind,
    medians: Sequence[Optional[float]],
    counts: Sequence[int],
    hyper: Optional[float],
) -> ClassThresholds:
    """Turn per-class medians into thresholds under ``hyper``.

    Softmax: ``min(mu_star, median)``; entropy: ``max(nu_star, median)``.
    A class without samples gets ``hyper`` itself, or, with no hyperparameter,
    a threshold that admits nothing (1.0 for scores, 0.0 for entropies).
    """
    kind = ConfidenceKind(kind)
    values = []
    for median in medians:
        if median is None:
            if hyper is not None:
                values.append(hyper)
            else:
                values.append(1.0 if kind is ConfidenceKind.SOFTMAX else 0.0)
        elif hyper is None:
            values.append(median)
        elif kind is ConfidenceKind.SOFTMAX:
            values.append(min(hyper, median))
        else:
            values.append(max(hyper, median))
    return ClassThresholds(kind, hyper, np.array(values), np.asarray(counts), tuple(medians))


def compute_mu(bag: ClassSampleBag, mu_star: float = DEFAULT_MU_STAR) -> ClassThresholds:
    """Softmax thresholds ``mu^(c) = min(mu_star, median_c)``."""
    _require_kind(bag, ConfidenceKind.SOFTMAX)
    mu_star = _check_hyper("mu_star", mu_star)
    medians = _medians(bag)
    _warn_empty(medians)
    return clamp_medians(ConfidenceKind.SOFTMAX, medians, bag.counts(), mu_star)


def compute_nu(bag: ClassSampleBag, nu_star: float = DEFAULT_NU_STAR) -> ClassThresholds:
    """Entropy thresholds ``nu^(c) = max(nu_star, median_c)``."""
    _require_kind(bag, ConfidenceKind.ENTROPY)
    nu_star = _check_hyper("nu_star", nu_star)
    medians = _medians(bag)
    _warn_empty(medians)
    return clamp_medians(ConfidenceKind.ENTROPY, medians, bag.counts(), nu_star)


def compute_median_thresholds(bag: ClassSampleBag) -> ClassThresholds:
    """Unclamped per-class medians, the limit case of the threshold sweep."""
    medians = _medians(bag)
    _warn_empty(medians)
    return clamp_medians(bag.kind, medians, bag.counts(), None)


def reclamp(thresholds: ClassThresholds, hyper: Optional[float]) -> ClassThresholds:
    """Recompute thresholds from their stored medians under another hyperparameter."""
    if hyper is not None:
        hyper = _check_hyper("hyperparameter", hyper)
    return clamp_medians(thresholds.kind, thresholds.medians, thresholds.counts, hyper)


def thresholds_report(thresholds: ClassThresholds) -> Dict[str, Any]:
    """JSON-ready per-class report: count, median, clamp decision and threshold."""
    classes = []
    for class_id in range(thresholds.num_classes):
        median = thresholds.medians[class_id]
        threshold = float(thresholds.values[class_id])
        if median is None:
            status, clamped = NO_SAMPLES, False
        else:
            clamped = threshold != median
            status = CLAMPED if clamped else MEDIAN
        classes.append(
            {
                "id": class_id,
                "count": int(thresholds.counts[class_id]),
                "median": median,
                "threshold": threshold,
                "clamped": clamped,
                "status": status,
            }
        )
    return {"kind": thresholds.kind.value, "hyper": thresholds.hyper, "classes": classes}


def thresholds_from_report(report: Dict[str, Any]) -> ClassThresholds:
    """Rebuild thresholds from a report produced by :func:`thresholds_report`."""
    report = validate_config(report, THRESHOLDS_SCHEMA, "thresholds file")
    classes = sorted(report["classes"], key=lambda row: row["id"])
    if [row["id"] for row in classes] != list(range(len(classes))):
        raise ValueError("thresholds file must list class ids 0..C-1 exactly once")
    return ClassThresholds(
        kind=ConfidenceKind(report["kind"]),
        hyper=report.get("hyper"),
        values=np.array([row["threshold"] for row in classes], dtype=np.float64),
        counts=np.array([row["count"] for row in classes], dtype=np.int64),
        medians=tuple(row.get("median") for row in classes),
    )


def write_thresholds(thresholds: ClassThresholds, path: PathLike) -> None:
    dump_json(thresholds_report(thresholds), path)


def read_thresholds(path: PathLike) -> ClassThresholds:
    return thresholds_from_report(load_json(path))


def compute_thresholds(
    probs: Sequence[ProbMap],
    kind: ConfidenceKind,
    hyper: Optional[float],
    entropies: Optional[Sequence[EntropyMap]] = None,
    jobs: Optional[int] = None,
) -> ClassThresholds:
    """Collect a dataset and compute thresholds in one call; ``hyper=None`` gives bare medians."""
    bag = collect(probs, kind, entropies, jobs)
    if hyper is None:
        return compute_median_thresholds(bag)
    if bag.kind is ConfidenceKind.SOFTMAX:
        return compute_mu(bag, hyper)
    return compute_nu(bag, hyper)
