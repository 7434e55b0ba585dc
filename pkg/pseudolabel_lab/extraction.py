"""Pseudo-label extraction by max-softmax (SSL) or entropy (ESL) thresholds."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Optional, Tuple

import numpy as np

from pseudolabel_lab.confidence import ConfidenceKind, entropy_map
from pseudolabel_lab.mapcore import NULL, EntropyMap, ProbMap, PseudoLabelMap
from pseudolabel_lab.thresholds import ClassThresholds


class DiffCategory(IntEnum):
    """Per-pixel relation between an SSL and an ESL pseudo-label map."""

    BOTH_NULL = 0
    AGREE = 1
    SSL_ONLY = 2
    ESL_ONLY = 3
    CONFLICT = 4

    @property
    def key(self) -> str:
        return self.name.lower().replace("_", "-")


@dataclass(frozen=True, eq=False)
class PseudoLabelDiff:
    categories: np.ndarray
    counts: Dict[str, int]


@dataclass(frozen=True)
class Coverage:
    fraction: float
    per_class_counts: Tuple[int, ...]
    labeled: int
    total: int


def _check_classes(prob: ProbMap, thresholds: ClassThresholds, kind: ConfidenceKind) -> None:
    if thresholds.kind is not kind:
        raise ValueError(f"expected {kind.value} thresholds, got {thresholds.kind.value}")
    if thresholds.num_classes != prob.num_classes:
        raise ValueError(
            f"thresholds cover {thresholds.num_classes} classes, probability map has {prob.num_classes}"
        )


def extract_ssl(prob: ProbMap, mu: ClassThresholds) -> PseudoLabelMap:
    """Keep the arg-max class where its softmax score is strictly above ``mu[c]``.

    Every other pixel gets ``NULL``.

    Raises:
        ValueError: on a class-count or threshold-kind mismatch.
    """
    _check_classes(prob, mu, ConfidenceKind.SOFTMAX)
    labels = np.argmax(prob.values, axis=2)
    scores = prob.values.max(axis=2).astype(np.float64)
    keep = scores > mu.values[labels]
    return PseudoLabelMap(np.where(keep, labels, NULL), prob.num_classes)


def extract_esl(prob: ProbMap, ent: EntropyMap, nu: ClassThresholds) -> PseudoLabelMap:
    """Keep the arg-max class where the pixel entropy is strictly below ``nu[c]``.

    ``ent`` must be ``entropy_map(prob)``; it is passed in so one entropy pass
    serves thresholding, extraction and rendering.

    Raises:
        ValueError: on a dimension, class-count or threshold-kind mismatch.
    """
    _check_classes(prob, nu, ConfidenceKind.ENTROPY)
    if ent.values.shape != (prob.height, prob.width):
        raise ValueError(f"entropy map {ent.values.shape} does not match probability map {(prob.height, prob.width)}")
    labels = np.argmax(prob.values, axis=2)
    keep = ent.values.astype(np.float64) < nu.values[labels]
    return PseudoLabelMap(np.where(keep, labels, NULL), prob.num_classes)


def extract(prob: ProbMap, thresholds: ClassThresholds, ent: Optional[EntropyMap] = None) -> PseudoLabelMap:
    """Dispatch on the threshold kind."""
    if thresholds.kind is ConfidenceKind.SOFTMAX:
        return extract_ssl(prob, thresholds)
    return extract_esl(prob, ent if ent is not None else entropy_map(prob), thresholds)


def _check_same_shape(a: PseudoLabelMap, b: PseudoLabelMap) -> None:
    if a.labels.shape != b.labels.shape:
        raise ValueError(f"pseudo-label maps differ in size: {a.labels.shape} vs {b.labels.shape}")


def pseudo_label_diff(ssl: PseudoLabelMap, esl: PseudoLabelMap) -> PseudoLabelDiff:
    """Classify every pixel as both-null, agree, ssl-only, esl-only or conflict."""
    _check_same_shape(ssl, esl)
    in_ssl, in_esl = ssl.labeled, esl.labeled
    categories = np.full(ssl.labels.shape, DiffCategory.BOTH_NULL, dtype=np.uint8)
    both = in_ssl & in_esl
    categories[both & (ssl.labels == esl.labels)] = DiffCategory.AGREE
    categories[both & (ssl.labels != esl.labels)] = DiffCategory.CONFLICT
    categories[in_ssl & ~in_esl] = DiffCategory.SSL_ONLY
    categories[~in_ssl & in_esl] = DiffCategory.ESL_ONLY
    tally = np.bincount(categories.ravel(), minlength=len(DiffCategory))
    categories.flags.writeable = False
    return PseudoLabelDiff(categories, {c.key: int(tally[c]) for c in DiffCategory})


def excluded_by_entropy(ssl: PseudoLabelMap, esl: PseudoLabelMap) -> PseudoLabelMap:
    """SSL pseudo-labels that the entropy criterion dropped; everything else ``NULL``."""
    _check_same_shape(ssl, esl)
    dropped = ssl.labeled & ~esl.labeled
    return PseudoLabelMap(np.where(dropped, ssl.labels, NULL), ssl.num_classes)


def coverage(labels: PseudoLabelMap) -> Coverage:
    """Fraction of labeled pixels and the per-class label histogram."""
    mask = labels.labeled
    per_class = np.bincount(labels.labels[mask], minlength=labels.num_classes)
    total = labels.labels.size
    labeled = int(mask.sum())
    return Coverage(labeled / total, tuple(int(n) for n in per_class), labeled, total)
