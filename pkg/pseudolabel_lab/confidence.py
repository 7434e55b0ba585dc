"""Per-pixel confidence: normalized Shannon entropy and max-softmax score."""

from __future__ import annotations

import math
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from pseudolabel_lab.mapcore import (
    ENTROPY_TOLERANCE,
    SUM_TOLERANCE,
    EntropyMap,
    ProbMap,
    max_score_map,
)
from pseudolabel_lab.workers import map_ordered


class ConfidenceKind(str, Enum):
    """The two competing confidence measures."""

    SOFTMAX = "softmax"
    ENTROPY = "entropy"


class EntropyRangeError(ArithmeticError):
    """A normalized entropy fell outside [0, 1] by more than roundoff."""


def _clamp(value: float) -> float:
    if value < -ENTROPY_TOLERANCE or value > 1.0 + ENTROPY_TOLERANCE:
        raise EntropyRangeError(f"normalized entropy {value!r} is outside [0, 1]")
    return min(max(value, 0.0), 1.0)


def entropy_of_distribution(p: Sequence[float], base: Optional[float] = None) -> float:
    """Normalized entropy ``-sum(p log p) / log C`` of one probability vector.

    Zero entries contribute nothing. The sum is exactly rounded (``math.fsum``)
    so the result does not depend on the order of ``p``.

    Args:
        p: probabilities, length ``C >= 2``.
        base: logarithm base; ``None`` for natural log. The normalization
            makes the result base independent up to roundoff.

    Returns:
        The normalized entropy in ``[0, 1]``.

    Raises:
        ValueError: if ``p`` is shorter than 2, has entries outside ``[0, 1]``
            or does not sum to 1 within 1e-4.
    """
    values = np.asarray(p, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ValueError(f"need a probability vector of length >= 2, got shape {values.shape}")
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    if abs(math.fsum(values.tolist()) - 1.0) > SUM_TOLERANCE:
        raise ValueError("probabilities must sum to 1")

    def log(x: float) -> float:
        return math.log(x) if base is None else math.log(x, base)

    total = math.fsum(x * log(x) for x in values.tolist() if x > 0.0)
    return _clamp(-total / log(values.size))


def entropy_map(prob: ProbMap) -> EntropyMap:
    """Normalized entropy of every pixel of ``prob``.

    Each pixel is renormalized to sum to 1 in float64, so float32 storage
    roundoff (a uniform pixel stored as ``float32(1/C)``) cannot push the
    entropy above 1. Sums and channel terms are accumulated in sorted order,
    so the result does not depend on channel order, then rounded once to
    float32.

    Raises:
        EntropyRangeError: a pixel's entropy left [0, 1] by more than 1e-9.
    """
    p = prob.values.astype(np.float64)
    p = p / np.sort(p, axis=2).sum(axis=2, keepdims=True)
    log_p = np.zeros_like(p)
    np.log(p, out=log_p, where=p > 0.0)
    terms = np.sort(p * log_p, axis=2)
    entropy = -terms.sum(axis=2) / math.log(prob.num_classes)
    if entropy.min() < -ENTROPY_TOLERANCE or entropy.max() > 1.0 + ENTROPY_TOLERANCE:
        h, w = np.unravel_index(int(np.argmax(np.abs(entropy - 0.5))), entropy.shape)
        raise EntropyRangeError(f"normalized entropy {entropy[h, w]!r} at pixel ({h}, {w}) is outside [0, 1]")
    return EntropyMap(np.clip(entropy, 0.0, 1.0))


def entropy_maps(probs: Iterable[ProbMap], jobs: Optional[int] = None) -> List[EntropyMap]:
    """:func:`entropy_map` over many images, results in input order."""
    return map_ordered(entropy_map, probs, jobs)


def confidence_values(
    prob: ProbMap,
    kind: ConfidenceKind,
    entropy: Optional[EntropyMap] = None,
) -> np.ndarray:
    """Per-pixel confidence samples as float64: max score or entropy."""
    kind = ConfidenceKind(kind)
    if kind is ConfidenceKind.SOFTMAX:
        return max_score_map(prob).astype(np.float64)
    entropy = entropy if entropy is not None else entropy_map(prob)
    if entropy.values.shape != (prob.height, prob.width):
        raise ValueError(
            f"entropy map {entropy.values.shape} does not match probability map {(prob.height, prob.width)}"
        )
    return entropy.values.astype(np.float64)


def entropy_range_for_max_score(max_score: float, num_classes: int) -> Tuple[float, float]:
    """Lowest and highest normalized entropy of a pixel whose top score is ``max_score``.

    The lowest entropy packs the remaining mass into as few classes as
    possible; the highest spreads it evenly over the other ``C - 1`` classes.
    For ``C = 19`` and a top score of 0.95 this gives about 0.0674 and 0.1165.
    """
    if num_classes < 2:
        raise ValueError(f"need at least two classes, got {num_classes}")
    if not 1.0 / num_classes <= max_score <= 1.0:
        raise ValueError(f"a top score of {max_score} is impossible with {num_classes} classes")

    best = [max_score]
    remaining = 1.0 - max_score
    while remaining > 0.0 and len(best) < num_classes:
        share = min(max_score, remaining)
        best.append(share)
        remaining -= share
    best += [0.0] * (num_classes - len(best))

    rest = (1.0 - max_score) / (num_classes - 1)
    worst = [max_score] + [rest] * (num_classes - 1)
    return entropy_of_distribution(best), entropy_of_distribution(worst)
