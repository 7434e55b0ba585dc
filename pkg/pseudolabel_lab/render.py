"""Indexed-PNG views of label, pseudo-label and diff maps.

Palette: classes 0-18 use the fixed colors below, higher ids cycle through
them; index 255 (VOID / NULL) is black. Diff maps use black for both-null
and four fixed colors for agree, ssl-only, esl-only and conflict.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from pseudolabel_lab.extraction import DiffCategory, PseudoLabelDiff, excluded_by_entropy
from pseudolabel_lab.mapcore import NULL, LabelMap, PathLike, PseudoLabelMap

Color = Tuple[int, int, int]

CLASS_COLORS: Tuple[Color, ...] = (
    (128, 64, 128),
    (244, 35, 232),
    (70, 70, 70),
    (102, 102, 156),
    (190, 153, 153),
    (153, 153, 153),
    (250, 170, 30),
    (220, 220, 0),
    (107, 142, 35),
    (152, 251, 152),
    (70, 130, 180),
    (220, 20, 60),
    (255, 0, 0),
    (0, 0, 142),
    (0, 0, 70),
    (0, 60, 100),
    (0, 80, 100),
    (0, 0, 230),
    (119, 11, 32),
)

DIFF_COLORS = {
    DiffCategory.BOTH_NULL: (0, 0, 0),
    DiffCategory.AGREE: (255, 255, 255),
    DiffCategory.SSL_ONLY: (230, 25, 75),
    DiffCategory.ESL_ONLY: (60, 180, 75),
    DiffCategory.CONFLICT: (255, 225, 25),
}

PANEL_GAP = 2


def _palette(colors: Sequence[Color]) -> List[int]:
    flat: List[int] = []
    for color in colors:
        flat.extend(color)
    return flat + [0] * (768 - len(flat))


def class_palette() -> List[int]:
    colors = [CLASS_COLORS[i % len(CLASS_COLORS)] for i in range(NULL)] + [(0, 0, 0)]
    return _palette(colors)


def _indexed(indices: np.ndarray, palette: List[int], scale: int) -> Image.Image:
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    indices = np.ascontiguousarray(indices, dtype=np.uint8)
    image = Image.frombytes("P", (indices.shape[1], indices.shape[0]), indices.tobytes())
    image.putpalette(palette)
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    return image


def label_image(labels: Union[LabelMap, PseudoLabelMap], scale: int = 1) -> Image.Image:
    """8-bit indexed image of a label or pseudo-label map."""
    return _indexed(labels.labels, class_palette(), scale)


def diff_image(diff: PseudoLabelDiff, scale: int = 1) -> Image.Image:
    return _indexed(diff.categories, _palette([DIFF_COLORS[c] for c in DiffCategory]), scale)


def panel_image(gt: LabelMap, ssl: PseudoLabelMap, esl: PseudoLabelMap, scale: int = 1) -> Image.Image:
    """Four columns: ground truth, SSL pseudo-labels, ESL pseudo-labels, labels excluded by entropy."""
    if not gt.labels.shape == ssl.labels.shape == esl.labels.shape:
        raise ValueError("panel maps must share one size")
    gap = np.full((gt.height, PANEL_GAP), NULL, dtype=np.uint8)
    columns = [gt.labels, ssl.labels, esl.labels, excluded_by_entropy(ssl, esl).labels]
    strip = np.concatenate([part for column in columns for part in (column, gap)][:-1], axis=1)
    return _indexed(strip, class_palette(), scale)


def save_png(image: Image.Image, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG")
    return path
