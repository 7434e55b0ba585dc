"""Probability, label, pseudo-label and entropy maps, and their binary files.

All four file kinds share one little-endian header layout::

    magic (4 bytes) | version (u32) | H (u32) | W (u32) | [C or D (u32)]

followed by a row-major payload with the channel axis varying fastest,
i.e. value ``(h, w, c)`` lives at flat index ``(h * W + w) * C + c``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, List, Optional, Union

import numpy as np

PathLike = Union[str, Path]

FORMAT_VERSION = 1
PROB_MAGIC = b"SEGP"
LABEL_MAGIC = b"SEGL"
ENTROPY_MAGIC = b"SEGE"
FEATURE_MAGIC = b"SEGF"

PROB_SUFFIX = ".segp"
LABEL_SUFFIX = ".segl"
ENTROPY_SUFFIX = ".sege"
FEATURE_SUFFIX = ".segf"

# VOID (ground truth) and NULL (pseudo-labels) never share a map kind.
VOID = 255
NULL = 255
MAX_LABEL_CLASSES = 255

SUM_TOLERANCE = 1e-4
ENTROPY_TOLERANCE = 1e-9
MAX_PAYLOAD_VALUES = 2**31 - 1

_HEADER4 = struct.Struct("<4sIIII")
_HEADER3 = struct.Struct("<4sIII")


class MapFormatError(ValueError):
    """A map file could not be decoded."""


class BadMagicError(MapFormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(MapFormatError):
    """The header declares a format version this reader does not know."""


class TruncatedPayloadError(MapFormatError):
    """The file holds fewer bytes than its header declares."""


class DimensionError(MapFormatError):
    """Dimensions are zero, inconsistent, or too large to address."""


class LabelRangeError(MapFormatError):
    """A label map holds a class id outside ``[0, C)`` that is not the sentinel."""


class MapValidationError(ValueError):
    """A map violates one of its value invariants."""


def _readonly(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel softmax prediction of shape ``(H, W, C)``, stored as float32.

    Construction only checks the shape. Use :func:`validate` to check values:
    a map read from disk is never renormalized or repaired.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float32, copy=True, order="C")
        if values.ndim != 3:
            raise DimensionError(f"ProbMap needs an (H, W, C) array, got shape {values.shape}")
        height, width, num_classes = values.shape
        if height < 1 or width < 1:
            raise DimensionError(f"ProbMap must have at least one pixel, got {height}x{width}")
        if num_classes < 2:
            raise DimensionError(f"ProbMap needs at least two classes, got {num_classes}")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def num_classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class _ClassIdMap:
    """Dense ``(H, W)`` map of 8-bit class ids plus one reserved sentinel."""

    labels: np.ndarray
    num_classes: int

    sentinel: ClassVar[int] = 255

    def __post_init__(self) -> None:
        raw = np.asarray(self.labels)
        if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
            raise DimensionError(f"{type(self).__name__} needs a non-empty (H, W) array, got {raw.shape}")
        if not 1 <= self.num_classes <= MAX_LABEL_CLASSES:
            raise DimensionError(
                f"{type(self).__name__} supports 1..{MAX_LABEL_CLASSES} classes, got {self.num_classes}"
            )
        if raw.dtype.kind not in "ui":
            raise LabelRangeError(f"class ids must be integers, got dtype {raw.dtype}")
        bad = (raw != self.sentinel) & ((raw < 0) | (raw >= self.num_classes))
        if bad.any():
            first = tuple(int(i) for i in np.argwhere(bad)[0])
            raise LabelRangeError(
                f"class id {int(raw[first])} at pixel {first} is outside [0, {self.num_classes})"
            )
        labels = np.array(raw, dtype=np.uint8, copy=True, order="C")
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def labeled(self) -> np.ndarray:
        """Boolean mask of pixels holding a class id."""
        return self.labels != self.sentinel


class LabelMap(_ClassIdMap):
    """Ground-truth or predicted class ids; ``VOID`` marks unlabeled pixels."""

    sentinel: ClassVar[int] = VOID


class PseudoLabelMap(_ClassIdMap):
    """Pseudo-labels; ``NULL`` is the all-zeros label vector of a filtered pixel."""

    sentinel: ClassVar[int] = NULL


@dataclass(frozen=True, eq=False)
class EntropyMap:
    """Per-pixel normalized entropy of shape ``(H, W)``, stored as float32."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float32, copy=True, order="C")
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DimensionError(f"EntropyMap needs a non-empty (H, W) array, got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0 + ENTROPY_TOLERANCE:
            raise MapValidationError("EntropyMap values must lie in [0, 1 + 1e-9]")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def validate(prob: ProbMap) -> Optional[str]:
    """Return the first violated ProbMap invariant, or ``None`` when valid.

    The result is a diagnostic; it never raises.
    """
    values = prob.values
    finite = np.isfinite(values)
    if not finite.all():
        h, w, c = (int(i) for i in np.argwhere(~finite)[0])
        return f"range: non-finite value at pixel ({h}, {w}) channel {c}"
    out_of_range = (values < 0.0) | (values > 1.0)
    if out_of_range.any():
        h, w, c = (int(i) for i in np.argwhere(out_of_range)[0])
        return f"range: value {float(values[h, w, c])!r} at pixel ({h}, {w}) channel {c} is outside [0, 1]"
    sums = values.astype(np.float64).sum(axis=2)
    bad_sum = np.abs(sums - 1.0) > SUM_TOLERANCE
    if bad_sum.any():
        h, w = (int(i) for i in np.argwhere(bad_sum)[0])
        return f"pixel sum: channels at pixel ({h}, {w}) sum to {float(sums[h, w])!r}, expected 1 +/- {SUM_TOLERANCE}"
    return None


def argmax_map(prob: ProbMap) -> LabelMap:
    """Per-pixel arg max; ties resolve to the lowest class index."""
    return LabelMap(np.argmax(prob.values, axis=2), prob.num_classes)


def max_score_map(prob: ProbMap) -> np.ndarray:
    """Per-pixel maximum softmax score, equal to the value at :func:`argmax_map`."""
    return _readonly(prob.values.max(axis=2))


def _check_dims(*dims: int) -> None:
    if any(d < 1 for d in dims):
        raise DimensionError(f"all dimensions must be >= 1, got {dims}")
    total = 1
    for d in dims:
        total *= d
    if total > MAX_PAYLOAD_VALUES:
        raise DimensionError(f"dimensions {dims} address {total} values, more than {MAX_PAYLOAD_VALUES}")


def _split(data: bytes, magic: bytes, header: struct.Struct, path: PathLike) -> tuple:
    if data[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < header.size:
        raise TruncatedPayloadError(f"{path}: header needs {header.size} bytes, file has {len(data)}")
    fields = header.unpack_from(data)
    if fields[1] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {fields[1]}")
    start = header.size
    return fields[2:], data[start:]


def _payload(payload: bytes, expected: int, path: PathLike) -> bytes:
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: header declares {expected} payload bytes, file has {len(payload)}")
    if len(payload) > expected:
        raise MapFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return payload


def _write(path: PathLike, header: bytes, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def write_probmap(prob: ProbMap, path: PathLike) -> None:
    """Write a ``SEGP`` file."""
    header = _HEADER4.pack(PROB_MAGIC, FORMAT_VERSION, prob.height, prob.width, prob.num_classes)
    _write(path, header, prob.values.astype("<f4").tobytes())


def read_probmap(path: PathLike) -> ProbMap:
    """Read a ``SEGP`` file. Values are returned exactly as stored.

    Raises:
        BadMagicError: wrong magic bytes.
        TruncatedPayloadError: fewer payload bytes than the header declares.
        DimensionError: zero or overflowing dimensions.
    """
    (height, width, num_classes), payload = _split(Path(path).read_bytes(), PROB_MAGIC, _HEADER4, path)
    _check_dims(height, width, num_classes)
    payload = _payload(payload, 4 * height * width * num_classes, path)
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width, num_classes)
    return ProbMap(values)


def _write_ids(labels: _ClassIdMap, path: PathLike) -> None:
    header = _HEADER4.pack(LABEL_MAGIC, FORMAT_VERSION, labels.height, labels.width, labels.num_classes)
    _write(path, header, labels.labels.tobytes())


def _read_ids(path: PathLike):
    (height, width, num_classes), payload = _split(Path(path).read_bytes(), LABEL_MAGIC, _HEADER4, path)
    _check_dims(height, width, num_classes)
    if num_classes > MAX_LABEL_CLASSES:
        raise DimensionError(f"{path}: label files support at most {MAX_LABEL_CLASSES} classes, got {num_classes}")
    payload = _payload(payload, height * width, path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width), num_classes


def write_labelmap(labels: LabelMap, path: PathLike) -> None:
    """Write a ``SEGL`` file; ``VOID`` is stored as 255."""
    _write_ids(labels, path)


def read_labelmap(path: PathLike) -> LabelMap:
    """Read a ``SEGL`` file as a ground-truth :class:`LabelMap`.

    Raises:
        LabelRangeError: a stored class id is ``>= C`` and not 255.
    """
    ids, num_classes = _read_ids(path)
    return LabelMap(ids, num_classes)


def write_pseudolabels(labels: PseudoLabelMap, path: PathLike) -> None:
    """Write a ``SEGL`` file; ``NULL`` is stored as 255."""
    _write_ids(labels, path)


def read_pseudolabels(path: PathLike) -> PseudoLabelMap:
    """Read a ``SEGL`` file as a :class:`PseudoLabelMap`."""
    ids, num_classes = _read_ids(path)
    return PseudoLabelMap(ids, num_classes)


def write_entropymap(entropy: EntropyMap, path: PathLike) -> None:
    """Write a ``SEGE`` file."""
    header = _HEADER3.pack(ENTROPY_MAGIC, FORMAT_VERSION, entropy.height, entropy.width)
    _write(path, header, entropy.values.astype("<f4").tobytes())


def read_entropymap(path: PathLike) -> EntropyMap:
    """Read a ``SEGE`` file."""
    (height, width), payload = _split(Path(path).read_bytes(), ENTROPY_MAGIC, _HEADER3, path)
    _check_dims(height, width)
    payload = _payload(payload, 4 * height * width, path)
    return EntropyMap(np.frombuffer(payload, dtype="<f4").reshape(height, width))


def write_features(features: np.ndarray, path: PathLike) -> None:
    """Write an ``(H, W, D)`` feature array as a ``SEGF`` file."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise DimensionError(f"features need an (H, W, D) array, got shape {features.shape}")
    _check_dims(*features.shape)
    header = _HEADER4.pack(FEATURE_MAGIC, FORMAT_VERSION, *features.shape)
    _write(path, header, features.astype("<f4").tobytes())


def read_features(path: PathLike) -> np.ndarray:
    """Read a ``SEGF`` file into a read-only float32 ``(H, W, D)`` array."""
    (height, width, dim), payload = _split(Path(path).read_bytes(), FEATURE_MAGIC, _HEADER4, path)
    _check_dims(height, width, dim)
    payload = _payload(payload, 4 * height * width * dim, path)
    features = np.frombuffer(payload, dtype="<f4").reshape(height, width, dim).astype(np.float32)
    return _readonly(features)


def list_maps(directory: PathLike, suffix: str) -> List[Path]:
    """Return the files with ``suffix`` in ``directory``, sorted by name."""
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix == suffix)
