"""Synthetic source/target segmentation domains with a controllable shift.

Scenes are Voronoi partitions of random sites; every site draws its class
from the class prior. Pixel features are the class mean plus Gaussian
noise. Within ``boundary_blur`` pixels of a border between two classes the
mean is mixed with the neighbouring class mean, weight ``0.5 * (1 - d / blur)``
at distance ``d``, so border pixels are genuinely ambiguous.

Randomness: one Philox stream per scene, seeded with
``SeedSequence([seed, split_tag, scene_index])`` where the split tag is 0 for
source, 1 for target and 2 for held-out target scenes. Within a scene the
stream is consumed in a fixed order: site coordinates (row, col), site
classes, then pixel noise in row-major ``(H, W, D)`` order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from pseudolabel_lab.mapcore import (
    FEATURE_SUFFIX,
    LABEL_SUFFIX,
    EntropyMap,
    LabelMap,
    PathLike,
    read_features,
    read_labelmap,
    write_features,
    write_labelmap,
)
from pseudolabel_lab.settings import (
    DOMAIN_SHIFT_SCHEMA,
    SCENE_SPEC_SCHEMA,
    ConfigError,
    dump_json,
    load_json,
    validate_config,
)
from pseudolabel_lab.workers import map_ordered

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
MANIFEST_VERSION = 1


class Split(str, Enum):
    SOURCE = "source"
    TARGET = "target"
    TARGET_EVAL = "target-eval"

    @property
    def tag(self) -> int:
        return _SPLIT_TAGS[self]


_SPLIT_TAGS = {Split.SOURCE: 0, Split.TARGET: 1, Split.TARGET_EVAL: 2}


def _build(cls, data: Dict[str, Any], name: str):
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid {name}: {e}") from e


def _frozen_array(values: Any, name: str, ndim: int) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True)
    if array.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} must be finite")
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Geometry, class palette and noise of one synthetic domain."""

    height: int
    width: int
    num_classes: int
    num_regions: int
    feature_dim: int
    seed: int
    class_palette: np.ndarray
    noise_sigma: float = 0.5
    boundary_blur: float = 1.5
    class_prior: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"zero-area scene: {self.height}x{self.width}")
        if not 2 <= self.num_classes <= 255:
            raise ValueError(f"num_classes must be in [2, 255], got {self.num_classes}")
        if self.num_regions < 1:
            raise ValueError(f"num_regions must be >= 1, got {self.num_regions}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        palette = _frozen_array(self.class_palette, "class_palette", 2)
        if palette.shape != (self.num_classes, self.feature_dim):
            raise ValueError(
                f"class_palette must be {self.num_classes}x{self.feature_dim}, got {palette.shape}"
            )
        if not (self.noise_sigma >= 0 and self.boundary_blur >= 0):
            raise ValueError("noise_sigma and boundary_blur must be non-negative")
        prior = np.ones(self.num_classes) if self.class_prior is None else self.class_prior
        prior = _frozen_array(prior, "class_prior", 1)
        if prior.shape != (self.num_classes,) or prior.min() <= 0:
            raise ValueError(f"class_prior needs {self.num_classes} positive entries")
        prior = prior / math.fsum(prior.tolist())
        prior.flags.writeable = False
        object.__setattr__(self, "class_palette", palette)
        object.__setattr__(self, "class_prior", prior)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "num_regions": self.num_regions,
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "class_palette": self.class_palette.tolist(),
            "noise_sigma": self.noise_sigma,
            "boundary_blur": self.boundary_blur,
            "class_prior": self.class_prior.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        return _build(cls, validate_config(data, SCENE_SPEC_SCHEMA, "scene spec"), "scene spec")


@dataclass(frozen=True, eq=False)
class DomainShiftSpec:
    """How the target domain departs from the source domain."""

    mean_shift: np.ndarray
    sigma_scale: float = 1.0
    class_prior_skew: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        shift = _frozen_array(self.mean_shift, "mean_shift", 2)
        if not self.sigma_scale > 0:
            raise ValueError(f"sigma_scale must be > 0, got {self.sigma_scale}")
        skew = np.ones(shift.shape[0]) if self.class_prior_skew is None else self.class_prior_skew
        skew = _frozen_array(skew, "class_prior_skew", 1)
        if skew.shape != (shift.shape[0],) or skew.min() <= 0:
            raise ValueError(f"class_prior_skew needs {shift.shape[0]} positive entries")
        object.__setattr__(self, "mean_shift", shift)
        object.__setattr__(self, "class_prior_skew", skew)

    @classmethod
    def null(cls, num_classes: int, feature_dim: int) -> "DomainShiftSpec":
        """No shift: zero offsets, unit noise scale, unit skew."""
        return cls(np.zeros((num_classes, feature_dim)))

    def apply(self, spec: SceneSpec) -> SceneSpec:
        """The target-domain scene spec."""
        if self.mean_shift.shape != spec.class_palette.shape:
            raise ValueError(
                f"mean_shift {self.mean_shift.shape} does not match class_palette {spec.class_palette.shape}"
            )
        return SceneSpec(
            height=spec.height,
            width=spec.width,
            num_classes=spec.num_classes,
            num_regions=spec.num_regions,
            feature_dim=spec.feature_dim,
            seed=spec.seed,
            class_palette=spec.class_palette + self.mean_shift,
            noise_sigma=spec.noise_sigma * self.sigma_scale,
            boundary_blur=spec.boundary_blur,
            class_prior=spec.class_prior * self.class_prior_skew,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_shift": self.mean_shift.tolist(),
            "sigma_scale": self.sigma_scale,
            "class_prior_skew": self.class_prior_skew.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DomainShiftSpec":
        return _build(cls, validate_config(data, DOMAIN_SHIFT_SCHEMA, "domain shift"), "domain shift")


@dataclass(frozen=True, eq=False)
class LabeledScene:
    """Features ``(H, W, D)`` with their full label map and blur-band mask."""

    features: np.ndarray
    labels: LabelMap
    boundary_band: np.ndarray
    split: Split = Split.SOURCE
    index: int = 0

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float32, copy=True)
        band = np.array(self.boundary_band, dtype=bool, copy=True)
        if features.ndim != 3 or features.shape[:2] != self.labels.labels.shape or band.shape != features.shape[:2]:
            raise ValueError(
                f"inconsistent scene: features {features.shape}, labels {self.labels.labels.shape}, "
                f"band {band.shape}"
            )
        features.flags.writeable = False
        band.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "boundary_band", band)

    @property
    def num_classes(self) -> int:
        return self.labels.num_classes

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]


def scene_rng(seed: int, split: Split, scene_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, split.tag, scene_index])))


def _boundary_distance(
    coords: np.ndarray, sites: np.ndarray, site_classes: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest site, distance to the nearest border with another class, and that class."""
    tree = cKDTree(sites)
    dist, idx = tree.query(coords, k=list(range(1, len(sites) + 1)))
    nearest = idx[:, 0]
    own_class = site_classes[nearest]
    border = np.full(len(coords), np.inf)
    other_class = own_class.copy()
    for j in range(1, len(sites)):
        other = idx[:, j]
        candidate_class = site_classes[other]
        separation = np.linalg.norm(sites[other] - sites[nearest], axis=1)
        bisector = np.divide(
            dist[:, j] ** 2 - dist[:, 0] ** 2,
            2.0 * separation,
            out=np.zeros(len(coords)),
            where=separation > 0,
        )
        closer = (candidate_class != own_class) & (bisector < border)
        border[closer] = bisector[closer]
        other_class[closer] = candidate_class[closer]
    return nearest, border, other_class


def gen_scene(spec: SceneSpec, scene_index: int = 0, split: Split = Split.SOURCE) -> LabeledScene:
    """Generate one scene; a pure function of ``(spec, scene_index, split)``."""
    split = Split(split)
    if spec.height < 1 or spec.width < 1:
        raise ValueError(f"zero-area scene: {spec.height}x{spec.width}")
    rng = scene_rng(spec.seed, split, scene_index)
    h, w, d = spec.height, spec.width, spec.feature_dim

    sites = rng.uniform(0.0, 1.0, size=(spec.num_regions, 2)) * np.array([h, w], dtype=np.float64)
    site_classes = rng.choice(spec.num_classes, size=spec.num_regions, p=spec.class_prior)
    noise = rng.standard_normal((h, w, d))

    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
    nearest, border, other_class = _boundary_distance(coords, sites, site_classes)
    labels = site_classes[nearest]

    means = spec.class_palette[labels]
    band = np.zeros(h * w, dtype=bool)
    if spec.boundary_blur > 0:
        band = border < spec.boundary_blur
        weight = 0.5 * (1.0 - border[band] / spec.boundary_blur)
        means[band] = (1.0 - weight)[:, None] * means[band] + weight[:, None] * spec.class_palette[other_class[band]]

    features = means.reshape(h, w, d)
    if spec.noise_sigma > 0:
        features = features + spec.noise_sigma * noise
    return LabeledScene(
        features=features,
        labels=LabelMap(labels.reshape(h, w), spec.num_classes),
        boundary_band=band.reshape(h, w),
        split=split,
        index=scene_index,
    )


@dataclass(frozen=True)
class DomainPair:
    source: List[LabeledScene]
    target: List[LabeledScene]
    target_eval: List[LabeledScene] = field(default_factory=list)


def gen_domain_pair(
    spec: SceneSpec,
    shift: DomainShiftSpec,
    n_source: int,
    n_target: int,
    n_target_eval: int = 0,
    jobs: Optional[int] = None,
) -> DomainPair:
    """Source scenes from ``spec`` and target scenes from ``shift.apply(spec)``.

    Raises:
        ValueError: ``n_source`` or ``n_target`` is zero.
    """
    if n_source < 1 or n_target < 1:
        raise ValueError(f"need at least one source and one target scene, got {n_source} and {n_target}")
    if n_target_eval < 0:
        raise ValueError(f"n_target_eval must be >= 0, got {n_target_eval}")
    target_spec = shift.apply(spec)
    jobs_list = (
        [(spec, i, Split.SOURCE) for i in range(n_source)]
        + [(target_spec, i, Split.TARGET) for i in range(n_target)]
        + [(target_spec, i, Split.TARGET_EVAL) for i in range(n_target_eval)]
    )
    scenes = map_ordered(lambda job: gen_scene(*job), jobs_list, jobs)
    logger.info("Generated %d source, %d target and %d held-out target scenes", n_source, n_target, n_target_eval)
    first_eval = n_source + n_target
    return DomainPair(
        source=scenes[:n_source],
        target=scenes[n_source:first_eval],
        target_eval=scenes[first_eval:],
    )


BENCHMARK_SIZES = {"n_source": 8, "n_target": 8, "n_target_eval": 4}


def default_benchmark(seed: int = 0) -> Tuple[SceneSpec, DomainShiftSpec]:
    """The desk-scale domain-shift benchmark: 32x32 scenes, 6 classes, 4 features."""
    num_classes, feature_dim = 6, 4
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 3])))
    palette = rng.normal(0.0, 1.5, size=(num_classes, feature_dim))
    mean_shift = rng.normal(0.0, 0.6, size=(num_classes, feature_dim))
    skew = rng.uniform(0.5, 2.0, size=num_classes)
    spec = SceneSpec(
        height=32,
        width=32,
        num_classes=num_classes,
        num_regions=10,
        feature_dim=feature_dim,
        seed=seed,
        class_palette=palette,
        noise_sigma=0.7,
        boundary_blur=2.0,
    )
    return spec, DomainShiftSpec(mean_shift, sigma_scale=1.25, class_prior_skew=skew)


@dataclass(frozen=True)
class BoundaryGap:
    """Mean entropy inside the blur band against the interior, with a z-score."""

    band_mean: float
    interior_mean: float
    band_pixels: int
    interior_pixels: int
    z_score: float


def boundary_entropy_gap(scenes: Sequence[LabeledScene], entropies: Sequence[EntropyMap]) -> BoundaryGap:
    """Compare prediction entropy of blur-band pixels with interior pixels."""
    if len(scenes) != len(entropies) or not scenes:
        raise ValueError("need one entropy map per scene and at least one scene")
    band_values, interior_values = [], []
    for scene, entropy in zip(scenes, entropies):
        if entropy.values.shape != scene.boundary_band.shape:
            raise ValueError(f"entropy map {entropy.values.shape} does not match scene {scene.boundary_band.shape}")
        values = entropy.values.astype(np.float64)
        band_values.append(values[scene.boundary_band])
        interior_values.append(values[~scene.boundary_band])
    band = np.concatenate(band_values)
    interior = np.concatenate(interior_values)
    if band.size < 2 or interior.size < 2:
        raise ValueError("need at least two band and two interior pixels")
    spread = math.sqrt(band.var(ddof=1) / band.size + interior.var(ddof=1) / interior.size)
    gap = float(band.mean() - interior.mean())
    z_score = gap / spread if spread > 0 else math.copysign(math.inf, gap) if gap else 0.0
    return BoundaryGap(float(band.mean()), float(interior.mean()), int(band.size), int(interior.size), z_score)


def _scene_stem(split: Split, index: int) -> str:
    return f"{split.value}/{index:05d}"


def write_dataset(
    pair: DomainPair,
    out_dir: PathLike,
    spec: SceneSpec,
    shift: DomainShiftSpec,
) -> Path:
    """Write features (``SEGF``), labels and blur bands (``SEGL``) plus ``manifest.json``.

    Paths in the manifest are relative to its directory.
    """
    out_dir = Path(out_dir)
    entries = []
    for scene in pair.source + pair.target + pair.target_eval:
        stem = _scene_stem(scene.split, scene.index)
        (out_dir / stem).parent.mkdir(parents=True, exist_ok=True)
        features = f"{stem}{FEATURE_SUFFIX}"
        labels = f"{stem}{LABEL_SUFFIX}"
        band = f"{stem}.band{LABEL_SUFFIX}"
        write_features(scene.features, out_dir / features)
        write_labelmap(scene.labels, out_dir / labels)
        write_labelmap(LabelMap(scene.boundary_band.astype(np.uint8), 2), out_dir / band)
        entries.append(
            {
                "split": scene.split.value,
                "index": scene.index,
                "seed": spec.seed,
                "features": features,
                "labels": labels,
                "band": band,
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "num_classes": spec.num_classes,
        "feature_dim": spec.feature_dim,
        "scene": spec.to_dict(),
        "shift": shift.to_dict(),
        "scenes": entries,
    }
    path = dump_json(manifest, out_dir / MANIFEST_FILE)
    logger.info("Wrote %d scenes to %s", len(entries), out_dir)
    return path


@dataclass(frozen=True)
class Dataset:
    """Scenes loaded from a manifest.

    Target label maps are only for evaluation; training code receives
    :meth:`target_features`.
    """

    num_classes: int
    feature_dim: int
    source: List[LabeledScene]
    target: List[LabeledScene]
    target_eval: List[LabeledScene]
    manifest_path: Optional[Path] = None
    synth_seed: Optional[int] = None

    def target_features(self) -> List[np.ndarray]:
        return [scene.features for scene in self.target]

    def eval_scenes(self) -> List[LabeledScene]:
        """Held-out target scenes, or the target training scenes when none were generated."""
        return self.target_eval or self.target

    @classmethod
    def from_pair(cls, pair: DomainPair, synth_seed: Optional[int] = None) -> "Dataset":
        first = pair.source[0]
        return cls(
            first.num_classes, first.feature_dim, pair.source, pair.target, pair.target_eval, synth_seed=synth_seed
        )


def load_manifest(path: PathLike, jobs: Optional[int] = None) -> Dataset:
    """Load every scene listed in a dataset manifest.

    Raises:
        ValueError: the manifest version or scene dimensions are inconsistent.
    """
    path = Path(path)
    manifest = load_json(path)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    root = path.parent
    num_classes = int(manifest["num_classes"])
    feature_dim = int(manifest["feature_dim"])

    def load(entry: Dict[str, Any]) -> LabeledScene:
        features = read_features(root / entry["features"])
        labels = read_labelmap(root / entry["labels"])
        band = read_labelmap(root / entry["band"]).labels == 1
        if features.shape[2] != feature_dim or labels.num_classes != num_classes:
            raise ValueError(f"{path}: scene {entry['features']} does not match the manifest dimensions")
        return LabeledScene(features, labels, band, Split(entry["split"]), int(entry["index"]))

    scenes = map_ordered(load, manifest["scenes"], jobs)
    by_split: Dict[Split, List[LabeledScene]] = {split: [] for split in Split}
    for scene in scenes:
        by_split[scene.split].append(scene)
    return Dataset(
        num_classes,
        feature_dim,
        by_split[Split.SOURCE],
        by_split[Split.TARGET],
        by_split[Split.TARGET_EVAL],
        manifest_path=path,
        synth_seed=manifest.get("scene", {}).get("seed"),
    )
