"""Per-pixel linear softmax segmenter, output-space discriminator and their training.

Losses follow the adversarial self-training objectives:

* ``L_seg``: cross-entropy summed over the labeled pixels of a scene;
  VOID and NULL pixels contribute nothing.
* ``L_D``: discriminator binary cross-entropy, pixel-averaged per image and
  averaged per domain, source labeled 1 and target 0.
* ``L_F``: source ``L_seg`` plus ``lambda_adv`` times the target adversarial
  term (the discriminator fooled into predicting "source").
* ``L_F*``: ``L_F`` plus ``lambda_sl`` times target ``L_seg`` on pseudo-labels.

Arithmetic is float64 throughout; :func:`forward` rounds to a float32
:class:`ProbMap` only at the end.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from pseudolabel_lab.mapcore import (
    BadMagicError,
    LabelMap,
    PathLike,
    ProbMap,
    PseudoLabelMap,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from pseudolabel_lab.metrics import ConfusionMatrix, confusion, iou, sum_confusions
from pseudolabel_lab.settings import TRAIN_CONFIG_SCHEMA, ConfigError, config_hash, dump_json, validate_config
from pseudolabel_lab.synth import LabeledScene
from pseudolabel_lab.workers import map_ordered

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"SEGM"
CHECKPOINT_VERSION = 1
_CHECKPOINT_PREFIX = struct.Struct("<4sII")


class TrainingDivergedError(RuntimeError):
    """A loss or parameter became non-finite during training."""


def _finite_weights(values: Any, shape: Tuple[int, ...], name: str) -> np.ndarray:
    weights = np.array(values, dtype=np.float64, copy=True)
    if weights.shape != shape:
        raise ValueError(f"{name} weights must have shape {shape}, got {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise ValueError(f"{name} weights must be finite")
    weights.flags.writeable = False
    return weights


@dataclass(frozen=True, eq=False)
class PixelClassifier:
    """Linear softmax segmenter; ``weights`` is ``(D + 1) x C`` with the bias as last row."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights)
        if weights.ndim != 2 or weights.shape[0] < 2 or weights.shape[1] < 2:
            raise ValueError(f"classifier weights must be (D + 1) x C with D >= 1, C >= 2, got {weights.shape}")
        object.__setattr__(self, "weights", _finite_weights(weights, weights.shape, "classifier"))

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0] - 1

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, feature_dim: int, num_classes: int) -> "PixelClassifier":
        return cls(np.zeros((feature_dim + 1, num_classes)))


@dataclass(frozen=True, eq=False)
class Discriminator:
    """Per-pixel logistic regression on the softmax vector; ``weights`` is ``C + 1`` with the bias last."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights)
        if weights.ndim != 1 or weights.shape[0] < 3:
            raise ValueError(f"discriminator weights must be a vector of length C + 1, got {weights.shape}")
        object.__setattr__(self, "weights", _finite_weights(weights, weights.shape, "discriminator"))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0] - 1

    @classmethod
    def zeros(cls, num_classes: int) -> "Discriminator":
        return cls(np.zeros(num_classes + 1))


@dataclass(frozen=True)
class TrainConfig:
    lr_f: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_d: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_adv: float = 1e-3
    lambda_sl: float = 1.0
    epochs: int = 200
    batch: int = 2
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self) -> None:
        if not (self.lr_f > 0 and self.lr_d > 0):
            raise ValueError("learning rates must be > 0")
        if self.lambda_adv < 0 or self.lambda_sl < 0:
            raise ValueError("lambda_adv and lambda_sl must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("Adam needs betas in [0, 1) and eps > 0")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.seed < 0 or self.init_scale < 0:
            raise ValueError("seed and init_scale must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = validate_config(data, TRAIN_CONFIG_SCHEMA, "train config")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid train config: {e}") from e


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_seg: float
    loss_adv: float
    loss_sl: float
    loss_d: float
    target_miou: Optional[float] = None


@dataclass
class TrainLog:
    """Per-epoch loss means and held-out target mIoU, in epoch order."""

    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {record.epoch} recorded after epoch {self.records[-1].epoch}")
        self.records.append(record)

    def to_dict(self) -> Dict[str, Any]:
        return {"records": [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainLog":
        return cls([EpochRecord(**r) for r in data["records"]])

    def write(self, path: PathLike) -> Path:
        return dump_json(self.to_dict(), path)


@dataclass(frozen=True, eq=False)
class LossResult:
    """Loss value, gradient with respect to one parameter set, and named terms."""

    value: float
    grad: np.ndarray
    terms: Dict[str, float] = field(default_factory=dict)


def _augment(features: np.ndarray, feature_dim: int) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != feature_dim:
        raise ValueError(f"features must be (H, W, {feature_dim}), got shape {features.shape}")
    flat = features.reshape(-1, feature_dim)
    return np.concatenate([flat, np.ones((flat.shape[0], 1))], axis=1)


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of ``(N, C)`` scores, shifted by the row maximum."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _probabilities(clf: PixelClassifier, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    xa = _augment(features, clf.feature_dim)
    return xa, softmax(xa @ clf.weights)


def forward(clf: PixelClassifier, features: np.ndarray) -> ProbMap:
    """Softmax prediction of one scene.

    Raises:
        ValueError: the feature dimension does not match the classifier.
    """
    _, p = _probabilities(clf, features)
    height, width = np.shape(features)[:2]
    return ProbMap(p.reshape(height, width, clf.num_classes))


def predict(clf: PixelClassifier, features: np.ndarray) -> LabelMap:
    _, p = _probabilities(clf, features)
    height, width = np.shape(features)[:2]
    return LabelMap(np.argmax(p, axis=1).reshape(height, width), clf.num_classes)


def evaluate(clf: PixelClassifier, scenes: Sequence[LabeledScene], jobs: Optional[int] = 1) -> ConfusionMatrix:
    """Confusion of the classifier's arg-max predictions against scene labels."""
    return sum_confusions(map_ordered(lambda s: confusion(predict(clf, s.features), s.labels), scenes, jobs))


ProbInput = Union[ProbMap, np.ndarray]


def _flat_probs(prob: ProbInput) -> np.ndarray:
    values = prob.values if isinstance(prob, ProbMap) else np.asarray(prob)
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(-1, values.shape[-1])


def _seg_terms(p: np.ndarray, labels: Union[LabelMap, PseudoLabelMap]) -> Tuple[float, np.ndarray, np.ndarray]:
    """Loss, labeled-pixel mask and ``dL/dscores`` restricted to labeled rows."""
    if p.shape[0] != labels.labels.size:
        raise ValueError(f"{p.shape[0]} predicted pixels but {labels.labels.size} labels")
    if p.shape[1] != labels.num_classes:
        raise ValueError(f"{p.shape[1]} predicted classes but labels have {labels.num_classes}")
    mask = labels.labeled.ravel()
    ids = labels.labels.ravel()[mask].astype(np.int64)
    picked = p[mask]
    rows = np.arange(ids.size)
    value = float(-np.sum(np.log(np.maximum(picked[rows, ids], LOG_FLOOR))))
    grad = picked.copy()
    grad[rows, ids] -= 1.0
    return value, mask, grad


def loss_seg(prob: ProbInput, labels: Union[LabelMap, PseudoLabelMap]) -> LossResult:
    """Cross-entropy summed over labeled pixels, with the gradient w.r.t. the scores.

    ``prob`` is a :class:`ProbMap` or an ``(H, W, C)`` float array. The
    returned gradient has shape ``(H * W, C)`` and is zero on VOID and NULL
    pixels.
    """
    p = _flat_probs(prob)
    value, mask, labeled_grad = _seg_terms(p, labels)
    grad = np.zeros_like(p)
    grad[mask] = labeled_grad
    return LossResult(value, grad, {"seg": value})


def _logit(disc: Discriminator, p: np.ndarray) -> np.ndarray:
    if p.shape[1] != disc.num_classes:
        raise ValueError(f"discriminator expects {disc.num_classes} classes, got {p.shape[1]}")
    return p @ disc.weights[:-1] + disc.weights[-1]


def _domain_term(disc: Discriminator, prob: ProbInput, is_source: bool) -> Tuple[float, np.ndarray]:
    """Pixel-mean BCE of one image and its gradient w.r.t. the discriminator weights."""
    p = _flat_probs(prob)
    z = _logit(disc, p)
    n = z.shape[0]
    if is_source:
        value = float(np.mean(np.logaddexp(0.0, -z)))
        dz = (expit(z) - 1.0) / n
    else:
        value = float(np.mean(np.logaddexp(0.0, z)))
        dz = expit(z) / n
    return value, np.append(dz @ p, dz.sum())


def loss_D(disc: Discriminator, source_probs: Sequence[ProbInput], target_probs: Sequence[ProbInput]) -> LossResult:
    """Discriminator objective with its gradient w.r.t. ``disc.weights``.

    Raises:
        ValueError: either domain is empty.
    """
    if not source_probs or not target_probs:
        raise ValueError("loss_D needs at least one source and one target image")
    value = 0.0
    grad = np.zeros_like(disc.weights)
    terms = {}
    for name, probs, is_source in (("source", source_probs, True), ("target", target_probs, False)):
        parts = [_domain_term(disc, prob, is_source) for prob in probs]
        term = math.fsum(v for v, _ in parts) / len(parts)
        for _, g in parts:
            grad += g / len(parts)
        terms[name] = term
        value += term
    return LossResult(value, grad, terms)


def _seg_scene(clf: PixelClassifier, features: np.ndarray, labels: Union[LabelMap, PseudoLabelMap]):
    xa, p = _probabilities(clf, features)
    value, mask, dscores = _seg_terms(p, labels)
    return value, xa[mask].T @ dscores


def _adv_scene(clf: PixelClassifier, disc: Discriminator, features: np.ndarray):
    """Target term pushing the discriminator towards "source", with its classifier gradient."""
    xa, p = _probabilities(clf, features)
    z = _logit(disc, p)
    n = z.shape[0]
    value = float(np.mean(np.logaddexp(0.0, -z)))
    dp = ((expit(z) - 1.0) / n)[:, None] * disc.weights[:-1][None, :]
    dscores = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    return value, xa.T @ dscores


def _scene_mean(parts: List[Tuple[float, np.ndarray]], shape: Tuple[int, ...]) -> Tuple[float, np.ndarray]:
    grad = np.zeros(shape)
    for _, g in parts:
        grad += g
    return math.fsum(v for v, _ in parts) / len(parts), grad / len(parts)


def _check_batches(source: Sequence[LabeledScene], target: Sequence[np.ndarray]) -> None:
    if not source or not target:
        raise ValueError("need non-empty source and target batches")


def loss_F(
    clf: PixelClassifier,
    disc: Discriminator,
    source: Sequence[LabeledScene],
    target: Sequence[np.ndarray],
    lambda_adv: float,
    jobs: Optional[int] = 1,
) -> LossResult:
    """Source segmentation loss plus ``lambda_adv`` times the adversarial term.

    The gradient is w.r.t. ``clf.weights``; ``disc`` is held fixed.
    """
    _check_batches(source, target)
    shape = clf.weights.shape
    seg, seg_grad = _scene_mean(map_ordered(lambda s: _seg_scene(clf, s.features, s.labels), source, jobs), shape)
    adv, adv_grad = _scene_mean(map_ordered(lambda x: _adv_scene(clf, disc, x), target, jobs), shape)
    return LossResult(seg + lambda_adv * adv, seg_grad + lambda_adv * adv_grad, {"seg": seg, "adv": adv})


def loss_F_star(
    clf: PixelClassifier,
    disc: Discriminator,
    source: Sequence[LabeledScene],
    target: Sequence[np.ndarray],
    pseudo_labels: Sequence[PseudoLabelMap],
    lambda_adv: float,
    lambda_sl: float,
    jobs: Optional[int] = 1,
) -> LossResult:
    """:func:`loss_F` plus ``lambda_sl`` times the mean target loss on pseudo-labels."""
    if len(pseudo_labels) != len(target):
        raise ValueError(f"{len(pseudo_labels)} pseudo-label maps for {len(target)} target scenes")
    base = loss_F(clf, disc, source, target, lambda_adv, jobs)
    parts = map_ordered(lambda pair: _seg_scene(clf, pair[0], pair[1]), list(zip(target, pseudo_labels)), jobs)
    sl, sl_grad = _scene_mean(parts, clf.weights.shape)
    return LossResult(base.value + lambda_sl * sl, base.grad + lambda_sl * sl_grad, {**base.terms, "sl": sl})


@dataclass(frozen=True, eq=False)
class SGDState:
    velocity: np.ndarray


@dataclass(frozen=True, eq=False)
class AdamState:
    step: int
    first: np.ndarray
    second: np.ndarray


def sgd_step(
    params: np.ndarray, grads: np.ndarray, config: TrainConfig, state: Optional[SGDState] = None
) -> Tuple[np.ndarray, SGDState]:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``v <- momentum * v + (g + weight_decay * params)``, then ``params -= lr_f * v``.
    """
    if params.shape != grads.shape:
        raise ValueError(f"parameter shape {params.shape} does not match gradient shape {grads.shape}")
    velocity = np.zeros_like(params) if state is None else state.velocity
    velocity = config.momentum * velocity + (grads + config.weight_decay * params)
    return params - config.lr_f * velocity, SGDState(velocity)


def adam_step(
    params: np.ndarray, grads: np.ndarray, config: TrainConfig, state: Optional[AdamState] = None
) -> Tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update with ``lr_d``, ``adam_beta1/2`` and ``adam_eps``."""
    if params.shape != grads.shape:
        raise ValueError(f"parameter shape {params.shape} does not match gradient shape {grads.shape}")
    if state is None:
        state = AdamState(0, np.zeros_like(params), np.zeros_like(params))
    step = state.step + 1
    first = config.adam_beta1 * state.first + (1.0 - config.adam_beta1) * grads
    second = config.adam_beta2 * state.second + (1.0 - config.adam_beta2) * grads**2
    first_hat = first / (1.0 - config.adam_beta1**step)
    second_hat = second / (1.0 - config.adam_beta2**step)
    return params - config.lr_d * first_hat / (np.sqrt(second_hat) + config.adam_eps), AdamState(step, first, second)


@dataclass(frozen=True, eq=False)
class TrainResult:
    classifier: PixelClassifier
    discriminator: Discriminator
    log: TrainLog


def initial_models(feature_dim: int, num_classes: int, config: TrainConfig) -> Tuple[PixelClassifier, Discriminator]:
    """Fresh weights drawn from ``N(0, init_scale)``; a pure function of the seed."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 7])))
    clf = PixelClassifier(rng.normal(0.0, config.init_scale, size=(feature_dim + 1, num_classes)))
    disc = Discriminator(rng.normal(0.0, config.init_scale, size=num_classes + 1))
    return clf, disc


def _check_finite(epoch: int, step: int, **losses: float) -> None:
    for name, value in losses.items():
        if not math.isfinite(value):
            raise TrainingDivergedError(f"epoch {epoch} step {step}: {name} is {value}")


def _batch_indices(order: np.ndarray, step: int, batch: int) -> List[int]:
    return [int(order[(step * batch + i) % len(order)]) for i in range(min(batch, len(order)))]


def train_uda(
    source: Sequence[LabeledScene],
    target_features: Sequence[np.ndarray],
    config: TrainConfig,
    eval_scenes: Optional[Sequence[LabeledScene]] = None,
    pseudo_labels: Optional[Sequence[PseudoLabelMap]] = None,
    jobs: Optional[int] = 1,
) -> TrainResult:
    """Alternate one discriminator step and one segmenter step per batch.

    Args:
        source: labeled source scenes.
        target_features: unlabeled target features, ``(H, W, D)`` each.
        config: optimization settings; the seed fixes initialization and
            batch order.
        eval_scenes: held-out labeled target scenes, evaluated after every
            epoch.
        pseudo_labels: one map per target scene; when given the segmenter
            minimizes ``L_F*`` instead of ``L_F``.
        jobs: workers for per-scene passes.

    Raises:
        ValueError: empty inputs or mismatched dimensions.
        TrainingDivergedError: a loss or weight became non-finite.
    """
    if not source or not target_features:
        raise ValueError("train_uda needs at least one source and one target scene")
    if pseudo_labels is not None and len(pseudo_labels) != len(target_features):
        raise ValueError(f"{len(pseudo_labels)} pseudo-label maps for {len(target_features)} target scenes")
    feature_dim, num_classes = source[0].feature_dim, source[0].num_classes
    clf, disc = initial_models(feature_dim, num_classes, config)
    order_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 8])))
    steps = max(math.ceil(len(source) / config.batch), math.ceil(len(target_features) / config.batch))
    sgd_state: Optional[SGDState] = None
    adam_state: Optional[AdamState] = None
    log = TrainLog()

    logger.info(
        "Training %s on %d source and %d target scenes for %d epochs",
        "with pseudo-labels" if pseudo_labels is not None else "without pseudo-labels",
        len(source),
        len(target_features),
        config.epochs,
    )
    for epoch in range(config.epochs):
        source_order = order_rng.permutation(len(source))
        target_order = order_rng.permutation(len(target_features))
        sums = {"seg": 0.0, "adv": 0.0, "sl": 0.0, "d": 0.0}
        for step in range(steps):
            src = [source[i] for i in _batch_indices(source_order, step, config.batch)]
            tgt_idx = _batch_indices(target_order, step, config.batch)
            tgt = [target_features[i] for i in tgt_idx]

            src_probs = map_ordered(lambda s: _probabilities(clf, s.features)[1], src, jobs)
            tgt_probs = map_ordered(lambda x: _probabilities(clf, x)[1], tgt, jobs)
            d_loss = loss_D(disc, src_probs, tgt_probs)
            _check_finite(epoch, step, loss_d=d_loss.value)
            disc_weights, adam_state = adam_step(disc.weights, d_loss.grad, config, adam_state)

            if not np.all(np.isfinite(disc_weights)):
                raise TrainingDivergedError(f"epoch {epoch} step {step}: discriminator weights are non-finite")
            disc = Discriminator(disc_weights)

            if pseudo_labels is None:
                f_loss = loss_F(clf, disc, src, tgt, config.lambda_adv, jobs)
            else:
                pseudo = [pseudo_labels[i] for i in tgt_idx]
                f_loss = loss_F_star(clf, disc, src, tgt, pseudo, config.lambda_adv, config.lambda_sl, jobs)
            _check_finite(epoch, step, loss_f=f_loss.value)
            clf_weights, sgd_state = sgd_step(clf.weights, f_loss.grad, config, sgd_state)
            if not np.all(np.isfinite(clf_weights)):
                raise TrainingDivergedError(f"epoch {epoch} step {step}: classifier weights are non-finite")
            clf = PixelClassifier(clf_weights)

            sums["seg"] += f_loss.terms["seg"]
            sums["adv"] += f_loss.terms["adv"]
            sums["sl"] += f_loss.terms.get("sl", 0.0)
            sums["d"] += d_loss.value

        miou = iou(evaluate(clf, eval_scenes, jobs)).miou if eval_scenes else None
        record = EpochRecord(
            epoch=epoch,
            loss_seg=sums["seg"] / steps,
            loss_adv=sums["adv"] / steps,
            loss_sl=sums["sl"] / steps,
            loss_d=sums["d"] / steps,
            target_miou=miou,
        )
        log.append(record)
        logger.debug("Epoch %d: %s", epoch, record)
    logger.info("Finished training, final target mIoU %s", log.records[-1].target_miou)
    return TrainResult(clf, disc, log)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    classifier: PixelClassifier
    discriminator: Discriminator
    header: Dict[str, Any]


def write_checkpoint(
    path: PathLike,
    clf: PixelClassifier,
    disc: Discriminator,
    config: Optional[TrainConfig] = None,
) -> Path:
    """Write ``SEGM`` magic, version, header length, JSON header, then float64 weights."""
    if disc.num_classes != clf.num_classes:
        raise ValueError("classifier and discriminator disagree on the class count")
    header = {
        "feature_dim": clf.feature_dim,
        "num_classes": clf.num_classes,
        "config": None if config is None else config.to_dict(),
        "config_hash": None if config is None else config_hash(config.to_dict()),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate([clf.weights.ravel(), disc.weights]).astype("<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prefix = _CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes))
    path.write_bytes(prefix + header_bytes + payload)
    return path


def read_checkpoint(path: PathLike) -> Checkpoint:
    """Read a checkpoint written by :func:`write_checkpoint`.

    Raises:
        BadMagicError, UnsupportedVersionError, TruncatedPayloadError: on a
            malformed file.
    """
    data = Path(path).read_bytes()
    if len(data) < _CHECKPOINT_PREFIX.size:
        raise TruncatedPayloadError(f"{path}: file too short for a checkpoint header")
    magic, version, header_len = _CHECKPOINT_PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, got {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    start = _CHECKPOINT_PREFIX.size
    end = start + header_len
    if len(data) < end:
        raise TruncatedPayloadError(f"{path}: checkpoint header is truncated")
    header = json.loads(data[start:end].decode("utf-8"))
    dim, classes = int(header["feature_dim"]), int(header["num_classes"])
    expected = (dim + 1) * classes + classes + 1
    payload = data[end:]
    if len(payload) != 8 * expected:
        raise TruncatedPayloadError(f"{path}: expected {8 * expected} payload bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8")
    split = (dim + 1) * classes
    return Checkpoint(
        PixelClassifier(values[:split].reshape(dim + 1, classes)),
        Discriminator(values[split:]),
        header,
    )
