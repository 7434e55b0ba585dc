"""Self-training: train, extract pseudo-labels, retrain from scratch; sweeps and paired benchmarks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import binomtest

from pseudolabel_lab.confidence import ConfidenceKind, entropy_maps
from pseudolabel_lab.extraction import extract
from pseudolabel_lab.mapcore import (
    LABEL_SUFFIX,
    PathLike,
    PseudoLabelMap,
    list_maps,
    read_pseudolabels,
    write_pseudolabels,
)
from pseudolabel_lab.metrics import (
    MetricsReport,
    build_report,
    pseudo_confusion,
    relative_change,
    sum_confusions,
    write_report,
)
from pseudolabel_lab.model import (
    PixelClassifier,
    TrainConfig,
    TrainResult,
    evaluate,
    forward,
    read_checkpoint,
    train_uda,
    write_checkpoint,
)
from pseudolabel_lab.settings import PLAN_SCHEMA, ConfigError, dump_json, load_json, validate_config
from pseudolabel_lab.synth import (
    BENCHMARK_SIZES,
    Dataset,
    boundary_entropy_gap,
    default_benchmark,
    gen_domain_pair,
    load_manifest,
)
from pseudolabel_lab.thresholds import (
    DEFAULT_MU_STAR,
    DEFAULT_NU_STAR,
    ClassThresholds,
    collect,
    compute_median_thresholds,
    compute_mu,
    compute_nu,
    read_thresholds,
    thresholds_report,
    write_thresholds,
)
from pseudolabel_lab.workers import map_ordered

logger = logging.getLogger(__name__)

DEFAULT_NU_SWEEP = (0.05, 0.1, 0.15, 0.2, 0.3)
MEDIAN_KEY = "median"
REPORT_FILE = "report.json"


class ExtractionMode(str, Enum):
    SSL = "ssl"
    ESL = "esl"

    @property
    def kind(self) -> ConfidenceKind:
        return ConfidenceKind.SOFTMAX if self is ExtractionMode.SSL else ConfidenceKind.ENTROPY


@dataclass(frozen=True)
class SelfTrainPlan:
    """One self-training experiment.

    ``median_only`` replaces the clamped thresholds by the per-class medians.
    """

    extraction_mode: ExtractionMode
    mu_star: Optional[float] = DEFAULT_MU_STAR
    nu_star: Optional[float] = DEFAULT_NU_STAR
    median_only: bool = False
    iterations: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: Optional[str] = None
    output_dir: Optional[str] = None
    jobs: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "extraction_mode", ExtractionMode(self.extraction_mode))
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.median_only:
            hyper = self.hyper
            if hyper is None or not 0.0 < hyper <= 1.0:
                raise ValueError(f"{self.extraction_mode.value} needs a hyperparameter in (0, 1], got {hyper}")

    @property
    def hyper(self) -> Optional[float]:
        return self.mu_star if self.extraction_mode is ExtractionMode.SSL else self.nu_star

    def to_dict(self) -> Dict[str, Any]:
        return {
            "extraction_mode": self.extraction_mode.value,
            "mu_star": self.mu_star,
            "nu_star": self.nu_star,
            "median_only": self.median_only,
            "iterations": self.iterations,
            "train": self.train.to_dict(),
            "manifest": self.manifest,
            "output_dir": self.output_dir,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SelfTrainPlan":
        data = dict(validate_config(data, PLAN_SCHEMA, "self-training plan"))
        data["train"] = TrainConfig.from_dict(data.get("train") or {})
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid self-training plan: {e}") from e


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    metrics: MetricsReport
    pseudo_quality: MetricsReport
    thresholds: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "metrics": self.metrics.to_dict(),
            "pseudo_quality": self.pseudo_quality.to_dict(),
            "thresholds": self.thresholds,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IterationReport":
        return cls(
            int(data["iteration"]),
            MetricsReport.from_dict(data["metrics"]),
            MetricsReport.from_dict(data["pseudo_quality"]),
            data["thresholds"],
        )


@dataclass(frozen=True)
class ExperimentReport:
    """Baseline and per-iteration evaluation of one self-training plan.

    ``seeds`` holds the scene-generation seed (when the dataset records one)
    and the training seed. Extraction is deterministic and draws none.
    """

    plan: Dict[str, Any]
    baseline: MetricsReport
    iterations: List[IterationReport]
    seeds: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = self.plan.get("iterations")
        if expected is not None and len(self.iterations) != expected:
            raise ValueError(f"plan asks for {expected} iterations, report holds {len(self.iterations)}")

    @property
    def final(self) -> IterationReport:
        return self.iterations[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "plan": self.plan,
            "seeds": self.seeds,
            "baseline": self.baseline.to_dict(),
            "iterations": [it.to_dict() for it in self.iterations],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentReport":
        return cls(
            plan=data["plan"],
            baseline=MetricsReport.from_dict(data["baseline"]),
            iterations=[IterationReport.from_dict(it) for it in data["iterations"]],
            seeds=data.get("seeds", {}),
        )

    def write(self, out_dir: PathLike) -> Path:
        return dump_json(self.to_dict(), Path(out_dir) / REPORT_FILE)


def read_experiment(path: PathLike) -> ExperimentReport:
    return ExperimentReport.from_dict(load_json(path))


def _thresholds_for(plan: SelfTrainPlan, probs, entropies) -> ClassThresholds:
    bag = collect(probs, plan.extraction_mode.kind, entropies, plan.jobs)
    if plan.median_only:
        return compute_median_thresholds(bag)
    if plan.extraction_mode is ExtractionMode.SSL:
        return compute_mu(bag, plan.mu_star)
    return compute_nu(bag, plan.nu_star)


def extract_pseudo_labels(
    clf: PixelClassifier, target_features: Sequence[np.ndarray], plan: SelfTrainPlan
) -> Tuple[ClassThresholds, List[PseudoLabelMap]]:
    """Forward the target set, compute thresholds over all of it and extract.

    Returns:
        ``(thresholds, pseudo_labels)``.
    """
    probs = map_ordered(lambda x: forward(clf, x), target_features, plan.jobs)
    entropies = entropy_maps(probs, plan.jobs) if plan.extraction_mode is ExtractionMode.ESL else None
    thresholds = _thresholds_for(plan, probs, entropies)
    pseudo = [
        extract(prob, thresholds, None if entropies is None else entropies[i]) for i, prob in enumerate(probs)
    ]
    return thresholds, pseudo


def train_baseline(dataset: Dataset, config: TrainConfig, jobs: Optional[int] = None) -> TrainResult:
    """Step 1: adversarial training without pseudo-labels."""
    return train_uda(dataset.source, dataset.target_features(), config, eval_scenes=dataset.eval_scenes(), jobs=jobs)


def _stage_dir(plan: SelfTrainPlan, name: str) -> Optional[Path]:
    return None if plan.output_dir is None else Path(plan.output_dir) / name


def _save_stage(stage_dir: Optional[Path], result: TrainResult, config: TrainConfig, report: MetricsReport) -> None:
    if stage_dir is None:
        return
    write_checkpoint(stage_dir / "model.segm", result.classifier, result.discriminator, config)
    result.log.write(stage_dir / "train_log.json")
    write_report(report, stage_dir)


def _pseudo_dir(stage_dir: Path) -> Path:
    return stage_dir / "pseudolabels"


def _save_pseudo_labels(
    stage_dir: Optional[Path], thresholds: ClassThresholds, pseudo: Sequence[PseudoLabelMap]
) -> None:
    if stage_dir is None:
        return
    write_thresholds(thresholds, stage_dir / "thresholds.json")
    out = _pseudo_dir(stage_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, labels in enumerate(pseudo):
        write_pseudolabels(labels, out / f"{i:05d}{LABEL_SUFFIX}")


def run_selftrain(
    plan: SelfTrainPlan,
    dataset: Optional[Dataset] = None,
    baseline: Optional[TrainResult] = None,
) -> ExperimentReport:
    """Train, extract pseudo-labels with the plan's thresholds, retrain from scratch; repeat.

    Target labels are used only to evaluate: training sees target features
    and pseudo-labels.

    Args:
        plan: the experiment.
        dataset: scenes; loaded from ``plan.manifest`` when omitted.
        baseline: an already trained step-1 model to reuse.

    Raises:
        TrainingDivergedError: propagated from any training stage.
    """
    if dataset is None:
        if plan.manifest is None:
            raise ValueError("plan has no manifest and no dataset was given")
        dataset = load_manifest(plan.manifest, plan.jobs)
    eval_scenes = dataset.eval_scenes()
    target_features = dataset.target_features()

    if baseline is None:
        logger.info("Training baseline model")
        baseline = train_baseline(dataset, plan.train, plan.jobs)
    baseline_report = build_report("baseline", prediction=evaluate(baseline.classifier, eval_scenes, plan.jobs))
    _save_stage(_stage_dir(plan, "baseline"), baseline, plan.train, baseline_report)

    mode = plan.extraction_mode.value
    current = baseline.classifier
    iterations = []
    for k in range(1, plan.iterations + 1):
        stage_dir = _stage_dir(plan, f"iter_{k}")
        thresholds, pseudo = extract_pseudo_labels(current, target_features, plan)
        quality_cm = sum_confusions(pseudo_confusion(p, scene.labels) for p, scene in zip(pseudo, dataset.target))
        quality = build_report(f"{mode}-iter{k}-pseudo", pseudo=quality_cm)
        logger.info(
            "Iteration %d: %s pseudo-labels cover %.3f of the target set, global incorrect ratio %s",
            k,
            mode,
            quality.coverage or 0.0,
            quality.global_incorrect_ratio,
        )
        if not any(p.labeled.any() for p in pseudo):
            logger.warning("Iteration %d extracted no pseudo-labels; retraining reduces to the baseline objective", k)
        _save_pseudo_labels(stage_dir, thresholds, pseudo)

        retrained = train_uda(
            dataset.source,
            target_features,
            plan.train,
            eval_scenes=eval_scenes,
            pseudo_labels=pseudo,
            jobs=plan.jobs,
        )
        metrics = build_report(f"{mode}-iter{k}", prediction=evaluate(retrained.classifier, eval_scenes, plan.jobs))
        metrics = replace(metrics, relative_change=relative_change(metrics, baseline_report, "iou"))
        _save_stage(stage_dir, retrained, plan.train, metrics)
        if stage_dir is not None:
            write_report(quality, stage_dir, stem="pseudo_quality")

        iterations.append(IterationReport(k, metrics, quality, thresholds_report(thresholds)))
        current = retrained.classifier

    seeds = {"train": plan.train.seed}
    if dataset.synth_seed is not None:
        seeds["synth"] = dataset.synth_seed
    report = ExperimentReport(plan.to_dict(), baseline_report, iterations, seeds=seeds)
    if plan.output_dir is not None:
        report.write(plan.output_dir)
    return report


def verify_pseudolabels(output_dir: PathLike, dataset: Dataset, iteration: int, jobs: Optional[int] = None) -> bool:
    """Re-extract iteration ``iteration`` from its stored inputs and compare with the files on disk.

    The extracting model is the baseline for iteration 1 and the model of
    iteration ``k - 1`` afterwards.
    """
    output_dir = Path(output_dir)
    source_stage = "baseline" if iteration == 1 else f"iter_{iteration - 1}"
    clf = read_checkpoint(output_dir / source_stage / "model.segm").classifier
    stage_dir = output_dir / f"iter_{iteration}"
    thresholds = read_thresholds(stage_dir / "thresholds.json")
    stored = [read_pseudolabels(p) for p in list_maps(_pseudo_dir(stage_dir), LABEL_SUFFIX)]
    probs = map_ordered(lambda x: forward(clf, x), dataset.target_features(), jobs)
    if len(stored) != len(probs):
        return False
    entropies = entropy_maps(probs, jobs) if thresholds.kind is ConfidenceKind.ENTROPY else [None] * len(probs)
    return all(
        np.array_equal(extract(prob, thresholds, ent).labels, labels.labels)
        for prob, ent, labels in zip(probs, entropies, stored)
    )


def _sweep_key(nu_star: Optional[float]) -> str:
    return MEDIAN_KEY if nu_star is None else f"nu={nu_star:g}"


def sweep_nu(
    plan: SelfTrainPlan,
    nu_values: Sequence[float] = DEFAULT_NU_SWEEP,
    include_median_mode: bool = True,
    dataset: Optional[Dataset] = None,
    jobs: Optional[int] = None,
) -> Dict[str, ExperimentReport]:
    """One ESL self-training run per ``nu*`` value, plus the median-only limit.

    The baseline model is trained once and shared. Runs execute in parallel,
    each writing under ``<output_dir>/<key>``.

    Returns:
        Reports keyed ``nu=<value>`` and ``median``, in sweep order.
    """
    if not nu_values:
        raise ValueError("sweep_nu needs at least one nu* value")
    if dataset is None:
        if plan.manifest is None:
            raise ValueError("plan has no manifest and no dataset was given")
        dataset = load_manifest(plan.manifest, plan.jobs)
    base_plan = replace(plan, extraction_mode=ExtractionMode.ESL, jobs=1)
    baseline = train_baseline(dataset, plan.train, plan.jobs)

    def sub_plan(nu_star: Optional[float]) -> SelfTrainPlan:
        key = _sweep_key(nu_star)
        output_dir = None if plan.output_dir is None else str(Path(plan.output_dir) / key)
        if nu_star is None:
            return replace(base_plan, median_only=True, output_dir=output_dir)
        return replace(base_plan, nu_star=float(nu_star), median_only=False, output_dir=output_dir)

    values: List[Optional[float]] = list(nu_values) + ([None] if include_median_mode else [])
    logger.info("Sweeping %d settings: %s", len(values), ", ".join(_sweep_key(v) for v in values))
    reports = map_ordered(lambda v: run_selftrain(sub_plan(v), dataset, baseline), values, jobs)
    return {_sweep_key(v): r for v, r in zip(values, reports)}


def sweep_frame(reports: Dict[str, ExperimentReport]) -> pd.DataFrame:
    """Final-iteration target mIoU and pseudo-label quality per sweep setting."""
    rows = []
    for key, report in reports.items():
        final = report.final
        rows.append(
            {
                "setting": key,
                "baseline_miou": report.baseline.miou,
                "miou": final.metrics.miou,
                "global_incorrect_ratio": final.pseudo_quality.global_incorrect_ratio,
                "coverage": final.pseudo_quality.coverage,
            }
        )
    return pd.DataFrame(rows)


def _delta(a: Optional[float], b: Optional[float]) -> Optional[float]:
    return None if a is None or b is None else b - a


@dataclass(frozen=True)
class ReportComparison:
    """Side-by-side comparison of two experiments' final iterations; deltas are ``b - a``."""

    name_a: str
    name_b: str
    rows: List[Dict[str, Any]]
    summary: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        return {"a": self.name_a, "b": self.name_b, "classes": self.rows, "summary": self.summary}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows + [dict(self.summary, id="global")], dtype=object)

    def write(self, out_dir: PathLike, stem: str = "comparison") -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_json(self.to_dict(), out_dir / f"{stem}.json")
        csv_path = out_dir / f"{stem}.csv"
        self.to_frame().to_csv(csv_path, index=False, na_rep="")
        return csv_path


def compare_reports(a: ExperimentReport, b: ExperimentReport) -> ReportComparison:
    """Compare per-class IoU and pseudo-label incorrect ratios of two experiments.

    Relative changes are of ``b``'s incorrect ratios against ``a``'s.

    Raises:
        ValueError: the experiments cover different class sets.
    """
    if a.baseline.num_classes != b.baseline.num_classes:
        raise ValueError(f"cannot compare {a.baseline.num_classes}- and {b.baseline.num_classes}-class reports")
    fa, fb = a.final, b.final
    global_a = fa.pseudo_quality.global_incorrect_ratio
    global_b = fb.pseudo_quality.global_incorrect_ratio
    change = relative_change(fb.pseudo_quality, fa.pseudo_quality, "incorrect_ratio")
    rows = []
    for c in range(a.baseline.num_classes):
        iou_a, iou_b = fa.metrics.per_class_iou[c], fb.metrics.per_class_iou[c]
        wrong_a = fa.pseudo_quality.per_class_incorrect_ratio[c]
        wrong_b = fb.pseudo_quality.per_class_incorrect_ratio[c]
        rows.append(
            {
                "id": str(c),
                "iou_a": iou_a,
                "iou_b": iou_b,
                "iou_delta": _delta(iou_a, iou_b),
                "incorrect_a": wrong_a,
                "incorrect_b": wrong_b,
                "incorrect_delta": _delta(wrong_a, wrong_b),
                "incorrect_relative_change": change.per_class[c],
            }
        )
    summary = {
        "iou_a": fa.metrics.miou,
        "iou_b": fb.metrics.miou,
        "iou_delta": _delta(fa.metrics.miou, fb.metrics.miou),
        "incorrect_a": global_a,
        "incorrect_b": global_b,
        "incorrect_delta": _delta(global_a, global_b),
        "incorrect_relative_change": change.overall,
    }
    return ReportComparison(a.plan.get("extraction_mode", "a"), b.plan.get("extraction_mode", "b"), rows, summary)


@dataclass(frozen=True)
class PairedRun:
    seed: int
    baseline_miou: Optional[float]
    ssl_miou: Optional[float]
    esl_miou: Optional[float]
    ssl_incorrect: Optional[float]
    esl_incorrect: Optional[float]
    boundary_z: float


@dataclass(frozen=True)
class BenchmarkResult:
    """Paired SSL/ESL runs over seeds, with win counts and a one-sided sign test."""

    runs: List[PairedRun]

    @property
    def esl_cleaner(self) -> int:
        """Seeds where ESL pseudo-labels are at most as often wrong as SSL's."""
        return sum(
            1
            for r in self.runs
            if r.esl_incorrect is not None and r.ssl_incorrect is not None and r.esl_incorrect <= r.ssl_incorrect
        )

    def sign_test(self) -> Dict[str, Any]:
        """One-sided sign test of ESL mIoU > SSL mIoU; ties are dropped."""
        diffs = [
            r.esl_miou - r.ssl_miou for r in self.runs if r.esl_miou is not None and r.ssl_miou is not None
        ]
        wins = sum(1 for d in diffs if d > 0)
        trials = sum(1 for d in diffs if d != 0)
        p_value = binomtest(wins, trials, 0.5, alternative="greater").pvalue if trials else 1.0
        return {"wins": wins, "trials": trials, "p_value": float(p_value)}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.runs])

    def summary(self) -> Dict[str, Any]:
        frame = self.to_frame()
        return {
            "seeds": len(self.runs),
            "esl_cleaner": self.esl_cleaner,
            "mean_baseline_miou": float(frame["baseline_miou"].mean()),
            "mean_ssl_miou": float(frame["ssl_miou"].mean()),
            "mean_esl_miou": float(frame["esl_miou"].mean()),
            "mean_ssl_incorrect": float(frame["ssl_incorrect"].mean()),
            "mean_esl_incorrect": float(frame["esl_incorrect"].mean()),
            "sign_test": self.sign_test(),
        }

    def write(self, out_dir: PathLike) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out_dir / "benchmark.csv", index=False, na_rep="")
        record = {"runs": [asdict(r) for r in self.runs], "summary": self.summary()}
        return dump_json(record, out_dir / "benchmark.json")


def run_paired_benchmark(
    seeds: Sequence[int],
    config: TrainConfig = TrainConfig(),
    mu_star: float = DEFAULT_MU_STAR,
    nu_star: float = DEFAULT_NU_STAR,
    jobs: Optional[int] = None,
) -> BenchmarkResult:
    """SSL and ESL self-training on the default benchmark for every seed.

    Both runs of a seed share the scenes, the baseline model and the
    retraining seed, so they differ only in how pseudo-labels are filtered.
    """
    if not seeds:
        raise ValueError("run_paired_benchmark needs at least one seed")

    def one_seed(seed: int) -> PairedRun:
        spec, shift = default_benchmark(seed)
        dataset = Dataset.from_pair(gen_domain_pair(spec, shift, jobs=1, **BENCHMARK_SIZES), synth_seed=spec.seed)
        seed_config = replace(config, seed=seed)
        baseline = train_baseline(dataset, seed_config, jobs=1)
        reports = {}
        for mode in ExtractionMode:
            plan = SelfTrainPlan(mode, mu_star=mu_star, nu_star=nu_star, train=seed_config, jobs=1)
            reports[mode] = run_selftrain(plan, dataset, baseline)
        eval_scenes = dataset.eval_scenes()
        probs = [forward(baseline.classifier, s.features) for s in eval_scenes]
        gap = boundary_entropy_gap(eval_scenes, entropy_maps(probs, jobs=1))
        ssl, esl = reports[ExtractionMode.SSL], reports[ExtractionMode.ESL]
        logger.info("Seed %d: SSL mIoU %s, ESL mIoU %s", seed, ssl.final.metrics.miou, esl.final.metrics.miou)
        return PairedRun(
            seed=seed,
            baseline_miou=ssl.baseline.miou,
            ssl_miou=ssl.final.metrics.miou,
            esl_miou=esl.final.metrics.miou,
            ssl_incorrect=ssl.final.pseudo_quality.global_incorrect_ratio,
            esl_incorrect=esl.final.pseudo_quality.global_incorrect_ratio,
            boundary_z=gap.z_score,
        )

    return BenchmarkResult(map_ordered(one_seed, seeds, jobs))
