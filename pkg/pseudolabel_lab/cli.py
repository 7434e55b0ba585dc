"""Command-line interface of the pseudo-label lab."""

from __future__ import annotations

import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import jsonschema

from pseudolabel_lab.confidence import ConfidenceKind, entropy_maps
from pseudolabel_lab.extraction import coverage, excluded_by_entropy, extract, pseudo_label_diff
from pseudolabel_lab.mapcore import (
    LABEL_SUFFIX,
    PROB_SUFFIX,
    MapValidationError,
    ProbMap,
    list_maps,
    read_labelmap,
    read_probmap,
    read_pseudolabels,
    validate,
    write_probmap,
    write_pseudolabels,
)
from pseudolabel_lab.metrics import (
    MetricsReport,
    build_report,
    confusion,
    format_report,
    pseudo_confusion,
    read_report,
    relative_change,
    sum_confusions,
    write_report,
)
from pseudolabel_lab.model import TrainConfig, TrainingDivergedError, evaluate, forward, train_uda, write_checkpoint
from pseudolabel_lab.render import diff_image, label_image, panel_image, save_png
from pseudolabel_lab.selftrain import (
    DEFAULT_NU_SWEEP,
    ExtractionMode,
    SelfTrainPlan,
    compare_reports,
    read_experiment,
    run_paired_benchmark,
    run_selftrain,
    sweep_frame,
    sweep_nu,
)
from pseudolabel_lab.settings import (
    SYNTH_CONFIG_SCHEMA,
    TRAIN_CONFIG_SCHEMA,
    ConfigError,
    config_hash,
    dump_json,
    layer_config,
    load_json,
    provenance_file,
    run_directory,
    validate_config,
    write_provenance,
)
from pseudolabel_lab.sinks import Ledger
from pseudolabel_lab.synth import (
    BENCHMARK_SIZES,
    DomainShiftSpec,
    SceneSpec,
    default_benchmark,
    gen_domain_pair,
    load_manifest,
    write_dataset,
)
from pseudolabel_lab.thresholds import (
    DEFAULT_MU_STAR,
    DEFAULT_NU_STAR,
    compute_thresholds,
    read_thresholds,
    reclamp,
    write_thresholds,
)
from pseudolabel_lab.workers import map_ordered

logger = logging.getLogger(__name__)

EXIT_IO = 3
EXIT_INVALID = 4
EXIT_DIVERGED = 5

HYPER_RANGE = click.FloatRange(0, 1, min_open=True)


class LabGroup(click.Group):
    """Maps failures to exit codes: 3 I/O, 4 validation or format, 5 divergence."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except TrainingDivergedError as e:
            self._fail(ctx, "training diverged", e, EXIT_DIVERGED)
        except OSError as e:
            self._fail(ctx, "I/O error", e, EXIT_IO)
        except (ValueError, ArithmeticError, LookupError, jsonschema.ValidationError) as e:
            self._fail(ctx, "invalid input", e, EXIT_INVALID)

    @staticmethod
    def _fail(ctx: click.Context, what: str, error: Exception, code: int) -> None:
        logger.debug("Command failed", exc_info=error)
        click.echo(f"Error: {what}: {error}", err=True)
        ctx.exit(code)


def _jobs_option(f):
    return click.option("--jobs", type=click.IntRange(min=1), default=None, help="Worker count per image stage.")(f)


def _ledger_option(f):
    return click.option("--ledger", default=None, help="SQLAlchemy URL of a results ledger to load reports into.")(f)


def _config_option(f):
    return click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON config file."
    )(f)


def _file_config(path: Optional[str], schema: dict, name: str) -> Dict[str, Any]:
    return {} if path is None else validate_config(load_json(path), schema, name)


def _train_flags(**flags: Any) -> Dict[str, Any]:
    return {key: value for key, value in flags.items() if value is not None}


def _read_valid_probmaps(directory: str, jobs: Optional[int]) -> Tuple[List[Path], List[ProbMap]]:
    paths = list_maps(directory, PROB_SUFFIX)
    if not paths:
        raise ValueError(f"no {PROB_SUFFIX} files in {directory}")
    probs = map_ordered(read_probmap, paths, jobs)
    for path, prob in zip(paths, probs):
        problem = validate(prob)
        if problem is not None:
            raise MapValidationError(f"{path}: {problem}")
    return paths, probs


def _kind(mode: str) -> ConfidenceKind:
    return ExtractionMode(mode).kind


def _hyper(mode: str, mu_star: Optional[float], nu_star: Optional[float]) -> float:
    if mode == ExtractionMode.SSL.value:
        return DEFAULT_MU_STAR if mu_star is None else mu_star
    return DEFAULT_NU_STAR if nu_star is None else nu_star


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from e


def _parse_ints(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from e


@click.group(cls=LabGroup)
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
)
def cli(log_level: str) -> None:
    """Entropy- and softmax-guided pseudo-labels for self-training segmentation models."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@cli.command()
@_config_option
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Benchmark seed when no config is given.")
@click.option("--n-source", type=click.IntRange(min=1), default=None)
@click.option("--n-target", type=click.IntRange(min=1), default=None)
@click.option("--n-target-eval", type=click.IntRange(min=0), default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Base output directory.")
@_jobs_option
def synth(
    config_path: Optional[str],
    seed: Optional[int],
    n_source: Optional[int],
    n_target: Optional[int],
    n_target_eval: Optional[int],
    out: str,
    jobs: Optional[int],
) -> None:
    """Generate a source/target synthetic dataset and its manifest."""
    spec, shift = default_benchmark(seed or 0)
    defaults = {"scene": spec.to_dict(), "shift": shift.to_dict(), **BENCHMARK_SIZES}
    file_config = _file_config(config_path, SYNTH_CONFIG_SCHEMA, "synth config")
    effective = layer_config(defaults, file_config, {"n_source": n_source, "n_target": n_target})
    if n_target_eval is not None:
        effective["n_target_eval"] = n_target_eval
    if seed is not None:
        effective["scene"] = dict(effective["scene"], seed=seed)
    run_dir, done = run_directory(out, effective)
    if not done:
        spec = SceneSpec.from_dict(effective["scene"])
        shift = DomainShiftSpec.from_dict(effective["shift"])
        pair = gen_domain_pair(
            spec, shift, effective["n_source"], effective["n_target"], effective.get("n_target_eval", 0), jobs
        )
        write_dataset(pair, run_dir, spec, shift)
        write_provenance(run_dir, "synth", effective, {"scene": spec.seed})
    click.echo(str(run_dir / "manifest.json"))


@cli.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@_config_option
@click.option("--pseudo", type=click.Path(exists=True, file_okay=False), default=None, help="Target pseudo-labels.")
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.option("--lambda-adv", type=click.FloatRange(min=0), default=None)
@click.option("--lambda-sl", type=click.FloatRange(min=0), default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_jobs_option
def train(
    manifest: str,
    config_path: Optional[str],
    pseudo: Optional[str],
    epochs: Optional[int],
    seed: Optional[int],
    lambda_adv: Optional[float],
    lambda_sl: Optional[float],
    out: str,
    jobs: Optional[int],
) -> None:
    """Train a segmenter; writes a checkpoint, the training log and target predictions."""
    flags = _train_flags(epochs=epochs, seed=seed, lambda_adv=lambda_adv, lambda_sl=lambda_sl)
    config = TrainConfig.from_dict(
        layer_config(TrainConfig().to_dict(), _file_config(config_path, TRAIN_CONFIG_SCHEMA, "train config"), flags)
    )
    effective = {"train": config.to_dict(), "manifest": str(Path(manifest).resolve()), "pseudo": pseudo}
    run_dir, done = run_directory(out, effective)
    if not done:
        dataset = load_manifest(manifest, jobs)
        pseudo_labels = None
        if pseudo is not None:
            pseudo_labels = [read_pseudolabels(p) for p in list_maps(pseudo, LABEL_SUFFIX)]
        result = train_uda(
            dataset.source, dataset.target_features(), config, dataset.eval_scenes(), pseudo_labels, jobs
        )
        write_checkpoint(run_dir / "model.segm", result.classifier, result.discriminator, config)
        result.log.write(run_dir / "train_log.json")
        report = build_report("train", prediction=evaluate(result.classifier, dataset.eval_scenes(), jobs))
        write_report(report, run_dir)
        for i, features in enumerate(dataset.target_features()):
            write_probmap(forward(result.classifier, features), run_dir / "preds" / f"{i:05d}{PROB_SUFFIX}")
        inputs = [manifest] + ([pseudo] if pseudo else [])
        write_provenance(run_dir, "train", effective, {"train": config.seed}, inputs)
        click.echo(format_report(report))
    click.echo(str(run_dir))


@cli.command()
@click.option("--mode", required=True, type=click.Choice([m.value for m in ExtractionMode]))
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mu-star", type=HYPER_RANGE, default=None)
@click.option("--nu-star", type=HYPER_RANGE, default=None)
@click.option("--median-only", is_flag=True, help="Use unclamped per-class medians.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_jobs_option
def thresholds(
    mode: str,
    in_dir: str,
    mu_star: Optional[float],
    nu_star: Optional[float],
    median_only: bool,
    out: str,
    jobs: Optional[int],
) -> None:
    """Compute per-class thresholds over a directory of probability maps."""
    paths, probs = _read_valid_probmaps(in_dir, jobs)
    kind = _kind(mode)
    entropies = entropy_maps(probs, jobs) if kind is ConfidenceKind.ENTROPY else None
    hyper = None if median_only else _hyper(mode, mu_star, nu_star)
    result = compute_thresholds(probs, kind, hyper, entropies, jobs)
    write_thresholds(result, out)
    config = {"mode": mode, "hyper": hyper, "median_only": median_only, "in": in_dir}
    out_path = Path(out)
    write_provenance(out_path.parent, "thresholds", config, inputs=paths, file_name=provenance_file(out_path.stem))
    click.echo(out)


@cli.command()
@click.option("--mode", required=True, type=click.Choice([m.value for m in ExtractionMode]))
@click.option("--thresholds", "thresholds_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mu-star", type=HYPER_RANGE, default=None, help="Re-clamp the stored medians.")
@click.option("--nu-star", type=HYPER_RANGE, default=None, help="Re-clamp the stored medians.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_jobs_option
def extract_cmd(
    mode: str,
    thresholds_path: str,
    in_dir: str,
    mu_star: Optional[float],
    nu_star: Optional[float],
    out: str,
    jobs: Optional[int],
) -> None:
    """Extract pseudo-labels from probability maps with stored thresholds."""
    kind = _kind(mode)
    stored = read_thresholds(thresholds_path)
    if stored.kind is not kind:
        raise ValueError(f"{thresholds_path} holds {stored.kind.value} thresholds, mode {mode} needs {kind.value}")
    hyper = mu_star if kind is ConfidenceKind.SOFTMAX else nu_star
    active = stored if hyper is None else reclamp(stored, hyper)
    paths, probs = _read_valid_probmaps(in_dir, jobs)
    entropies = entropy_maps(probs, jobs) if kind is ConfidenceKind.ENTROPY else [None] * len(probs)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: Dict[str, Any] = {"files": {}}
    labeled = total = 0
    for path, prob, ent in zip(paths, probs, entropies):
        labels = extract(prob, active, ent)
        write_pseudolabels(labels, out_dir / f"{path.stem}{LABEL_SUFFIX}")
        cov = coverage(labels)
        summary["files"][path.stem] = {"coverage": cov.fraction, "per_class_counts": list(cov.per_class_counts)}
        labeled, total = labeled + cov.labeled, total + cov.total
    summary["coverage"] = labeled / total
    dump_json(summary, out_dir / "summary.json")
    config = {"mode": mode, "thresholds": thresholds_path, "hyper": active.hyper, "in": in_dir}
    write_provenance(out_dir, "extract", config, inputs=[thresholds_path] + paths)
    click.echo(f"{len(paths)} pseudo-label maps, coverage {100.0 * summary['coverage']:.1f}%")


cli.add_command(extract_cmd, name="extract")


def _paired_maps(pred_dir: str, gt_dir: str) -> List[Tuple[Path, Path]]:
    preds = list_maps(pred_dir, LABEL_SUFFIX)
    gts = {p.name: p for p in list_maps(gt_dir, LABEL_SUFFIX)}
    missing = [p.name for p in preds if p.name not in gts]
    if not preds or missing:
        raise ValueError(f"every map in {pred_dir} needs a ground truth in {gt_dir}; missing: {missing or 'all'}")
    return [(p, gts[p.name]) for p in preds]


@cli.command()
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--classes", "num_classes", required=True, type=click.IntRange(min=2, max=255))
@click.option("--pseudo", is_flag=True, help="Treat --pred as pseudo-labels: incorrect ratios and coverage.")
@click.option("--class-subset", default=None, help="Comma-separated class ids entering the mIoU.")
@click.option("--baseline", type=click.Path(exists=True, dir_okay=False), default=None, help="Baseline report JSON.")
@click.option("--name", default="metrics", show_default=True)
@click.option(
    "--out", type=click.Path(file_okay=False), default=None, help="Report directory; defaults to <pred>/<name>."
)
@_ledger_option
@_jobs_option
def metrics(
    pred_dir: str,
    gt_dir: str,
    num_classes: int,
    pseudo: bool,
    class_subset: Optional[str],
    baseline: Optional[str],
    name: str,
    out: Optional[str],
    ledger: Optional[str],
    jobs: Optional[int],
) -> None:
    """Evaluate label maps (or pseudo-labels) against ground truth."""
    pairs = _paired_maps(pred_dir, gt_dir)

    def tally(pair: Tuple[Path, Path]):
        gt = read_labelmap(pair[1])
        if gt.num_classes != num_classes:
            raise ValueError(f"{pair[1]} has {gt.num_classes} classes, expected {num_classes}")
        if pseudo:
            return pseudo_confusion(read_pseudolabels(pair[0]), gt)
        return confusion(read_labelmap(pair[0]), gt)

    cm = sum_confusions(map_ordered(tally, pairs, jobs))
    subset = _parse_ints(class_subset)
    report = build_report(name, pseudo=cm) if pseudo else build_report(name, prediction=cm, class_subset=subset)
    if baseline is not None:
        metric = "incorrect_ratio" if pseudo else "iou"
        report = replace(report, relative_change=relative_change(report, read_report(baseline), metric))
    click.echo(format_report(report))
    config = {"pred": pred_dir, "gt": gt_dir, "classes": num_classes, "pseudo": pseudo, "class_subset": subset}
    out_dir = Path(pred_dir) / name if out is None else Path(out)
    write_report(report, out_dir)
    write_provenance(out_dir, "metrics", config, inputs=[p for pair in pairs for p in pair])
    if ledger is not None:
        Ledger(ledger).record(config_hash(config), "metrics", report, "metrics", config)


@cli.command()
@click.option("--ssl", "ssl_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--esl", "esl_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def diff(ssl_dir: str, esl_dir: str, out: str) -> None:
    """Compare SSL and ESL pseudo-labels; writes diff PNGs, the labels excluded by entropy and category counts."""
    pairs = _paired_maps(ssl_dir, esl_dir)
    out_dir = Path(out)
    totals: Dict[str, int] = {}
    files = {}
    for ssl_path, esl_path in pairs:
        ssl, esl = read_pseudolabels(ssl_path), read_pseudolabels(esl_path)
        result = pseudo_label_diff(ssl, esl)
        files[ssl_path.stem] = result.counts
        for key, count in result.counts.items():
            totals[key] = totals.get(key, 0) + count
        write_pseudolabels(excluded_by_entropy(ssl, esl), out_dir / "excluded" / ssl_path.name)
        save_png(diff_image(result), out_dir / f"{ssl_path.stem}.diff.png")
    dump_json({"totals": totals, "files": files}, out_dir / "diff.json")
    write_provenance(out_dir, "diff", {"ssl": ssl_dir, "esl": esl_dir}, inputs=[p for pair in pairs for p in pair])
    click.echo(", ".join(f"{key} {count}" for key, count in totals.items()))


def _plan(
    plan_path: Optional[str],
    flags: Dict[str, Any],
    train_flags: Dict[str, Any],
) -> SelfTrainPlan:
    file_config = {} if plan_path is None else load_json(plan_path)
    if not isinstance(file_config, dict):
        raise ConfigError(f"{plan_path}: a self-training plan must be a JSON object")
    defaults = SelfTrainPlan(ExtractionMode.ESL).to_dict()
    merged = layer_config(defaults, file_config, flags)
    merged["train"] = layer_config(TrainConfig().to_dict(), merged.get("train") or {}, train_flags)
    if merged.get("manifest") is None:
        raise ConfigError("a manifest is required, in the plan file or with --manifest")
    merged["manifest"] = str(Path(merged["manifest"]).resolve())
    merged["output_dir"] = None
    merged.pop("jobs", None)
    return SelfTrainPlan.from_dict({k: v for k, v in merged.items() if v is not None})


def _plan_options(f):
    options = [
        click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False), default=None),
        click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None),
        click.option("--mu-star", type=HYPER_RANGE, default=None),
        click.option("--nu-star", type=HYPER_RANGE, default=None),
        click.option("--iterations", type=click.IntRange(min=1), default=None),
        click.option("--lambda-adv", type=click.FloatRange(min=0), default=None),
        click.option("--lambda-sl", type=click.FloatRange(min=0), default=None),
        click.option("--epochs", type=click.IntRange(min=1), default=None),
        click.option("--seed", type=click.IntRange(min=0), default=None),
        click.option("--out", required=True, type=click.Path(file_okay=False)),
    ]
    for option in reversed(options):
        f = option(f)
    return f


@cli.command()
@_plan_options
@click.option("--mode", type=click.Choice([m.value for m in ExtractionMode]), default=None)
@click.option("--median-only", is_flag=True, help="Use unclamped per-class medians.")
@_ledger_option
@_jobs_option
def selftrain(
    plan_path: Optional[str],
    manifest: Optional[str],
    mu_star: Optional[float],
    nu_star: Optional[float],
    iterations: Optional[int],
    lambda_adv: Optional[float],
    lambda_sl: Optional[float],
    epochs: Optional[int],
    seed: Optional[int],
    out: str,
    mode: Optional[str],
    median_only: bool,
    ledger: Optional[str],
    jobs: Optional[int],
) -> None:
    """Run self-training: baseline, pseudo-label extraction, retraining from scratch."""
    flags = {
        "extraction_mode": mode,
        "manifest": manifest,
        "mu_star": mu_star,
        "nu_star": nu_star,
        "iterations": iterations,
        "median_only": median_only or None,
    }
    train_flags = _train_flags(lambda_adv=lambda_adv, lambda_sl=lambda_sl, epochs=epochs, seed=seed)
    plan = _plan(plan_path, flags, train_flags)
    effective = plan.to_dict()
    run_dir, done = run_directory(out, effective)
    if done:
        report = read_experiment(run_dir / "report.json")
    else:
        report = run_selftrain(replace(plan, output_dir=str(run_dir), jobs=jobs))
        write_provenance(run_dir, "selftrain", effective, report.seeds, [plan.manifest])
    click.echo(format_report(report.baseline))
    for iteration in report.iterations:
        click.echo(format_report(iteration.metrics))
        click.echo(format_report(iteration.pseudo_quality))
    if ledger is not None:
        run_id = config_hash(effective)
        sink = Ledger(ledger)
        sink.record(run_id, "baseline", report.baseline, "selftrain", effective)
        for iteration in report.iterations:
            sink.record(run_id, f"iter_{iteration.iteration}", iteration.metrics, "selftrain", effective)
            sink.record(run_id, f"iter_{iteration.iteration}-pseudo", iteration.pseudo_quality, "selftrain", effective)
    click.echo(str(run_dir))


@cli.command()
@_plan_options
@click.option("--nu-stars", default=",".join(f"{v:g}" for v in DEFAULT_NU_SWEEP), show_default=True)
@click.option("--median-mode", is_flag=True, help="Add the unclamped-median setting.")
@_ledger_option
@_jobs_option
def sweep(
    plan_path: Optional[str],
    manifest: Optional[str],
    mu_star: Optional[float],
    nu_star: Optional[float],
    iterations: Optional[int],
    lambda_adv: Optional[float],
    lambda_sl: Optional[float],
    epochs: Optional[int],
    seed: Optional[int],
    out: str,
    nu_stars: str,
    median_mode: bool,
    ledger: Optional[str],
    jobs: Optional[int],
) -> None:
    """ESL self-training for several nu* values sharing one baseline."""
    values = _parse_floats(nu_stars)
    flags = {
        "extraction_mode": "esl",
        "manifest": manifest,
        "mu_star": mu_star,
        "nu_star": nu_star,
        "iterations": iterations,
    }
    train_flags = _train_flags(lambda_adv=lambda_adv, lambda_sl=lambda_sl, epochs=epochs, seed=seed)
    plan = _plan(plan_path, flags, train_flags)
    effective = dict(plan.to_dict(), nu_stars=values, median_mode=median_mode)
    run_dir, done = run_directory(out, effective)
    if done:
        reports = {p.parent.name: read_experiment(p) for p in sorted(run_dir.glob("*/report.json"))}
    else:
        reports = sweep_nu(replace(plan, output_dir=str(run_dir), jobs=jobs), values, median_mode, jobs=jobs)
        sweep_frame(reports).to_csv(run_dir / "sweep.csv", index=False, na_rep="")
        seeds = next(iter(reports.values())).seeds
        write_provenance(run_dir, "sweep", effective, seeds, [plan.manifest])
    click.echo(sweep_frame(reports).to_string(index=False))
    if ledger is not None:
        sink = Ledger(ledger)
        run_id = config_hash(effective)
        for key, report in reports.items():
            sink.record(run_id, key, report.final.metrics, "sweep", effective)
    click.echo(str(run_dir))


@cli.command()
@click.option("--a", "report_a", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--b", "report_b", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def compare(report_a: str, report_b: str, out: str) -> None:
    """Side-by-side comparison of two self-training reports."""
    comparison = compare_reports(read_experiment(report_a), read_experiment(report_b))
    comparison.write(out)
    write_provenance(out, "compare", {"a": report_a, "b": report_b}, inputs=[report_a, report_b])
    click.echo(comparison.to_frame().to_string(index=False))


@cli.command()
@click.option("--labels", "labels_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--gt", "gt_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--ssl", "ssl_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--esl", "esl_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--scale", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def render(
    labels_dir: Optional[str],
    gt_dir: Optional[str],
    ssl_dir: Optional[str],
    esl_dir: Optional[str],
    scale: int,
    out: str,
) -> None:
    """Render label maps, or ground-truth/SSL/ESL panels with diffs, as indexed PNGs."""
    out_dir = Path(out)
    written = []
    if labels_dir is not None:
        for path in list_maps(labels_dir, LABEL_SUFFIX):
            written.append(save_png(label_image(read_pseudolabels(path), scale), out_dir / f"{path.stem}.png"))
    if ssl_dir is not None or esl_dir is not None or gt_dir is not None:
        if None in (gt_dir, ssl_dir, esl_dir):
            raise click.UsageError("panels need --gt, --ssl and --esl together")
        for ssl_path, esl_path in _paired_maps(ssl_dir, esl_dir):
            gt = read_labelmap(Path(gt_dir) / ssl_path.name)
            ssl, esl = read_pseudolabels(ssl_path), read_pseudolabels(esl_path)
            stem = ssl_path.stem
            written.append(save_png(panel_image(gt, ssl, esl, scale), out_dir / f"{stem}.panel.png"))
            written.append(save_png(diff_image(pseudo_label_diff(ssl, esl), scale), out_dir / f"{stem}.diff.png"))
    if not written:
        raise click.UsageError("nothing to render: give --labels or --gt/--ssl/--esl")
    config = {"labels": labels_dir, "gt": gt_dir, "ssl": ssl_dir, "esl": esl_dir, "scale": scale}
    inputs = [d for d in (labels_dir, gt_dir, ssl_dir, esl_dir) if d is not None]
    write_provenance(out_dir, "render", config, inputs=inputs)
    click.echo(f"{len(written)} images written to {out_dir}")


@cli.command()
@click.option("--seeds", type=click.IntRange(min=1), default=10, show_default=True, help="Seeds 0..N-1.")
@click.option("--seed-list", default=None, help="Comma-separated seeds, overrides --seeds.")
@click.option("--mu-star", type=HYPER_RANGE, default=DEFAULT_MU_STAR, show_default=True)
@click.option("--nu-star", type=HYPER_RANGE, default=DEFAULT_NU_STAR, show_default=True)
@click.option("--lambda-adv", type=click.FloatRange(min=0), default=None)
@click.option("--lambda-sl", type=click.FloatRange(min=0), default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_ledger_option
@_jobs_option
def benchmark(
    seeds: int,
    seed_list: Optional[str],
    mu_star: float,
    nu_star: float,
    lambda_adv: Optional[float],
    lambda_sl: Optional[float],
    epochs: Optional[int],
    out: str,
    ledger: Optional[str],
    jobs: Optional[int],
) -> None:
    """Paired SSL/ESL self-training over seeds on the default synthetic benchmark."""
    seed_values: Sequence[int] = _parse_ints(seed_list) or list(range(seeds))
    config = TrainConfig.from_dict(
        layer_config(
            TrainConfig().to_dict(), None, _train_flags(lambda_adv=lambda_adv, lambda_sl=lambda_sl, epochs=epochs)
        )
    )
    effective = {"seeds": list(seed_values), "mu_star": mu_star, "nu_star": nu_star, "train": config.to_dict()}
    run_dir, done = run_directory(out, effective)
    if done:
        summary = load_json(run_dir / "benchmark.json")["summary"]
    else:
        result = run_paired_benchmark(seed_values, config, mu_star, nu_star, jobs)
        result.write(run_dir)
        summary = result.summary()
        if ledger is not None:
            _record_benchmark(Ledger(ledger), config_hash(effective), result, effective)
        write_provenance(run_dir, "benchmark", effective, {"seeds": len(seed_values)})
    click.echo(
        f"ESL pseudo-labels cleaner in {summary['esl_cleaner']}/{summary['seeds']} seeds; "
        f"mean mIoU baseline {summary['mean_baseline_miou']:.4f}, SSL {summary['mean_ssl_miou']:.4f}, "
        f"ESL {summary['mean_esl_miou']:.4f}; sign test p={summary['sign_test']['p_value']:.4f}"
    )
    click.echo(str(run_dir))


def _record_benchmark(sink: Ledger, run_id: str, result, effective: Dict[str, Any]) -> None:
    for run in result.runs:
        num_classes = default_benchmark(run.seed)[0].num_classes
        pairs = (("ssl", run.ssl_miou, run.ssl_incorrect), ("esl", run.esl_miou, run.esl_incorrect))
        for mode, miou, incorrect in pairs:
            report = MetricsReport(
                name=f"seed{run.seed}-{mode}", num_classes=num_classes, miou=miou, global_incorrect_ratio=incorrect
            )
            sink.record(run_id, f"seed{run.seed}-{mode}", report, "benchmark", effective)


if __name__ == "__main__":
    cli()
