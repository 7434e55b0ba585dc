"""Self-training experiments, sweeps, comparisons and the paired benchmark."""

from dataclasses import replace

import numpy as np
import pytest

from pseudolabel_lab import selftrain
from pseudolabel_lab.mapcore import NULL, EntropyMap, ProbMap, PseudoLabelMap, read_pseudolabels, write_pseudolabels
from pseudolabel_lab.metrics import MetricsReport
from pseudolabel_lab.model import train_uda
from pseudolabel_lab.selftrain import (
    BenchmarkResult,
    ExperimentReport,
    ExtractionMode,
    PairedRun,
    SelfTrainPlan,
    compare_reports,
    extract_pseudo_labels,
    read_experiment,
    run_selftrain,
    sweep_frame,
    sweep_nu,
    train_baseline,
    verify_pseudolabels,
)
from pseudolabel_lab.settings import ConfigError
from pseudolabel_lab.synth import Dataset, gen_domain_pair
from pseudolabel_lab.thresholds import ClassThresholds


@pytest.fixture
def baseline(small_dataset, quick_config):
    return train_baseline(small_dataset, quick_config, jobs=1)


def plan_for(mode, config, **kwargs):
    return SelfTrainPlan(mode, train=config, jobs=1, **kwargs)


def test_plan_validation(quick_config):
    with pytest.raises(ValueError):
        SelfTrainPlan(ExtractionMode.ESL, nu_star=None)
    with pytest.raises(ValueError):
        SelfTrainPlan(ExtractionMode.SSL, mu_star=1.5)
    with pytest.raises(ValueError):
        SelfTrainPlan(ExtractionMode.SSL, iterations=0)
    with pytest.raises(ValueError):
        SelfTrainPlan(ExtractionMode.SSL, mu_star=0.0)
    with pytest.raises(ValueError):
        SelfTrainPlan(ExtractionMode.ESL, nu_star=0.0)
    assert SelfTrainPlan(ExtractionMode.ESL, nu_star=1.0).hyper == 1.0
    assert SelfTrainPlan(ExtractionMode.ESL, nu_star=None, median_only=True).hyper is None
    assert SelfTrainPlan("ssl").extraction_mode is ExtractionMode.SSL
    assert ExtractionMode.SSL.kind.value != ExtractionMode.ESL.kind.value


def test_plan_from_dict(quick_config):
    plan = plan_for(ExtractionMode.ESL, quick_config, manifest="data/manifest.json")
    assert SelfTrainPlan.from_dict(plan.to_dict()) == plan
    with pytest.raises(ConfigError):
        SelfTrainPlan.from_dict(dict(plan.to_dict(), extraction_mode=3))
    with pytest.raises(ConfigError):
        SelfTrainPlan.from_dict(dict(plan.to_dict(), threshold=0.2))


def test_run_without_data_is_rejected(quick_config):
    with pytest.raises(ValueError):
        run_selftrain(plan_for(ExtractionMode.ESL, quick_config))


def test_extraction_uses_thresholds_from_the_whole_target_set(baseline, small_dataset, quick_config):
    plan = plan_for(ExtractionMode.ESL, quick_config)
    thresholds, pseudo = extract_pseudo_labels(baseline.classifier, small_dataset.target_features(), plan)
    assert len(pseudo) == len(small_dataset.target)
    assert thresholds.values.shape == (3,)
    assert any(p.labeled.any() for p in pseudo)


def test_target_labels_only_reach_evaluation(monkeypatch, small_dataset, quick_config):
    train_calls = []
    extract_calls = []
    real_train, real_extract = selftrain.train_uda, selftrain.extract

    def train_spy(source, target_features, config, eval_scenes=None, pseudo_labels=None, jobs=1):
        train_calls.append((target_features, eval_scenes, pseudo_labels))
        return real_train(source, target_features, config, eval_scenes, pseudo_labels, jobs)

    def extract_spy(prob, thresholds, ent=None):
        extract_calls.append((prob, thresholds, ent))
        return real_extract(prob, thresholds, ent)

    monkeypatch.setattr(selftrain, "train_uda", train_spy)
    monkeypatch.setattr(selftrain, "extract", extract_spy)
    run_selftrain(plan_for(ExtractionMode.ESL, quick_config, iterations=2), small_dataset)

    assert len(train_calls) == 3
    assert train_calls[0][2] is None
    target_ids = {id(scene) for scene in small_dataset.target}
    for target_features, eval_scenes, _ in train_calls:
        assert all(isinstance(x, np.ndarray) for x in target_features)
        assert eval_scenes is small_dataset.target_eval
        assert not target_ids & {id(scene) for scene in eval_scenes}
    for _, _, pseudo_labels in train_calls[1:]:
        assert all(isinstance(p, PseudoLabelMap) for p in pseudo_labels)
        assert len(pseudo_labels) == len(small_dataset.target)

    assert len(extract_calls) == 2 * len(small_dataset.target)
    for prob, thresholds, ent in extract_calls:
        assert isinstance(prob, ProbMap)
        assert isinstance(thresholds, ClassThresholds)
        assert isinstance(ent, EntropyMap)


def test_evaluation_scenes_do_not_change_training(small_spec, small_shift, quick_config):
    dataset = Dataset.from_pair(gen_domain_pair(small_spec, small_shift, 2, 2, jobs=1))
    assert dataset.eval_scenes() is dataset.target
    features = dataset.target_features()
    evaluated = train_uda(dataset.source, features, quick_config, eval_scenes=dataset.eval_scenes(), jobs=1)
    blind = train_uda(dataset.source, features, quick_config, eval_scenes=None, jobs=1)
    assert evaluated.classifier.weights.tobytes() == blind.classifier.weights.tobytes()
    assert evaluated.discriminator.weights.tobytes() == blind.discriminator.weights.tobytes()
    assert all(record.target_miou is None for record in blind.log.records)


def test_zero_pseudo_label_weight_reproduces_the_baseline(small_dataset, quick_config, baseline):
    config = replace(quick_config, lambda_sl=0.0)
    report = run_selftrain(plan_for(ExtractionMode.SSL, config), small_dataset, baseline)
    assert report.final.metrics.miou == report.baseline.miou
    assert report.final.metrics.per_class_iou == report.baseline.per_class_iou


def test_run_is_reproducible(small_dataset, quick_config):
    plan = plan_for(ExtractionMode.ESL, quick_config)
    first = run_selftrain(plan, small_dataset)
    second = run_selftrain(plan, small_dataset)
    assert first.to_dict() == second.to_dict()


def test_run_writes_every_stage(tmp_path, small_spec, small_dataset, quick_config, baseline):
    plan = plan_for(ExtractionMode.ESL, quick_config, iterations=2, output_dir=str(tmp_path))
    report = run_selftrain(plan, small_dataset, baseline)

    for stage in ("baseline", "iter_1", "iter_2"):
        assert (tmp_path / stage / "model.segm").exists()
        assert (tmp_path / stage / "metrics.json").exists()
    assert (tmp_path / "iter_1" / "thresholds.json").exists()
    assert (tmp_path / "iter_2" / "pseudo_quality.json").exists()
    assert len(list((tmp_path / "iter_1" / "pseudolabels").iterdir())) == 3

    assert [it.iteration for it in report.iterations] == [1, 2]
    assert report.seeds == {"train": quick_config.seed, "synth": small_spec.seed}
    assert read_experiment(tmp_path / "report.json") == report


def test_stored_pseudo_labels_verify(tmp_path, small_dataset, quick_config, baseline):
    plan = plan_for(ExtractionMode.SSL, quick_config, iterations=2, output_dir=str(tmp_path))
    run_selftrain(plan, small_dataset, baseline)
    assert verify_pseudolabels(tmp_path, small_dataset, 1, jobs=1)
    assert verify_pseudolabels(tmp_path, small_dataset, 2, jobs=1)

    path = tmp_path / "iter_1" / "pseudolabels" / "00000.segl"
    stored = read_pseudolabels(path)
    flipped = np.where(stored.labels == NULL, 0, NULL)
    write_pseudolabels(PseudoLabelMap(flipped, stored.num_classes), path)
    assert not verify_pseudolabels(tmp_path, small_dataset, 1, jobs=1)


def test_pseudo_quality_is_scored_against_target_labels(small_dataset, quick_config, baseline):
    report = run_selftrain(plan_for(ExtractionMode.ESL, quick_config), small_dataset, baseline)
    quality = report.final.pseudo_quality
    assert quality.miou is None
    assert 0.0 < quality.coverage <= 1.0
    assert report.final.metrics.relative_change.metric == "iou"
    assert report.final.thresholds["kind"] == "entropy"


def test_report_iteration_count_is_checked():
    baseline = MetricsReport("baseline", 2)
    with pytest.raises(ValueError):
        ExperimentReport({"iterations": 2}, baseline, [])


def test_sweep(tmp_path, small_dataset, quick_config):
    plan = plan_for(ExtractionMode.SSL, quick_config, output_dir=str(tmp_path))
    reports = sweep_nu(plan, [0.1, 0.25], dataset=small_dataset, jobs=1)

    assert list(reports) == ["nu=0.1", "nu=0.25", "median"]
    assert reports["nu=0.25"].plan["nu_star"] == 0.25
    assert reports["median"].plan["median_only"] is True
    assert all(r.plan["extraction_mode"] == "esl" for r in reports.values())
    assert len({r.baseline.miou for r in reports.values()}) == 1
    assert (tmp_path / "median" / "report.json").exists()
    assert all(r.seeds == {"train": quick_config.seed, "synth": small_dataset.synth_seed} for r in reports.values())

    frame = sweep_frame(reports)
    assert frame["setting"].tolist() == ["nu=0.1", "nu=0.25", "median"]
    with pytest.raises(ValueError):
        sweep_nu(plan, [], dataset=small_dataset)


def test_compare_reports(tmp_path, small_dataset, quick_config, baseline):
    ssl = run_selftrain(plan_for(ExtractionMode.SSL, quick_config), small_dataset, baseline)
    esl = run_selftrain(plan_for(ExtractionMode.ESL, quick_config), small_dataset, baseline)
    comparison = compare_reports(ssl, esl)

    assert (comparison.name_a, comparison.name_b) == ("ssl", "esl")
    assert [row["id"] for row in comparison.rows] == ["0", "1", "2"]
    summary = comparison.summary
    assert summary["iou_delta"] == pytest.approx(summary["iou_b"] - summary["iou_a"])
    csv_path = comparison.write(tmp_path)
    assert csv_path.exists() and (tmp_path / "comparison.json").exists()


def test_compare_rejects_different_class_counts():
    a = ExperimentReport({}, MetricsReport("a", 2), [])
    b = ExperimentReport({}, MetricsReport("b", 3), [])
    with pytest.raises(ValueError):
        compare_reports(a, b)


def paired(seed, ssl_miou, esl_miou, ssl_incorrect=0.2, esl_incorrect=0.1):
    return PairedRun(seed, 0.4, ssl_miou, esl_miou, ssl_incorrect, esl_incorrect, 3.0)


def test_sign_test_drops_ties():
    result = BenchmarkResult(
        [
            paired(0, 0.5, 0.6),
            paired(1, 0.5, 0.55),
            paired(2, 0.5, 0.7),
            paired(3, 0.5, 0.4, esl_incorrect=0.3),
            paired(4, 0.5, 0.5),
        ]
    )
    test = result.sign_test()
    assert (test["wins"], test["trials"]) == (3, 4)
    assert test["p_value"] == pytest.approx(5 / 16)
    assert result.esl_cleaner == 4


def test_benchmark_files(tmp_path):
    result = BenchmarkResult([paired(0, 0.5, 0.6), paired(1, 0.5, 0.5)])
    json_path = result.write(tmp_path)
    assert json_path.name == "benchmark.json"
    assert (tmp_path / "benchmark.csv").exists()
    summary = result.summary()
    assert summary["seeds"] == 2
    assert summary["mean_esl_miou"] == pytest.approx(0.55)
    assert summary["sign_test"]["p_value"] == pytest.approx(0.5)


def test_benchmark_needs_seeds():
    with pytest.raises(ValueError):
        selftrain.run_paired_benchmark([])
