"""Confusion tallies, IoU and pseudo-label incorrect ratios."""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from pseudolabel_lab.mapcore import NULL, VOID, LabelMap, PseudoLabelMap
from pseudolabel_lab.metrics import (
    ConfusionMatrix,
    MetricsReport,
    build_report,
    confusion,
    format_report,
    incorrect_ratio,
    iou,
    pseudo_confusion,
    read_report,
    relative_change,
    sum_confusions,
    write_report,
)


@pytest.fixture
def gt():
    return LabelMap(np.array([[0, 1], [VOID, 0]]), 2)


def test_confusion_skips_void(gt):
    cm = confusion(LabelMap(np.array([[0, 1], [1, 1]]), 2), gt)
    assert_array_equal(cm.counts, [[1, 1], [0, 1]])
    assert cm.void_pixels == 1
    assert cm.total == 3


def test_iou_and_pixel_accuracy(gt):
    scores = iou(confusion(LabelMap(np.array([[0, 1], [1, 1]]), 2), gt))
    assert scores.per_class == (0.5, 0.5)
    assert scores.miou == 0.5
    assert scores.pixel_accuracy == pytest.approx(2 / 3)


def test_identical_maps_score_one(gt):
    prediction = LabelMap(np.array([[0, 1], [0, 0]]), 2)
    assert iou(confusion(prediction, gt)).miou == 1.0


def test_undefined_iou_is_left_out_of_the_mean():
    truth = LabelMap(np.array([[0, 0, 1]]), 3)
    scores = iou(confusion(LabelMap(np.array([[0, 0, 1]]), 3), truth))
    assert scores.per_class == (1.0, 1.0, None)
    assert scores.miou == 1.0


def test_class_subset():
    truth = LabelMap(np.array([[0, 1, 2]]), 3)
    cm = confusion(LabelMap(np.array([[0, 1, 1]]), 3), truth)
    assert iou(cm, class_subset=[0]).miou == 1.0
    assert iou(cm, class_subset=[1, 2]).miou == pytest.approx(0.25)
    with pytest.raises(ValueError):
        iou(cm, class_subset=[3])


def test_void_prediction_rejected(gt):
    with pytest.raises(ValueError):
        confusion(LabelMap(np.array([[0, VOID], [1, 1]]), 2), gt)


def test_shape_and_class_mismatch(gt):
    with pytest.raises(ValueError):
        confusion(LabelMap(np.zeros((3, 2), int), 2), gt)
    with pytest.raises(ValueError):
        confusion(LabelMap(np.zeros((2, 2), int), 3), gt)


def test_incorrect_ratio_uses_pseudo_label_columns():
    truth = LabelMap(np.array([[0, 0], [0, 1]]), 2)
    pseudo = PseudoLabelMap(np.array([[0, NULL], [1, 1]]), 2)
    ratios = incorrect_ratio(pseudo, truth)
    assert ratios.per_class == (0.0, 0.5)
    assert ratios.global_ratio == pytest.approx(1 / 3)
    assert ratios.labeled_counts == (1, 2)
    assert ratios.wrong_counts == (0, 1)


def test_class_without_pseudo_labels_is_undefined():
    truth = LabelMap(np.array([[0, 1]]), 2)
    ratios = incorrect_ratio(PseudoLabelMap(np.array([[0, NULL]]), 2), truth)
    assert ratios.per_class == (0.0, None)
    assert incorrect_ratio(PseudoLabelMap(np.array([[NULL, NULL]]), 2), truth).global_ratio is None


def test_pseudo_report_coverage():
    truth = LabelMap(np.array([[0, 0], [0, 1]]), 2)
    cm = pseudo_confusion(PseudoLabelMap(np.array([[0, NULL], [1, 1]]), 2), truth)
    assert cm.null_pixels == 1
    report = build_report("pl", pseudo=cm)
    assert report.coverage == 0.75
    assert report.pseudo_counts == (1, 2)
    assert report.miou is None


def test_sum_confusions():
    a = ConfusionMatrix(np.array([[1, 0], [0, 1]]), void_pixels=2)
    b = ConfusionMatrix(np.array([[0, 3], [1, 0]]), null_pixels=1)
    total = sum_confusions([a, b])
    assert_array_equal(total.counts, [[1, 3], [1, 1]])
    assert (total.void_pixels, total.null_pixels) == (2, 1)
    with pytest.raises(ValueError):
        a + ConfusionMatrix.empty(3)
    with pytest.raises(ValueError):
        sum_confusions([])


def test_relative_change():
    base = MetricsReport("base", 2, per_class_incorrect_ratio=(0.5, 0.0), global_incorrect_ratio=0.4)
    new = MetricsReport("new", 2, per_class_incorrect_ratio=(0.25, 0.1), global_incorrect_ratio=0.3)
    change = relative_change(new, base)
    assert change.per_class == (-50.0, None)
    assert change.overall == pytest.approx(-25.0)
    assert change.baseline == "base"


def test_relative_change_of_iou():
    base = MetricsReport("base", 2, per_class_iou=(0.5, 0.4), miou=0.45)
    new = MetricsReport("new", 2, per_class_iou=(0.55, None), miou=0.55)
    change = relative_change(new, base, "iou")
    assert change.per_class[0] == pytest.approx(10.0)
    assert change.per_class[1] is None


def test_report_files(tmp_path, gt):
    prediction = confusion(LabelMap(np.array([[0, 1], [1, 1]]), 2), gt)
    pseudo = pseudo_confusion(PseudoLabelMap(np.array([[0, NULL], [1, 1]]), 2), gt)
    report = build_report("run", prediction=prediction, pseudo=pseudo)
    json_path, csv_path = write_report(report, tmp_path)
    assert read_report(json_path) == report

    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    assert list(frame.columns) == ["id", "iou", "incorrect_ratio", "count", "pseudo_count"]
    assert frame["id"].tolist() == ["0", "1", "global"]
    assert float(frame.loc[2, "iou"]) == report.miou


def test_csv_leaves_undefined_cells_empty(tmp_path):
    report = MetricsReport("x", 2, per_class_iou=(None, 1.0), miou=1.0)
    _, csv_path = write_report(report, tmp_path)
    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    assert frame.loc[0, "iou"] == ""
    assert frame.loc[0, "incorrect_ratio"] == ""


def test_format_report_uses_percent():
    report = MetricsReport("run", 2, per_class_iou=(0.5, 0.25), miou=0.375)
    text = format_report(report)
    assert text.splitlines()[0] == "run: mIoU 37.5  global incorrect -"
    assert "50.0" in text and "25.0" in text


@pytest.mark.parametrize("seed", range(20))
def test_iou_is_equivariant_under_class_relabeling(seed):
    rng = np.random.default_rng(seed)
    num_classes = 4
    gt_ids = rng.integers(0, num_classes, size=(6, 6))
    pred_ids = np.where(rng.random((6, 6)) < 0.6, gt_ids, rng.integers(0, num_classes, size=(6, 6)))
    gt_ids[rng.random((6, 6)) < 0.1] = VOID
    perm = rng.permutation(num_classes)

    def relabel(ids):
        return np.where(ids == VOID, VOID, perm[np.minimum(ids, num_classes - 1)])

    base = iou(confusion(LabelMap(pred_ids, num_classes), LabelMap(gt_ids, num_classes)))
    moved = iou(confusion(LabelMap(relabel(pred_ids), num_classes), LabelMap(relabel(gt_ids), num_classes)))
    assert [moved.per_class[perm[c]] for c in range(num_classes)] == list(base.per_class)
    assert moved.miou == pytest.approx(base.miou, rel=1e-12)
    assert moved.pixel_accuracy == base.pixel_accuracy


@pytest.mark.parametrize("seed", range(20))
def test_global_incorrect_ratio_is_the_count_weighted_class_mean(seed):
    rng = np.random.default_rng(seed)
    num_classes = 3 + seed % 3
    gt = LabelMap(rng.integers(0, num_classes, size=(8, 8)), num_classes)
    guesses = np.where(rng.random((8, 8)) < 0.5, gt.labels, rng.integers(0, num_classes, size=(8, 8)))
    pseudo = PseudoLabelMap(np.where(rng.random((8, 8)) < 0.4, NULL, guesses), num_classes)
    ratio = incorrect_ratio(pseudo, gt)
    weighted = sum(n * r for n, r in zip(ratio.labeled_counts, ratio.per_class) if r is not None)
    assert ratio.global_ratio == pytest.approx(weighted / sum(ratio.labeled_counts), rel=1e-12)
