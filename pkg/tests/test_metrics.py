"""Confusion matrices, classification reports, and color-histogram RMS."""

import json
import math

import numpy as np
import pytest

from seedcl.errors import EmptyMatrix, ShapeMismatch, UnknownLabel
from seedcl.image import Image
from seedcl.metrics import (
    classification_report,
    color_histogram,
    confusion_matrix,
    histogram_rms_difference,
    macro_average,
    precision_recall_f1,
    render_report,
    report_from_matrix,
)


# ---------------------------------------------------------------------------
# confusion_matrix


def test_perfect_predictions_are_diagonal():
    labels = ["a", "b", "c", "a", "b"]
    cm = confusion_matrix(labels, list(labels), ["a", "b", "c"])
    assert np.array_equal(cm, np.diag([2, 2, 1]))


def test_hand_counted_two_class_matrix():
    cm = confusion_matrix(["A", "A", "B"], ["A", "B", "B"], ["A", "B"])
    assert np.array_equal(cm, [[1, 1], [0, 1]])


def test_confusion_matrix_matches_counting_loop():
    rng = np.random.default_rng(0)
    classes = ["c0", "c1", "c2", "c3", "c4"]
    y_true = [classes[i] for i in rng.integers(0, 5, size=200)]
    y_pred = [classes[i] for i in rng.integers(0, 5, size=200)]
    cm = confusion_matrix(y_true, y_pred, classes)
    for i, t in enumerate(classes):
        for j, p in enumerate(classes):
            assert cm[i, j] == sum(1 for a, b in zip(y_true, y_pred) if a == t and b == p)


def test_confusion_matrix_rejects_unknown_labels():
    with pytest.raises(UnknownLabel):
        confusion_matrix(["x"], ["a"], ["a", "b"])
    with pytest.raises(UnknownLabel):
        confusion_matrix(["a"], ["x"], ["a", "b"])
    with pytest.raises(ShapeMismatch):
        confusion_matrix(["a", "a"], ["a"], ["a"])


# ---------------------------------------------------------------------------
# precision / recall / F1


def test_prf1_direct_formulas():
    # one class with tp=3, fp=1, fn=0 inside a 2-class matrix
    cm = np.array([[3, 0], [1, 5]])
    p, r, f1 = precision_recall_f1(cm)
    assert p[0] == pytest.approx(0.75)
    assert r[0] == pytest.approx(1.0)
    assert f1[0] == pytest.approx(6.0 / 7.0, abs=1e-12)


def test_prf1_free_of_nan_on_empty_classes():
    cm = np.array([[0, 0], [0, 4]])
    p, r, f1 = precision_recall_f1(cm)
    assert (p[0], r[0], f1[0]) == (0.0, 0.0, 0.0)
    assert (p[1], r[1], f1[1]) == (1.0, 1.0, 1.0)


def test_prf1_renders_high_f1_to_two_decimals():
    # precision 0.96, recall 1.00 -> f1 0.9796, displayed as 0.98
    cm = np.array([[48, 0], [2, 50]])
    p, r, f1 = precision_recall_f1(cm)
    assert p[0] == pytest.approx(0.96)
    assert r[0] == pytest.approx(1.0)
    assert f1[0] == pytest.approx(2 * 0.96 / 1.96, abs=1e-12)
    report = report_from_matrix(cm, ["canola", "other"])
    line = [ln for ln in render_report(report).splitlines() if ln.strip().startswith("canola")][0]
    assert "0.98" in line


def test_f1_between_min_and_max_of_p_and_r():
    rng = np.random.default_rng(1)
    cm = rng.integers(1, 50, size=(4, 4))
    p, r, f1 = precision_recall_f1(cm)
    assert np.all(f1 <= np.maximum(p, r) + 1e-12)
    assert np.all(f1 >= np.minimum(p, r) - 1e-12)


# ---------------------------------------------------------------------------
# classification_report


def test_macro_rows_match_printed_table_values():
    simclr_precision = [0.60, 0.83, 1.00, 0.77, 0.32]
    assert macro_average(simclr_precision) == pytest.approx(0.704, abs=1e-12)
    moco_f1 = [0.91, 0.85, 0.56, 0.95, 0.55]
    assert macro_average(moco_f1) == pytest.approx(0.764, abs=1e-12)


def test_single_class_report_is_its_own_macro():
    report = report_from_matrix(np.array([[5]]), ["only"])
    assert report.accuracy == 1.0
    assert report.macro_precision == report.precision[0] == 1.0
    assert report.macro_f1 == report.f1[0]


def test_report_macro_equals_mean_of_per_class():
    rng = np.random.default_rng(2)
    cm = rng.integers(0, 30, size=(5, 5)) + np.diag(rng.integers(5, 40, size=5))
    report = report_from_matrix(cm, [f"c{i}" for i in range(5)])
    assert report.macro_precision == pytest.approx(np.mean(report.precision), abs=1e-12)
    assert report.macro_recall == pytest.approx(np.mean(report.recall), abs=1e-12)
    assert report.macro_f1 == pytest.approx(np.mean(report.f1), abs=1e-12)
    assert report.accuracy == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-12)


def test_report_rejects_empty_matrices():
    with pytest.raises(EmptyMatrix):
        report_from_matrix(np.zeros((2, 2), dtype=int), ["a", "b"])
    with pytest.raises(EmptyMatrix):
        macro_average([])


def test_rendered_report_layout_and_json():
    report = classification_report(["a", "a", "b", "b"], ["a", "a", "b", "a"], ["a", "b"])
    text = render_report(report)
    lines = text.splitlines()
    assert lines[0].split() == ["precision", "recall", "f1-score", "support"]
    assert any(ln.strip().startswith("accuracy") for ln in lines)
    assert any(ln.strip().startswith("macro avg") for ln in lines)
    parsed = json.loads(report.to_json())
    assert parsed["accuracy"] == pytest.approx(0.75)
    assert parsed["classes"]["a"]["precision"] == pytest.approx(2.0 / 3.0)
    assert parsed["macro avg"]["support"] == 4


def test_rendered_values_round_half_up():
    # accuracy total 200 correct 101 -> 0.505, renders 0.51 under half-up
    cm = np.array([[101, 99], [0, 0]])
    report_text = render_report(report_from_matrix(cm, ["a", "b"]))
    acc_line = [ln for ln in report_text.splitlines() if ln.strip().startswith("accuracy")][0]
    assert "0.51" in acc_line


# ---------------------------------------------------------------------------
# color histograms


def test_constant_image_histogram_is_single_bin():
    hist = color_histogram(Image.solid(4, 4, (10, 20, 30)))
    assert hist.shape == (3, 256)
    assert hist[0, 10] == 1.0 and hist[1, 20] == 1.0 and hist[2, 30] == 1.0
    assert np.count_nonzero(hist) == 3


def test_histogram_channels_sum_to_one():
    rng = np.random.default_rng(3)
    img = Image(rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8))
    hist = color_histogram(img)
    assert np.allclose(hist.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(hist >= 0)


def test_two_pixel_histogram_half_half():
    px = np.array([[[0, 0, 0], [255, 255, 255]]], dtype=np.uint8)
    hist = color_histogram(Image(px))
    for ch in range(3):
        assert hist[ch, 0] == 0.5 and hist[ch, 255] == 0.5


def test_histogram_rms_zero_symmetry_and_value():
    h1 = color_histogram(Image.solid(4, 4, (0, 0, 0)))
    h2 = color_histogram(Image.solid(4, 4, (10, 10, 10)))
    assert histogram_rms_difference(h1, h1) == 0.0
    d12 = histogram_rms_difference(h1, h2)
    d21 = histogram_rms_difference(h2, h1)
    assert d12 == d21
    assert d12 == pytest.approx(math.sqrt(6.0 / 768.0), abs=1e-9)
    assert d12 == pytest.approx(0.08839, abs=1e-5)


def test_histogram_rms_shape_check():
    with pytest.raises(ShapeMismatch):
        histogram_rms_difference(np.zeros((3, 256)), np.zeros((3, 128)))
