import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphparse import metrics as mt
from graphparse.errors import DataError, UsageError


def cm_of(pred, gt, k):
    return mt.accumulate(mt.ConfusionMatrix.empty(k), np.array(pred), np.array(gt))


def test_hand_counted_example():
    # gt:   0 0 1 1 1 ; pred: 0 1 1 1 0 -> class 1: tp 2, fp 1, fn 1
    cm = cm_of([[0, 1, 1, 1, 0]], [[0, 0, 1, 1, 1]], 2)
    assert cm.counts.tolist() == [[1, 1], [1, 2]]
    r = mt.compute(cm)
    assert r["pixel_acc"] == 3 / 5
    assert r["iou"][1] == 2 / 4 and r["iou"][0] == 1 / 3
    assert r["acc"][1] == 2 / 3
    assert r["f1"][1] == 4 / 6
    assert r["mean_f1"] == 4 / 6


def test_second_hand_example():
    gt = [[1, 1, 1, 2], [2, 2, 0, 0]]
    pred = [[1, 1, 1, 1], [2, 2, 0, 1]]
    r = mt.compute(cm_of(pred, gt, 3))
    assert r["iou"][1] == 3 / 5
    assert r["pixel_acc"] == 6 / 8
    assert r["acc"].tolist() == [0.5, 1.0, 2 / 3]


def test_perfect_prediction():
    m = np.arange(12).reshape(3, 4) % 4
    r = mt.compute(cm_of(m, m, 4))
    assert r["mean_iou"] == 1.0 and r["pixel_acc"] == 1.0 and r["mean_f1"] == 1.0


def test_absent_classes_are_excluded_and_nan():
    r = mt.compute(cm_of([[0, 1]], [[0, 1]], 5))
    assert r["mean_iou"] == 1.0
    assert np.isnan(r["iou"][3]) and np.isnan(r["acc"][4])


def test_predicted_but_absent_class_counts_in_iou_vector():
    r = mt.compute(cm_of([[2, 1]], [[0, 1]], 3))
    assert r["iou"][2] == 0.0
    assert r["mean_iou"] == 0.5     # class 2 absent from gt, not averaged


def test_exclude_background_and_f1_flags():
    cm = cm_of([[0, 1, 1, 0]], [[0, 0, 1, 1]], 2)
    assert mt.compute(cm, exclude_background=True)["mean_iou"] == 1 / 3
    both = mt.compute(cm, f1_foreground_only=False)["mean_f1"]
    assert both == 0.5


def test_errors():
    with pytest.raises(UsageError):
        mt.compute(mt.ConfusionMatrix.empty(3))
    with pytest.raises(DataError):
        cm_of([[0, 1]], [[0]], 2)
    with pytest.raises(DataError):
        cm_of([[0, 5]], [[0, 1]], 2)
    with pytest.raises(DataError):
        mt.ConfusionMatrix.empty(2) + mt.ConfusionMatrix.empty(3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2, 7, 20]))
def test_merge_is_order_independent(seed, k):
    rs = np.random.default_rng(seed)
    pairs = [(rs.integers(0, k, (8, 8)), rs.integers(0, k, (8, 8))) for _ in range(4)]
    a = mt.ConfusionMatrix.empty(k)
    for p, g in pairs:
        a = mt.accumulate(a, p, g)
    b = mt.ConfusionMatrix.empty(k)
    for p, g in reversed(pairs):
        b = b + cm_of(p, g, k)
    assert np.array_equal(a.counts, b.counts) and a.total == 256


def test_hierarchy_consistency():
    lut = [0, 1, 1, 2]
    fine = np.array([[0, 1, 2, 3]])
    assert mt.hierarchy_consistency(fine, np.array([[0, 1, 1, 2]]), lut) == 1.0
    assert mt.hierarchy_consistency(fine, np.array([[0, 1, 2, 2]]), lut) == 0.75
    with pytest.raises(DataError):
        mt.hierarchy_consistency(fine, np.zeros((2, 2)), lut)


def test_report_formats():
    r = mt.compute(cm_of([[0, 1, 1]], [[0, 1, 2]], 3))
    table = mt.format_report(r, ["bg", "a", "b"], title="demo")
    assert table.splitlines()[0] == "demo" and "mean_iou" in table
    lines = mt.format_lines(r, ["bg", "a", "b"]).splitlines()
    assert lines[0].startswith("pixel_acc\t*\t")
    assert "iou\tb\t0.0" in lines
    assert len(lines) == 4 + 3 * 3
