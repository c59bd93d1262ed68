import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfutissue.metrics import (ConfusionCounts, aggregate_report, confusion_counts, dsc_from_iou,
                               metrics_from_counts)


def brute_force_counts(pred, gt, k):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == k and g == k:
            tp += 1
        elif p == k:
            fp += 1
        elif g == k:
            fn += 1
    return tp, fp, fn


def brute_force_metrics(tp, fp, fn):
    return {"precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
            "dsc": 2 * tp / (2 * tp + fp + fn),
            "iou": tp / (tp + fp + fn)}


def test_vectorised_counts_equal_pixel_loop(rng):
    for _ in range(100):
        pred = rng.integers(0, 4, size=(16, 16))
        gt = rng.integers(0, 4, size=(16, 16))
        c = confusion_counts(pred, gt, 4)
        m = metrics_from_counts(c)
        for k in range(4):
            tp, fp, fn = brute_force_counts(pred, gt, k)
            assert (c.tp[k], c.fp[k], c.fn[k]) == (tp, fp, fn)
            if tp + fp + fn:
                assert m[k] == brute_force_metrics(tp, fp, fn)


def test_identical_masks_have_no_errors(rng):
    gt = rng.integers(0, 4, size=(9, 9))
    c = confusion_counts(gt, gt)
    assert not c.fp.any() and not c.fn.any()
    assert c.tn.tolist() == [81 - t for t in c.tp.tolist()]


def test_hand_counted_2x2():
    pred = np.array([[1, 1], [1, 0]])
    gt = np.array([[1, 1], [0, 0]])
    c = confusion_counts(pred, gt)
    assert (c.tp[1], c.fp[1], c.fn[1]) == (2, 1, 0)


def test_hand_metrics():
    m = metrics_from_counts(ConfusionCounts([2], [1], [1]))[0]
    for key in ("precision", "recall", "dsc"):
        assert m[key] == pytest.approx(2 / 3)
    assert m["iou"] == pytest.approx(0.5)
    assert metrics_from_counts(ConfusionCounts([5], [0], [0]))[0] == {
        "precision": 1.0, "recall": 1.0, "dsc": 1.0, "iou": 1.0}


def test_zero_denominator_conventions():
    m = metrics_from_counts(ConfusionCounts([0, 0, 0], [0, 3, 0], [0, 0, 2]))
    assert m[0] == {"precision": 1.0, "recall": 1.0, "dsc": 1.0, "iou": 1.0}
    assert m[1]["precision"] == 0.0 and m[1]["recall"] == 0.0
    assert m[2]["precision"] == 0.0 and m[2]["dsc"] == 0.0


@given(tp=st.integers(0, 1000), fp=st.integers(0, 1000), fn=st.integers(0, 1000))
def test_dsc_iou_identity(tp, fp, fn):
    if tp + fp + fn == 0:
        return
    m = metrics_from_counts(ConfusionCounts([tp], [fp], [fn]))[0]
    assert m["dsc"] == pytest.approx(dsc_from_iou(m["iou"]), abs=1e-12)
    assert 0 <= m["iou"] <= m["dsc"] <= 1


@pytest.mark.parametrize("iou,dsc", [(73.75, 84.89), (77.99, 87.64), (52.68, 69.01), (86.89, 92.99)])
def test_published_pairs_satisfy_identity(iou, dsc):
    assert abs(100 * dsc_from_iou(iou / 100) - dsc) < 0.01


@given(pred=arrays(np.int64, (5, 5), elements=st.integers(0, 3)),
       gt=arrays(np.int64, (5, 5), elements=st.integers(0, 3)))
def test_counts_partition_pixels(pred, gt):
    c = confusion_counts(pred, gt)
    assert c.tp.sum() + c.fn.sum() == 25
    assert c.tp.sum() + c.fp.sum() == 25
    assert (c.tn >= 0).all()


def test_counts_validation():
    with pytest.raises(ValueError):
        confusion_counts(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        confusion_counts(np.full((2, 2), 4), np.zeros((2, 2)))


def test_report_single_image_single_class():
    c = ConfusionCounts([7], [2], [3], 20)
    report = aggregate_report([c], ("only",), foreground=[0])
    assert report.per_class["only"] == metrics_from_counts(c)[0]
    assert report.overall == metrics_from_counts(c)[0]


def test_report_duplicate_images_unchanged(rng):
    pred, gt = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
    c = confusion_counts(pred, gt)
    one, two = aggregate_report([c]), aggregate_report([c, c])
    assert one.per_class == two.per_class
    assert one.overall == pytest.approx(two.overall)
    assert two.num_images == 2


def test_report_overall_is_micro_over_foreground():
    a = ConfusionCounts([10, 4, 0, 1], [0, 1, 0, 1], [0, 1, 2, 0], 20)
    report = aggregate_report([a])
    assert report.overall["iou"] == pytest.approx(5 / (5 + 2 + 3))
    assert report.per_class["background"]["iou"] == 1.0


def test_report_absent_class_is_reported_as_missing():
    c = confusion_counts(np.zeros((3, 3), int), np.zeros((3, 3), int))
    report = aggregate_report([c])
    assert report.per_class["fibrin"] is None
    assert math.isnan(report.overall["dsc"])


def test_report_serialisation(rng):
    counts = [confusion_counts(rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))) for _ in range(3)]
    report = aggregate_report(counts)
    report.meta["config_hash"] = "abc"
    parsed = json.loads(report.to_json())
    assert parsed["num_images"] == 3
    csv_text = report.to_csv()
    assert csv_text.startswith("# config_hash=abc\n")
    assert "overall,micro" in csv_text


def test_report_requires_images():
    with pytest.raises(ValueError):
        aggregate_report([])
