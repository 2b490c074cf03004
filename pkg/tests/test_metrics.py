import csv

import numpy as np
import numpy.testing as npt
import pytest

from dscnet.metrics import (Confusion, accuracy, ber, confusion,
                            evaluate_pairs, write_metrics_csv)
from dscnet.rng import RandomStream
from dscnet.tensor import ShapeError, Tensor

import oracles


def _t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def test_confusion_perfect_prediction():
    gt = _t((RandomStream(0).uniform_array((1, 1, 4, 4)) < 0.4).astype(np.float64))
    c = confusion(gt, gt)
    assert c.fp == 0 and c.fn == 0
    assert c.tp == int(gt.data.sum())
    assert c.tn == gt.data.size - c.tp


def test_confusion_all_zero_prediction():
    gt = np.zeros((1, 1, 3, 3))
    gt[0, 0, 0, :2] = 1.0
    c = confusion(_t(np.zeros((1, 1, 3, 3))), _t(gt))
    assert (c.tp, c.fn, c.tn, c.fp) == (0, 2, 7, 0)


def test_confusion_matches_loop_oracle():
    rs = RandomStream(1)
    pred = rs.uniform_array((1, 1, 8, 8))
    gt = (rs.uniform_array((1, 1, 8, 8)) < 0.3).astype(np.float64)
    c = confusion(_t(pred), _t(gt), 0.5)
    assert (c.tp, c.tn, c.fp, c.fn) == oracles.confusion_loops(pred, gt, 0.5)


def test_confusion_threshold_is_inclusive():
    pred = _t([[[[0.5, 0.49999]]]])
    gt = _t([[[[1.0, 1.0]]]])
    c = confusion(pred, gt, 0.5)
    assert (c.tp, c.fn) == (1, 1)


def test_confusion_validation():
    with pytest.raises(ShapeError):
        confusion(_t(np.zeros((1, 1, 2, 2))), _t(np.zeros((1, 1, 3, 2))))
    with pytest.raises(ValueError, match="binary"):
        confusion(_t(np.zeros((1, 1, 2, 2))), _t(np.full((1, 1, 2, 2), 0.5)))
    with pytest.raises(ValueError, match="threshold"):
        confusion(_t(np.zeros((1, 1, 2, 2))), _t(np.zeros((1, 1, 2, 2))), 1.0)


def test_accuracy_perfect_and_fixture():
    assert accuracy(Confusion(tp=5, tn=11, fp=0, fn=0)) == 1.0
    # tp=8, tn=81 with n_p=10, n_n=90
    assert accuracy(Confusion(tp=8, tn=81, fp=9, fn=2)) == 0.89


def test_accuracy_empty_image_error():
    with pytest.raises(ValueError, match="empty"):
        accuracy(Confusion(0, 0, 0, 0))


def test_ber_perfect_is_zero():
    assert ber(Confusion(tp=4, tn=12, fp=0, fn=0)) == 0.0


def test_ber_all_non_shadow_is_fifty():
    # predict everything non-shadow: TP/Np = 0, TN/Nn = 1
    assert ber(Confusion(tp=0, tn=90, fp=0, fn=10)) == 50.0


def test_ber_hand_fixture_fifteen():
    # TP/Np = 0.8, TN/Nn = 0.9
    c = Confusion(tp=8, tn=9, fp=1, fn=2)
    got = ber(c)
    assert got == (1.0 - 0.5 * (8 / 10 + 9 / 10)) * 100.0
    assert got == pytest.approx(15.0, abs=1e-9)


def test_ber_undefined_when_class_absent():
    with pytest.raises(ValueError, match="skip"):
        ber(Confusion(tp=0, tn=16, fp=0, fn=0))
    with pytest.raises(ValueError, match="skip"):
        ber(Confusion(tp=16, tn=0, fp=0, fn=0))


def test_ber_symmetric_under_class_swap():
    rs = RandomStream(2)
    for _ in range(20):
        tp, fn = rs.randint(50) + 1, rs.randint(50)
        tn, fp = rs.randint(50) + 1, rs.randint(50)
        c = Confusion(tp=tp, tn=tn, fp=fp, fn=fn)
        swapped = Confusion(tp=tn, tn=tp, fp=fn, fn=fp)
        assert ber(c) == ber(swapped)


def test_extremes_agree():
    perfect = Confusion(tp=10, tn=90, fp=0, fn=0)
    assert (accuracy(perfect), ber(perfect)) == (1.0, 0.0)
    inverted = Confusion(tp=0, tn=0, fp=90, fn=10)
    assert (accuracy(inverted), ber(inverted)) == (0.0, 100.0)


def test_dataset_aggregation_is_mean_of_per_image():
    a_pred = _t([[[[1.0, 0.0], [0.0, 0.0]]]])
    a_gt = _t([[[[1.0, 0.0], [0.0, 0.0]]]])
    b_pred = _t([[[[0.0, 0.0], [0.0, 0.0]]]])
    b_gt = _t([[[[1.0, 1.0], [0.0, 0.0]]]])
    res = evaluate_pairs([("a", a_pred, a_gt), ("b", b_pred, b_gt)])
    assert res.rows[0].ber == 0.0
    assert res.rows[1].ber == 50.0
    assert res.mean_ber == 25.0
    npt.assert_allclose(res.mean_accuracy, (1.0 + 0.5) / 2)


def test_dataset_skips_undefined_ber_rows():
    pred = _t(np.zeros((1, 1, 2, 2)))
    all_neg = _t(np.zeros((1, 1, 2, 2)))
    mixed = _t([[[[1.0, 0.0], [0.0, 0.0]]]])
    res = evaluate_pairs([("empty", pred, all_neg), ("mixed", pred, mixed)])
    assert res.rows[0].ber is None
    assert res.skipped_ber == 1
    assert res.mean_ber == res.rows[1].ber


def test_metrics_csv_round_trip(tmp_path):
    pred = _t([[[[1.0, 0.0], [0.0, 0.0]]]])
    gt = _t([[[[1.0, 1.0], [0.0, 0.0]]]])
    res = evaluate_pairs([("img1", pred, gt)])
    path = tmp_path / "metrics.csv"
    write_metrics_csv(res, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["image_id", "tp", "tn", "fp", "fn", "accuracy", "ber"]
    assert rows[1][0] == "img1"
    assert rows[1][1:5] == ["1", "2", "0", "1"]
    assert rows[-1][0] == "aggregate"
    assert float(rows[-1][5]) == pytest.approx(res.mean_accuracy)
    assert float(rows[-1][6]) == pytest.approx(res.mean_ber)
