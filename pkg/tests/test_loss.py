import numpy as np
import numpy.testing as npt
import pytest

import dscnet.loss as loss_mod
from dscnet.gradcheck import check_op
from dscnet.loss import (ClassCounts, loss_l1, loss_l2, map_loss,
                         overall_loss, supervised_losses)
from dscnet.network import NetworkOutput
from dscnet.rng import RandomStream
from dscnet.tensor import Tape, Tensor

import oracles


def _t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def _img(vals):
    return _t(np.asarray(vals, dtype=np.float64).reshape(1, 1, 2, 2))


def test_l1_perfect_single_shadow_pixel_is_zero():
    p = _img([1.0, 0.0, 0.0, 0.0])
    y = _img([1.0, 0.0, 0.0, 0.0])
    c = ClassCounts.from_maps(p.data, y.data)
    assert abs(loss_l1(p, y, c)) < 1e-6


def test_l1_equal_classes_is_half_standard_cross_entropy():
    rs = RandomStream(0)
    p = _t(rs.uniform_array((1, 1, 4, 4), 0.05, 0.95))
    y = np.indices((4, 4)).sum(axis=0) % 2  # checkerboard: n_p == n_n
    y = _t(y.reshape(1, 1, 4, 4).astype(np.float64))
    c = ClassCounts.from_maps(p.data, y.data)
    assert c.n_p == c.n_n
    got = loss_l1(p, y, c)
    standard = oracles.weighted_ce_formula(p.data, y.data, 1.0, 1.0)
    npt.assert_allclose(got, 0.5 * standard, rtol=1e-12)


def test_l1_hand_value_single_shadow_pixel():
    # one shadow pixel at p = 0.5 among three perfect non-shadow pixels:
    # its contribution is -(3/4) ln(1/2)
    p = _img([0.5, 0.0, 0.0, 0.0])
    y = _img([1.0, 0.0, 0.0, 0.0])
    c = ClassCounts.from_maps(p.data, y.data)
    total_pixels = 4
    contribution = loss_l1(p, y, c) * total_pixels
    assert abs(contribution - 0.519860385419959) < 1e-6


def test_l2_zero_when_both_classes_fully_correct():
    rs = RandomStream(1)
    p = _t(rs.uniform_array((1, 1, 3, 3), 0.05, 0.95))
    y = _t((rs.uniform_array((1, 1, 3, 3)) < 0.4).astype(np.float64))
    c = ClassCounts(n_p=int(y.data.sum()), n_n=int((1 - y.data).sum()),
                    tp=int(y.data.sum()), tn=int((1 - y.data).sum()))
    assert loss_l2(p, y, c) == 0.0


def test_l2_endpoint_weights():
    p = _img([0.3, 0.6, 0.2, 0.9])
    y = _img([1.0, 1.0, 0.0, 0.0])
    c = ClassCounts(n_p=2, n_n=2, tp=0, tn=2)
    got = loss_l2(p, y, c)
    expected = oracles.weighted_ce_formula(p.data, y.data, 1.0, 0.0)
    npt.assert_allclose(got, expected, rtol=1e-12)


def test_l2_hand_value():
    # n_p = 2, TP = 1: shadow weight 1/2; a shadow pixel at p = 0.5
    # contributes -(1/2) ln(1/2); make everything else contribute ~0
    p = _img([0.5, 1.0, 0.0, 0.0])
    y = _img([1.0, 1.0, 0.0, 0.0])
    c = ClassCounts(n_p=2, n_n=2, tp=1, tn=2)
    contribution = loss_l2(p, y, c) * 4
    assert abs(contribution - 0.34657359027997264) < 1e-6


def test_l2_absent_class_weight_is_zero():
    p = _img([0.3, 0.4, 0.5, 0.6])
    y = _img([1.0, 1.0, 1.0, 1.0])
    c = ClassCounts(n_p=4, n_n=0, tp=2, tn=0)
    got = loss_l2(p, y, c)
    expected = oracles.weighted_ce_formula(p.data, y.data, 1.0 - 2 / 4, 0.0)
    npt.assert_allclose(got, expected, rtol=1e-12)


def test_counts_validation():
    p = _img([0.5, 0.5, 0.5, 0.5])
    y = _img([1.0, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="disagree"):
        loss_l1(p, y, ClassCounts(n_p=2, n_n=2))
    with pytest.raises(ValueError, match="exceed"):
        ClassCounts(n_p=1, n_n=3, tp=2, tn=0)
    with pytest.raises(ValueError, match="binary"):
        loss_l1(p, _img([0.5, 0.0, 0.0, 0.0]), ClassCounts(n_p=1, n_n=3))


def test_clamp_counter_increments_without_error():
    loss_mod.reset_clamp_events()
    p = _img([0.0, 1.0, 0.5, 0.5])  # exact endpoints get clamped
    y = _img([1.0, 0.0, 1.0, 0.0])
    c = ClassCounts.from_maps(p.data, y.data)
    val = loss_l1(p, y, c)
    assert np.isfinite(val)
    assert loss_mod.clamp_event_count() == 2
    loss_mod.reset_clamp_events()


def test_overall_loss_equal_maps_sums_to_four_times_map_loss():
    rs = RandomStream(2)
    score = rs.uniform_array((1, 1, 4, 4), -1, 1)
    y = _t((rs.uniform_array((1, 1, 4, 4)) < 0.4).astype(np.float64))
    out = NetworkOutput(layer_scores=[_t(score), _t(score)],
                        mlif_score=_t(score), fusion_score=_t(score))
    total = overall_loss(out, y)
    single = sum(map_loss(_t(score), y))
    npt.assert_allclose(total, 4 * single, rtol=1e-12)


def test_overall_loss_perfect_prediction_is_zero():
    y = _t((RandomStream(3).uniform_array((1, 1, 4, 4)) < 0.4).astype(np.float64))
    score = np.where(y.data == 1, 40.0, -40.0)
    out = NetworkOutput(layer_scores=[_t(score)], mlif_score=_t(score),
                        fusion_score=_t(score))
    assert abs(overall_loss(out, y)) < 1e-5


def test_overall_loss_component_sum_oracle():
    rs = RandomStream(4)
    y = _t((rs.uniform_array((1, 1, 4, 4)) < 0.4).astype(np.float64))
    scores = [rs.uniform_array((1, 1, 4, 4), -2, 2) for _ in range(4)]
    out = NetworkOutput(layer_scores=[_t(scores[0]), _t(scores[1])],
                        mlif_score=_t(scores[2]), fusion_score=_t(scores[3]))
    total = overall_loss(out, y)
    expected = 0.0
    for s in scores:
        prob = oracles.sigmoid_formula(s)
        tp = int(((prob >= 0.5) & (y.data == 1)).sum())
        tn = int(((prob < 0.5) & (y.data == 0)).sum())
        expected += oracles.balance_loss_formula(prob, y.data)
        expected += oracles.hard_class_loss_formula(prob, y.data, tp, tn)
    npt.assert_allclose(total, expected, rtol=0, atol=1e-12)


def test_supervised_losses_names_and_order():
    rs = RandomStream(5)
    y = _t((rs.uniform_array((1, 1, 2, 2)) < 0.5).astype(np.float64))
    if not 0 < y.data.sum() < 4:
        y = _img([1.0, 0.0, 0.0, 1.0])
    out = NetworkOutput(layer_scores=[_img([0.1] * 4), _img([0.2] * 4)],
                        mlif_score=_img([0.3] * 4), fusion_score=_img([0.4] * 4))
    rows = supervised_losses(out, y)
    assert [r[0] for r in rows] == ["layer2", "layer3", "mlif", "fusion"]


def test_balance_gradient_ratio_is_class_ratio():
    # a misclassified shadow pixel's gradient exceeds a mirrored misclassified
    # non-shadow pixel's by exactly n_n / n_p
    rs = RandomStream(6)
    for trial in range(20):
        n = 5
        y = np.zeros((1, 1, n, n))
        n_p = 1 + rs.randint(10)
        flat = y.reshape(-1)
        flat[:n_p] = 1.0
        q = rs.uniform(0.05, 0.95)
        p = np.full((1, 1, n, n), 0.5)
        p.reshape(-1)[0] = q            # shadow pixel predicted q
        p.reshape(-1)[n_p] = 1.0 - q    # non-shadow pixel predicted 1-q
        pt, yt = _t(p), _t(y)
        c = ClassCounts.from_maps(pt.data, yt.data)
        tape = Tape()
        loss_l1(pt, yt, c, tape)
        tape.backward()
        g = pt.grad.reshape(-1)
        ratio = abs(g[0]) / abs(g[n_p])
        npt.assert_allclose(ratio, c.n_n / c.n_p, rtol=1e-12)


def test_hard_class_weight_monotone_in_tp():
    p = _img([0.5, 0.5, 0.5, 0.5])
    y = _img([1.0, 1.0, 1.0, 0.0])
    values = [loss_l2(p, y, ClassCounts(n_p=3, n_n=1, tp=tp, tn=1))
              for tp in (3, 2, 1, 0)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_loss_gradients_match_finite_differences():
    for op in ("loss_l1", "loss_l2", "overall_loss"):
        report = check_op(op, instances=20, seed=5)
        assert report.passed, report.line()
