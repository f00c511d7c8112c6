import math

import numpy as np
import pytest

import fdaseg.autodiff as ad
from fdaseg.losses import (LossConfig, dice_term, focal_term, l1_term, l_reg,
                           l_seg, l_seg_terms, l_total, ratio_term)

SUM = LossConfig(reduction="sum")


def _t(arr):
    return ad.tensor(np.asarray(arr, np.float32))


def test_perfect_prediction_identities():
    y = _t(np.full((1, 1, 2, 2, 2), 0.5))
    loss = l_reg(y, y, SUM)
    n = 8
    assert abs(float(l1_term(y, y, "sum").data)) == 0.0
    # each ratio is y^2 / (3 y^2) = 1/3
    assert abs(float(ratio_term(y, y, "sum").data) - n / 3) < n * 1e-6
    assert abs(float(loss.data) + n / 3) < n * 1e-6


def test_all_zero_degenerate_case():
    z = _t(np.zeros((1, 1, 2, 2, 2)))
    assert float(l_reg(z, z, SUM).data) == 0.0


def test_wrong_sign_worked_example():
    n = 27
    y = _t(np.full((1, 1, 3, 3, 3), 0.5))
    f = _t(np.full((1, 1, 3, 3, 3), -0.5))
    # L1 = n * 1.0; each ratio = -0.25 / 0.25 = -1 so the loss adds another n
    loss = float(l_reg(f, y, SUM).data)
    assert abs(loss - 2 * n) < 1e-4
    mean_loss = float(l_reg(f, y, LossConfig(reduction="mean")).data)
    assert abs(mean_loss - 2.0) < 1e-6


def test_reg_sign_sensitivity_per_voxel():
    for mag in (0.2, 0.5, 0.9):
        y = _t(np.full((1, 1, 1, 1, 1), mag))
        right = float(l_reg(y, y, SUM).data)
        flipped = float(l_reg(_t([[[[[-mag]]]]]), y, SUM).data)
        assert flipped > right


def test_dice_perfect_prediction():
    g = _t((np.random.default_rng(0).random((1, 1, 3, 3, 3)) < 0.4)
           .astype(np.float32))
    dice, focal = l_seg_terms(ad.tensor(g.data.copy()), g, LossConfig())
    assert abs(float(dice.data) + 1.0) < 1e-3
    assert float(focal.data) <= 1e-4


def test_seg_worked_example_half_probability():
    n = 27
    p = _t(np.full((1, 1, 3, 3, 3), 0.5))
    g = _t(np.ones((1, 1, 3, 3, 3)))
    dice, focal = l_seg_terms(p, g, LossConfig())
    assert abs(float(dice.data) + 2.0 / 3.0) < 1e-5
    want_focal = -0.25 * math.log(0.5)
    assert abs(float(focal.data) - want_focal) < 1e-5


def test_confident_true_negative_near_zero():
    # at desk-scale patch sizes N * prob_clip dwarfs dice_eps, so the
    # empty-overlap ratio is ~0 rather than eps/eps
    cfg = LossConfig()
    p = _t(np.full((1, 1, 24, 24, 24), cfg.prob_clip))
    g = _t(np.zeros((1, 1, 24, 24, 24)))
    dice, focal = l_seg_terms(p, g, cfg)
    assert abs(float(dice.data)) < 1e-3
    assert abs(float(focal.data)) < 1e-4


def test_focal_two_sided_vs_literal():
    p = _t(np.full((1, 1, 1, 1, 1), 0.9))
    g = _t(np.zeros((1, 1, 1, 1, 1)))
    two = float(focal_term(p, g, two_sided=True).data)
    # true class is background: pt = 0.1
    assert abs(two - (-(0.9 ** 2) * math.log(0.1))) < 1e-5
    lit = float(focal_term(p, g, two_sided=False).data)
    assert abs(lit - (-(0.1 ** 2) * math.log(0.9))) < 1e-6


def test_l_total_is_plain_sum():
    rng = np.random.default_rng(1)
    f = _t(rng.uniform(-0.9, 0.9, (1, 1, 2, 2, 2)))
    y = _t(rng.uniform(-0.9, 0.9, (1, 1, 2, 2, 2)))
    p = _t(rng.uniform(0.1, 0.9, (1, 1, 2, 2, 2)))
    g = _t((rng.random((1, 1, 2, 2, 2)) < 0.5).astype(np.float32))
    seg, reg = l_seg(p, g), l_reg(f, y)
    assert float(l_total(seg, reg).data) == pytest.approx(
        float(seg.data) + float(reg.data), abs=1e-7)
    zero = _t(np.zeros(()))
    assert float(l_total(seg, zero).data) == pytest.approx(float(seg.data))


def test_losses_always_finite():
    rng = np.random.default_rng(2)
    cfg = LossConfig()
    for _ in range(50):
        shape = (1, 1, 3, 3, 3)
        p = _t(rng.uniform(0, 1, shape))  # includes exact 0/1 after clip
        g = _t((rng.random(shape) < rng.uniform(0, 1)).astype(np.float32))
        f = _t(rng.uniform(-1, 1, shape))
        y = _t(rng.uniform(-1, 1, shape))
        assert np.isfinite(float(l_seg(p, g, cfg).data))
        assert np.isfinite(float(l_reg(f, y, cfg).data))


def test_extreme_probabilities_clipped_not_nan():
    cfg = LossConfig()
    p = _t(np.array([0.0, 1.0]).reshape(1, 1, 1, 1, 2))
    g = _t(np.array([1.0, 0.0]).reshape(1, 1, 1, 1, 2))
    assert np.isfinite(float(l_seg(p, g, cfg).data))


def test_dice_monotone_in_true_positive_probability():
    rng = np.random.default_rng(3)
    g = (rng.random((1, 1, 3, 3, 3)) < 0.5).astype(np.float32)
    g[0, 0, 1, 1, 1] = 1.0
    p = rng.uniform(0.2, 0.8, g.shape).astype(np.float32)
    prev = None
    for bump in np.linspace(0.0, 0.19, 8):
        p2 = p.copy()
        p2[0, 0, 1, 1, 1] += bump
        val = float(dice_term(_t(p2), _t(g)).data)
        if prev is not None:
            assert val <= prev + 1e-9
        prev = val


def test_loss_gradients_match_fd():
    rng = np.random.default_rng(4)
    f = ad.tensor(rng.uniform(-0.9, 0.9, (1, 1, 3, 3, 3)), requires_grad=True)
    y = ad.tensor(rng.uniform(-0.9, 0.9, (1, 1, 3, 3, 3)), requires_grad=True)
    rep = ad.grad_check(lambda: l_reg(f, y), {"f": f, "y": y}, n_samples=40)
    assert rep["passed"], rep
    p = ad.tensor(rng.uniform(0.05, 0.95, (1, 1, 3, 3, 3)), requires_grad=True)
    g = _t((rng.random((1, 1, 3, 3, 3)) < 0.5).astype(np.float32))
    for two_sided in (True, False):
        cfg = LossConfig(focal_two_sided=two_sided)
        rep = ad.grad_check(lambda cfg=cfg: l_seg(p, g, cfg), {"p": p},
                            n_samples=40)
        assert rep["passed"], rep


def test_ratio_zero_denominator_gradient_is_zero():
    f = ad.tensor(np.zeros((1, 1, 1, 1, 2)), requires_grad=True)
    y = _t(np.array([0.0, 0.5]).reshape(1, 1, 1, 1, 2))
    loss = ratio_term(f, y, "sum")
    ad.backward(loss)
    assert f.grad.ravel()[0] == 0.0  # the 0/0 voxel contributes nothing
    assert np.isfinite(f.grad).all()


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(reduction="median")
    with pytest.raises(ValueError):
        LossConfig(prob_clip=0.7)
    with pytest.raises(ValueError):
        LossConfig(dice_eps=0.0)
    with pytest.raises(ValueError, match="unknown"):
        LossConfig.from_dict({"dice_weight": 2.0})


def test_shape_mismatch_rejected():
    a = _t(np.zeros((1, 1, 2, 2, 2)))
    b = _t(np.zeros((1, 1, 2, 2, 4)))
    for fn in (lambda: l_reg(a, b), lambda: l_seg(a, b),
               lambda: l1_term(a, b), lambda: ratio_term(a, b),
               lambda: dice_term(a, b), lambda: focal_term(a, b)):
        with pytest.raises(ValueError):
            fn()
