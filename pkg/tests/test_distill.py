import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chordkd.distill import (
    KdConfig,
    ce_loss,
    ce_loss_batch,
    kd_grad,
    kd_loss,
    log_softmax_t,
    selective_kd_loss,
    selective_weight,
    softmax_t,
    total_loss,
)

DEFAULTS = KdConfig()


def central_diff(f, z, step=1e-4):
    """Independent gradient oracle: central finite differences coordinate-wise."""
    grad = np.zeros_like(z, dtype=float)
    for i in range(z.size):
        hi = z.copy()
        lo = z.copy()
        hi.flat[i] += step
        lo.flat[i] -= step
        grad.flat[i] = (f(hi) - f(lo)) / (2 * step)
    return grad


def assert_close_to_fd(analytic, fd, rtol=1e-5, atol=1e-8):
    scale = np.maximum(np.abs(analytic), np.abs(fd))
    assert np.all(np.abs(analytic - fd) <= atol + rtol * scale)


# ---------------------------------------------------------------------------
# softmax_t
# ---------------------------------------------------------------------------


def test_softmax_uniform_logits():
    for tau in (0.5, 1.0, 3.0):
        p = softmax_t(np.zeros(7), tau)
        assert np.allclose(p, 1 / 7)


def test_softmax_high_temperature_flattens():
    rng = np.random.default_rng(0)
    z = rng.uniform(-1, 1, size=4)
    p = softmax_t(z, 100.0)
    assert np.max(np.abs(p - 0.25)) < 1e-2


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    z = rng.standard_normal(10)
    assert np.allclose(softmax_t(z, 2.0), softmax_t(z + 3.7, 2.0))


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_t(np.array([1.0, np.nan]), 1.0)
    with pytest.raises(ValueError):
        softmax_t(np.array([1.0, 2.0]), 0.0)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((5, 30)) * 10
    assert np.allclose(softmax_t(z, 3.0).sum(axis=-1), 1.0)


# ---------------------------------------------------------------------------
# KD loss and gradient
# ---------------------------------------------------------------------------


def test_kd_loss_zero_on_equal_and_shifted_logits():
    rng = np.random.default_rng(3)
    z = rng.standard_normal(12)
    assert kd_loss(z, z, 3.0) == pytest.approx(0.0, abs=1e-12)
    assert kd_loss(z + 2.5, z, 3.0) == pytest.approx(0.0, abs=1e-12)


def test_kd_loss_hand_computed_binary_case():
    # teacher uniform, student (ln 3, 0) at tau=1:
    # KL(U || (0.75, 0.25)) = 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25)
    z_t = np.zeros(2)
    z_s = np.array([math.log(3.0), 0.0])
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert kd_loss(z_s, z_t, 1.0) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1438, abs=1e-4)


def test_kd_loss_non_negative():
    rng = np.random.default_rng(4)
    for _ in range(50):
        z_s = rng.standard_normal(20) * 3
        z_t = rng.standard_normal(20) * 3
        assert kd_loss(z_s, z_t, rng.uniform(0.5, 5.0)) >= 0.0


def test_kd_grad_zero_for_identical_logits():
    z = np.linspace(-2, 2, 9)
    assert np.allclose(kd_grad(z, z, 3.0), 0.0)


def test_kd_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(100):
        z_s = rng.standard_normal(10) * 2
        z_t = rng.standard_normal(10) * 2
        tau = rng.uniform(0.5, 5.0)
        analytic = kd_grad(z_s, z_t, tau)
        fd = central_diff(lambda z: kd_loss(z, z_t, tau), z_s)
        assert_close_to_fd(analytic, fd)


def test_kd_grad_components_sum_to_zero():
    rng = np.random.default_rng(6)
    for _ in range(20):
        g = kd_grad(rng.standard_normal(15), rng.standard_normal(15), 2.0)
        assert abs(g.sum()) < 1e-12


def test_kd_grad_norm_bounded_across_temperatures():
    # tau * (p_s - p_t) stays bounded: p-differences shrink like 1/tau.
    rng = np.random.default_rng(7)
    for _ in range(20):
        z_s = rng.standard_normal(10)
        z_t = rng.standard_normal(10)
        ratio = np.linalg.norm(kd_grad(z_s, z_t, 10.0)) / np.linalg.norm(
            kd_grad(z_s, z_t, 1.0)
        )
        assert 0.1 <= ratio <= 10.0


# ---------------------------------------------------------------------------
# Cross-entropy
# ---------------------------------------------------------------------------


def test_ce_loss_uniform_logits():
    loss, _ = ce_loss(np.zeros(13), 4)
    assert loss == pytest.approx(math.log(13))


def test_ce_loss_confident_logit_vanishes():
    z = np.zeros(10)
    z[3] = 50.0
    loss, _ = ce_loss(z, 3)
    assert loss < 1e-20


def test_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(100):
        z = rng.standard_normal(10) * 2
        y = int(rng.integers(0, 10))
        _, analytic = ce_loss(z, y)
        fd = central_diff(lambda v: ce_loss(v, y)[0], z)
        assert_close_to_fd(analytic, fd)


def test_ce_loss_rejects_bad_index():
    with pytest.raises(ValueError):
        ce_loss(np.zeros(5), 5)
    with pytest.raises(ValueError):
        ce_loss(np.zeros(5), -1)


def test_ce_loss_batch_matches_single():
    rng = np.random.default_rng(9)
    z = rng.standard_normal((6, 8))
    y = rng.integers(0, 8, size=6)
    losses, grads = ce_loss_batch(z, y)
    for i in range(6):
        loss_i, grad_i = ce_loss(z[i], int(y[i]))
        assert losses[i] == pytest.approx(loss_i)
        assert np.allclose(grads[i], grad_i)


# ---------------------------------------------------------------------------
# Selective weighting
# ---------------------------------------------------------------------------


def test_selective_weight_default_cases():
    assert selective_weight(0.05, DEFAULTS) == 0.0
    assert selective_weight(0.5, DEFAULTS) == 1.0
    assert selective_weight(1.0, DEFAULTS) == pytest.approx(0.2)


def test_selective_weight_continuous_at_theta_max():
    eps = 1e-9
    below = selective_weight(DEFAULTS.theta_max - eps, DEFAULTS)
    above = selective_weight(DEFAULTS.theta_max + eps, DEFAULTS)
    assert abs(below - above) < 1e-6


@given(st.floats(0.0, 1.0))
def test_selective_weight_piecewise_ranges(c):
    w = selective_weight(c, DEFAULTS)
    if c < DEFAULTS.theta_min:
        assert w == 0.0
    elif c <= DEFAULTS.theta_max:
        assert w == 1.0
    else:
        assert 1.0 - DEFAULTS.k <= w <= 1.0


def test_kd_config_validation():
    with pytest.raises(ValueError):
        KdConfig(theta_min=0.9, theta_max=0.1)
    with pytest.raises(ValueError):
        KdConfig(tau=0.0)
    with pytest.raises(ValueError):
        KdConfig(alpha=1.5)
    with pytest.raises(ValueError):
        KdConfig(k=0.0)


# ---------------------------------------------------------------------------
# Selective KD loss
# ---------------------------------------------------------------------------


def test_selective_kd_zero_when_teacher_unconfident():
    # Near-uniform teacher logits over many classes -> max prob < theta_min.
    z_t = np.zeros((4, 100))
    rng = np.random.default_rng(10)
    z_s = rng.standard_normal((4, 100))
    assert selective_kd_loss(z_s, z_t, DEFAULTS) == 0.0


def test_selective_kd_equals_plain_mean_when_weights_are_one():
    rng = np.random.default_rng(11)
    z_t = np.zeros((5, 2))
    z_t[:, 0] = 1.0  # confidence ~0.73, inside the informative band
    z_s = rng.standard_normal((5, 2))
    expected = float(np.mean(kd_loss(z_s, z_t, DEFAULTS.tau)))
    assert selective_kd_loss(z_s, z_t, DEFAULTS) == pytest.approx(expected)


def test_selective_kd_three_sample_hand_case():
    cfg = KdConfig(alpha=0.3, tau=1.0)
    # Confidences: ~1/3 (weight 1), ~0.045 (weight 0), ~0.995 (weight ~0.24).
    z_t = np.array(
        [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [8.0, 0.0, 0.0]], dtype=float
    )
    z_t[1] = [0.1, 0.0, -0.1]  # still low confidence over 3 classes? ~0.37 -> weight 1
    z_s = np.array([[1.0, 0.0, -1.0], [0.5, 0.2, 0.1], [1.0, 2.0, 0.0]])
    confidences = softmax_t(z_t, 1.0).max(axis=1)
    weights = np.array([selective_weight(c, cfg) for c in confidences])
    per_sample = kd_loss(z_s, z_t, cfg.tau)
    expected = float(np.mean(weights * per_sample))
    assert selective_kd_loss(z_s, z_t, cfg) == pytest.approx(expected, abs=1e-12)


def test_selective_kd_rejects_empty_batch():
    with pytest.raises(ValueError):
        selective_kd_loss(np.zeros((0, 4)), np.zeros((0, 4)), DEFAULTS)


# ---------------------------------------------------------------------------
# Combined objective
# ---------------------------------------------------------------------------


def test_total_loss_alpha_zero_is_pure_classification():
    rng = np.random.default_rng(12)
    z_s = rng.standard_normal((7, 11))
    y = rng.integers(0, 11, size=7)
    cfg = KdConfig(alpha=0.0)
    for stage in (1, 2):
        loss, grad = total_loss(stage, z_s, y, cfg, z_t=None)
        ce_losses, ce_grads = ce_loss_batch(z_s, y)
        assert loss == pytest.approx(float(ce_losses.mean()), abs=1e-12)
        assert np.allclose(grad, ce_grads / 7, atol=1e-15)


def test_total_loss_alpha_one_zero_for_matching_logits():
    rng = np.random.default_rng(13)
    z = rng.standard_normal((4, 6))
    y = rng.integers(0, 6, size=4)
    cfg = KdConfig(alpha=1.0, tau=2.0)
    loss, _ = total_loss(1, z, y, cfg, z_t=z.copy())
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_total_loss_is_affine_in_alpha():
    rng = np.random.default_rng(14)
    z_s = rng.standard_normal((5, 9))
    z_t = rng.standard_normal((5, 9))
    y = rng.integers(0, 9, size=5)
    for stage in (1, 2):
        l0, _ = total_loss(stage, z_s, y, KdConfig(alpha=0.0), None)
        l1, _ = total_loss(stage, z_s, y, KdConfig(alpha=1.0), z_t)
        for alpha in (0.1, 0.3, 0.5, 0.9):
            la, _ = total_loss(stage, z_s, y, KdConfig(alpha=alpha), z_t)
            assert la == pytest.approx(alpha * l1 + (1 - alpha) * l0, abs=1e-12)


def test_total_loss_gradient_matches_finite_differences_both_stages():
    rng = np.random.default_rng(15)
    for _ in range(50):
        n, c = 3, 8
        z_s = rng.standard_normal((n, c)) * 2
        z_t = rng.standard_normal((n, c)) * 3
        y = rng.integers(0, c, size=n)
        stage = int(rng.integers(1, 3))
        cfg = KdConfig(alpha=float(rng.uniform(0, 1)), tau=float(rng.uniform(0.5, 4)))
        _, analytic = total_loss(stage, z_s, y, cfg, z_t)
        fd = central_diff(
            lambda z: total_loss(stage, z.reshape(n, c), y, cfg, z_t)[0], z_s.ravel()
        ).reshape(n, c)
        assert_close_to_fd(analytic, fd)


def test_total_loss_requires_teacher_when_alpha_positive():
    with pytest.raises(ValueError):
        total_loss(1, np.zeros((2, 3)), np.array([0, 1]), KdConfig(alpha=0.3), None)


def test_total_loss_rejects_bad_stage():
    with pytest.raises(ValueError):
        total_loss(3, np.zeros((1, 2)), np.array([0]), DEFAULTS, np.zeros((1, 2)))


def test_stage2_uses_selective_weighting():
    # Overconfident teacher: stage 2 down-weights the KD term, stage 1 does not.
    z_t = np.zeros((1, 4))
    z_t[0, 0] = 30.0  # confidence ~1.0 -> selective weight ~0.2
    z_s = np.array([[0.5, -0.5, 0.1, 0.0]])
    y = np.array([0])
    cfg = KdConfig(alpha=1.0, tau=1.0)
    loss1, _ = total_loss(1, z_s, y, cfg, z_t)
    loss2, _ = total_loss(2, z_s, y, cfg, z_t)
    assert loss2 < loss1
    assert loss2 == pytest.approx(0.2 * loss1, rel=1e-6)
