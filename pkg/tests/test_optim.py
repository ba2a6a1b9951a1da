"""Tests for the trust-ratio and adaptive-moment optimizers."""

import numpy as np
import pytest

from patchssl.selfsup import (
    AdamConfig,
    LarsConfig,
    adam_step,
    init_moments,
    lars_step,
)


def include_all(arr):
    return False


class TestLars:
    def test_excluded_bias_takes_plain_step(self):
        bias = np.array([1.0, -2.0, 0.5])
        grad = np.array([0.1, 0.2, -0.3])
        config = LarsConfig(base_lr=0.4, weight_decay=1.5e-6, trust=0.001)
        (out,) = lars_step([bias], [grad], config)
        np.testing.assert_allclose(out, bias - 0.4 * grad, atol=1e-15)

    def test_zero_grad_zero_decay_keeps_params(self):
        w = np.random.default_rng(0).normal(size=(4, 3))
        config = LarsConfig(base_lr=0.4, weight_decay=0.0)
        (out,) = lars_step([w], [np.zeros_like(w)], config)
        np.testing.assert_array_equal(out, w)

    def test_scalar_hand_example(self):
        # |w|=2, |g|=1, wd=0, trust=1: local lr = 2, step = 0.1 * 2 * 1
        config = LarsConfig(base_lr=0.1, weight_decay=0.0, trust=1.0, exclude=include_all)
        (out,) = lars_step([np.array([2.0])], [np.array([1.0])], config)
        assert out[0] == pytest.approx(1.8, abs=1e-15)

    def test_trust_ratio_with_decay_hand_computed(self):
        w = np.array([[3.0, 4.0]])  # norm 5
        g = np.array([[0.6, 0.8]])  # norm 1
        wd = 0.1
        config = LarsConfig(base_lr=0.2, weight_decay=wd, trust=0.5)
        local = 0.5 * 5.0 / (1.0 + wd * 5.0)
        expected = w - 0.2 * local * (g + wd * w)
        (out,) = lars_step([w], [g], config)
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_zero_weight_tensor_stays_put(self):
        w = np.zeros((3, 3))
        g = np.ones((3, 3))
        (out,) = lars_step([w], [g], LarsConfig(base_lr=1.0))
        np.testing.assert_array_equal(out, w)

    def test_mixed_parameter_list(self):
        rng = np.random.default_rng(1)
        weight = rng.normal(size=(5, 4))
        bias = rng.normal(size=4)
        gw = rng.normal(size=(5, 4))
        gb = rng.normal(size=4)
        config = LarsConfig(base_lr=0.01)
        out_w, out_b = lars_step([weight, bias], [gw, gb], config)
        np.testing.assert_allclose(out_b, bias - 0.01 * gb, atol=1e-15)
        assert not np.array_equal(out_w, weight - 0.01 * gw)  # trust ratio applied

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            lars_step([np.zeros((2, 2))], [np.zeros((2, 3))], LarsConfig(base_lr=0.1))
        with pytest.raises(ValueError):
            lars_step([np.zeros((2, 2))], [], LarsConfig(base_lr=0.1))
        with pytest.raises(ValueError):
            LarsConfig(base_lr=0.0)


class TestAdam:
    def test_zero_grads_zero_moments_fixed_point(self):
        w = np.random.default_rng(2).normal(size=(3, 3))
        moments = init_moments([w])
        out, new_moments = adam_step([w], [np.zeros_like(w)], moments, AdamConfig(lr=0.1))
        np.testing.assert_array_equal(out[0], w)
        assert new_moments.step == 1

    def test_first_step_magnitude_is_lr(self):
        w = np.zeros((4, 4))
        g = np.ones((4, 4))
        lr = 0.05
        out, _ = adam_step([w], [g], init_moments([w]), AdamConfig(lr=lr))
        np.testing.assert_allclose(w - out[0], np.full((4, 4), lr), rtol=1e-6)

    def test_first_step_magnitude_independent_of_grad_scale(self):
        w = np.zeros(3)
        lr = 0.01
        for scale in (1e-3, 1.0, 1e3):
            g = np.full(3, scale)
            out, _ = adam_step([w], [g], init_moments([w]), AdamConfig(lr=lr))
            np.testing.assert_allclose(w - out[0], np.full(3, lr), rtol=1e-4)

    def test_decoupled_decay_is_additive_and_grad_independent(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 2))
        g = rng.normal(size=(4, 2))
        lr, wd = 0.02, 0.1
        plain, _ = adam_step([w], [g], init_moments([w]), AdamConfig(lr=lr))
        decayed, _ = adam_step(
            [w], [g], init_moments([w]), AdamConfig(lr=lr, weight_decay=wd, decoupled=True)
        )
        np.testing.assert_allclose(plain[0] - decayed[0], lr * wd * w, atol=1e-15)

    def test_coupled_decay_enters_the_moments(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 3))
        g = rng.normal(size=(3, 3))
        coupled, m1 = adam_step(
            [w], [g], init_moments([w]), AdamConfig(lr=0.01, weight_decay=0.5)
        )
        decoupled, m2 = adam_step(
            [w], [g], init_moments([w]), AdamConfig(lr=0.01, weight_decay=0.5, decoupled=True)
        )
        assert not np.allclose(coupled[0], decoupled[0])
        assert not np.allclose(m1.first[0], m2.first[0])

    def test_two_steps_match_hand_rolled_recurrence(self):
        w = np.array([1.0])
        config = AdamConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        grads = [np.array([0.5]), np.array([-0.25])]
        params, moments = [w], init_moments([w])
        for g in grads:
            params, moments = adam_step(params, [g], moments, config)

        # independent scalar recurrence
        m = v = 0.0
        x = 1.0
        for t, g in enumerate([0.5, -0.25], start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            x -= 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        assert params[0][0] == pytest.approx(x, abs=1e-15)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            AdamConfig(lr=-0.1)
        with pytest.raises(ValueError):
            AdamConfig(lr=0.1, beta1=1.0)
