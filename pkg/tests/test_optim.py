"""Optimizer and learning-rate schedule tests."""

import numpy as np
import pytest

from perlm.autodiff import Tensor
from perlm.errors import ConfigurationError, TrainingDivergenceError
from perlm.optim import (AdamState, LrSchedule, adam_step,
                         clip_gradients_by_norm, init_adam_state, lr_at)


def make_params(**arrays):
    return {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
            for k, v in arrays.items()}


class TestAdam:
    def test_zero_gradient_no_decay_leaves_params(self):
        params = make_params(w=np.ones((2, 2)))
        state = init_adam_state(params, weight_decay_rate=0.0)
        adam_step(params, {"w": np.zeros((2, 2))}, state, lr=1e-3)
        np.testing.assert_array_equal(params["w"].data, np.ones((2, 2)))

    def test_first_step_bias_correction_cancels(self):
        params = make_params(w=np.zeros((1,)))
        state = init_adam_state(params, epsilon=1e-6, weight_decay_rate=0.0)
        adam_step(params, {"w": np.ones(1)}, state, lr=1e-3)
        np.testing.assert_allclose(params["w"].data, -1e-3, rtol=1e-5)
        assert state.step == 1

    def test_quadratic_bowl_loss_decreases(self):
        params = make_params(w=np.array([[3.0, -2.0], [1.5, 4.0]]))
        state = init_adam_state(params, weight_decay_rate=0.0)
        losses = []
        for _ in range(10):
            losses.append(float(np.sum(params["w"].data ** 2)))
            grads = {"w": 2.0 * params["w"].data}
            adam_step(params, grads, state, lr=0.1)
        losses.append(float(np.sum(params["w"].data ** 2)))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_decay_skips_one_dimensional_params(self):
        params = make_params(w=np.ones((2, 2)), b=np.ones(2))
        state = init_adam_state(params, weight_decay_rate=0.5)
        adam_step(params, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_allclose(params["w"].data, 1.0 - 0.1 * 0.5)
        np.testing.assert_array_equal(params["b"].data, np.ones(2))

    def test_non_finite_gradient_names_parameter(self):
        params = make_params(good=np.ones(2), bad=np.ones(2))
        state = init_adam_state(params)
        grads = {"good": np.zeros(2), "bad": np.array([1.0, np.nan])}
        with pytest.raises(TrainingDivergenceError, match="bad"):
            adam_step(params, grads, state, lr=1e-3)

    def test_bit_reproducible(self):
        def run():
            rng = np.random.default_rng(123)
            params = make_params(w=rng.normal(size=(4, 4)))
            state = init_adam_state(params)
            for i in range(5):
                grads = {"w": rng.normal(size=(4, 4))}
                adam_step(params, grads, state, lr=1e-3)
            return params["w"].data.tobytes()

        assert run() == run()


class TestClipping:
    def test_norm_reported_and_scaled(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_gradients_by_norm(grads, 1.0)
        assert norm == 5.0
        total = np.sqrt(grads["a"] ** 2 + grads["b"] ** 2)
        np.testing.assert_allclose(total, 1.0)

    def test_below_threshold_untouched(self):
        grads = {"a": np.array([0.3])}
        clip_gradients_by_norm(grads, 1.0)
        np.testing.assert_array_equal(grads["a"], [0.3])


class TestSchedule:
    def test_zero_at_step_zero(self):
        s = LrSchedule(peak_lr=1e-4, warmup_steps=10_000, total_steps=2_000_000)
        assert lr_at(s, 0) == 0.0

    def test_linear_interpolation_in_warmup(self):
        s = LrSchedule(peak_lr=1e-4, warmup_steps=10_000, total_steps=2_000_000)
        assert lr_at(s, 5_000) == pytest.approx(5e-5)

    def test_peak_at_end_of_warmup(self):
        s = LrSchedule(peak_lr=1e-4, warmup_steps=10_000, total_steps=2_000_000)
        assert lr_at(s, 10_000) == pytest.approx(1e-4)

    def test_decays_to_zero_at_total(self):
        s = LrSchedule(peak_lr=1e-4, warmup_steps=10, total_steps=100)
        assert lr_at(s, 100) == 0.0
        assert lr_at(s, 55) == pytest.approx(1e-4 * 45 / 90)
        assert lr_at(s, 500) == 0.0

    def test_piecewise_linear_and_non_negative(self):
        s = LrSchedule(peak_lr=3e-4, warmup_steps=7, total_steps=50)
        values = [lr_at(s, t) for t in range(0, 51)]
        assert all(v >= 0 for v in values)
        assert max(values) == pytest.approx(3e-4)
        assert values.index(max(values)) == 7

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigurationError):
            LrSchedule(peak_lr=1e-4, warmup_steps=0, total_steps=10)
        with pytest.raises(ConfigurationError):
            LrSchedule(peak_lr=1e-4, warmup_steps=20, total_steps=10)
