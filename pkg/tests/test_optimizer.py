import math

import numpy as np
import pytest

from optimizer import AdamWState, adamw_step, decays, scheduled_learning_rate, zero_grad
from tensor import ShapeError, Tensor


def reference_adamw(param, grad, m, v, t, lr, b1, b2, eps, wd, decay):
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    if decay:
        param = param * (1 - lr * wd)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class TestAdamW:
    def test_matches_reference_over_steps(self, rng):
        weight = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        bias = Tensor(rng.standard_normal(4), requires_grad=True)
        params = {'w': weight, 'b': bias}
        state = AdamWState(learning_rate=1e-2, weight_decay=0.1)

        ref = {'w': weight.data.astype(np.float64), 'b': bias.data.astype(np.float64)}
        moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in ref.items()}
        for t in range(1, 4):
            grads = {k: rng.standard_normal(p.shape).astype(np.float32) for k, p in params.items()}
            adamw_step(params, grads, state)
            for k in ref:
                m, v = moments[k]
                ref[k], m, v = reference_adamw(ref[k], grads[k].astype(np.float64), m, v, t, 1e-2,
                                               0.9, 0.999, 1e-8, 0.1, decay=ref[k].ndim >= 2)
                moments[k] = (m, v)
        assert state.step == 3
        np.testing.assert_allclose(weight.data, ref['w'], atol=1e-5)
        np.testing.assert_allclose(bias.data, ref['b'], atol=1e-5)

    def test_first_step_moves_by_learning_rate(self):
        # bias-corrected first step is lr * sign(grad) for a non-decayed param
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        p.grad = np.array([0.3, -4.0, 1e-3], dtype=np.float32)
        adamw_step({'p': p}, None, AdamWState(learning_rate=0.01, weight_decay=0.0))
        np.testing.assert_allclose(p.data, [0.99, -1.99, 0.49], atol=1e-5)

    def test_only_matrices_decay(self):
        matrix = Tensor(np.ones((2, 2)), requires_grad=True)
        vector = Tensor(np.ones(2), requires_grad=True)
        assert decays(matrix) and not decays(vector)
        state = AdamWState(learning_rate=0.1, weight_decay=0.5)
        adamw_step({'m': matrix, 'v': vector}, {'m': np.zeros((2, 2)), 'v': np.zeros(2)}, state)
        np.testing.assert_allclose(matrix.data, 0.95)
        np.testing.assert_array_equal(vector.data, 1.0)

    def test_zero_learning_rate_is_fixed_point(self, rng):
        p = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        before = p.data.copy()
        state = AdamWState(learning_rate=0.0)
        for _ in range(5):
            adamw_step({'p': p}, {'p': rng.standard_normal((4, 4)).astype(np.float32)}, state)
        np.testing.assert_array_equal(p.data, before)

    def test_converges_on_scalar_quadratic(self):
        # minimize (w - 3)^2
        w = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamWState(learning_rate=0.1)
        for _ in range(200):
            adamw_step({'w': w}, {'w': (2.0 * (w.data - 3.0)).astype(np.float32)}, state)
        assert state.step == 200
        assert abs(float(w.data[0]) - 3.0) < 1e-2

    def test_missing_grad_counts_as_zero(self):
        p = Tensor(np.ones(3), requires_grad=True)
        adamw_step({'p': p}, None, AdamWState(weight_decay=0.0))
        np.testing.assert_array_equal(p.data, 1.0)

    def test_grad_shape_checked(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            adamw_step({'p': p}, {'p': np.ones(4)}, AdamWState())

    def test_zero_grad_clears(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2, dtype=np.float32)
        zero_grad({'p': p})
        assert p.grad is None

    @pytest.mark.parametrize('kwargs', [
        {'learning_rate': -1.0}, {'beta1': 1.0}, {'beta2': 0.0}, {'epsilon': 0.0}, {'weight_decay': -0.1},
    ])
    def test_rejects_bad_hyperparameters(self, kwargs):
        with pytest.raises(ValueError):
            AdamWState(**kwargs)


class TestSchedule:
    def test_constant(self):
        assert scheduled_learning_rate(1e-4, 37, 100, 'constant') == 1e-4

    def test_cosine_endpoints_and_midpoint(self):
        assert scheduled_learning_rate(1e-3, 0, 11, 'cosine') == pytest.approx(1e-3)
        assert scheduled_learning_rate(1e-3, 5, 11, 'cosine') == pytest.approx(5e-4)
        assert scheduled_learning_rate(1e-3, 10, 11, 'cosine') == pytest.approx(0.0, abs=1e-15)

    def test_cosine_is_monotone(self):
        rates = [scheduled_learning_rate(1.0, s, 50, 'cosine') for s in range(50)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert not any(math.isnan(r) for r in rates)

    def test_unknown_schedule(self):
        with pytest.raises(ValueError):
            scheduled_learning_rate(1e-4, 0, 10, 'step')
