import numpy as np
import pytest

from renalseg.engine import Adam, AdamState, Parameter, adam_step


class TestAdamStep:
    def test_zero_gradient_is_identity(self):
        p = Parameter(np.array([1.0, -2.0, 3.0], dtype=np.float32), "p")
        state = AdamState.create(p)
        before = p.data.copy()
        p.grad = np.zeros_like(p.data)
        adam_step(p, state)
        np.testing.assert_array_equal(p.data, before)

    def test_missing_gradient_is_identity(self):
        p = Parameter(np.array([1.0], dtype=np.float32), "p")
        state = AdamState.create(p)
        adam_step(p, state)
        np.testing.assert_array_equal(p.data, [1.0])

    def test_first_step_moves_by_learning_rate(self):
        p = Parameter(np.zeros(4, dtype=np.float32), "p")
        state = AdamState.create(p, learning_rate=1e-4)
        p.grad = np.full(4, 0.37, dtype=np.float32)
        adam_step(p, state)
        # bias-corrected m/sqrt(v) is sign(g) on the first step
        np.testing.assert_allclose(-p.data, 1e-4, rtol=1e-3)
        assert state.step_count == 1

    def test_descends_quadratic(self):
        p = Parameter(np.array([1.0], dtype=np.float32), "x")
        state = AdamState.create(p, learning_rate=0.05)
        values = []
        for _ in range(5):
            values.append(float(p.data[0] ** 2))
            p.grad = 2 * p.data
            adam_step(p, state)
        values.append(float(p.data[0] ** 2))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_hyperparameter_validation(self):
        p = Parameter(np.zeros(1, dtype=np.float32), "p")
        with pytest.raises(ValueError):
            AdamState.create(p, learning_rate=0.0)
        with pytest.raises(ValueError):
            AdamState.create(p, beta1=1.0)
        with pytest.raises(ValueError):
            AdamState.create(p, epsilon=0.0)


class TestAdamWrapper:
    def test_steps_all_parameters(self, rng):
        params = [Parameter(rng.standard_normal(3).astype(np.float32), f"p{i}") for i in range(3)]
        optim = Adam(params, learning_rate=1e-2)
        before = [p.data.copy() for p in params]
        for p in params:
            p.grad = np.ones_like(p.data)
        optim.step()
        for p, b in zip(params, before):
            assert not np.array_equal(p.data, b)
        optim.zero_grad()
        assert all(p.grad is None for p in params)
