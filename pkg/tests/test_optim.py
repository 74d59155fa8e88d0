"""Adam update contracts."""

import numpy as np
import pytest

from crossground import optim
from crossground.tensor import ShapeError, Tensor


def make_params():
    return {"w": Tensor(np.array([[1.0, -2.0]], dtype=np.float32), requires_grad=True)}


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        params = make_params()
        state = optim.init_adam(params, lr=1e-2)
        new_vals, state2 = optim.adam_step(params, {"w": np.zeros((1, 2), np.float32)}, state)
        assert np.array_equal(new_vals["w"], params["w"].values)
        assert state2.t == 1

    def test_first_step_is_signed_lr(self):
        params = make_params()
        lr = 1e-3
        state = optim.init_adam(params, lr=lr)
        g = np.array([[0.5, -3.0]], dtype=np.float32)
        new_vals, _ = optim.adam_step(params, {"w": g}, state)
        delta = new_vals["w"] - params["w"].values
        expected = -lr * np.sign(g)
        assert np.all(np.abs(delta - expected) <= abs(lr) * 1e-3)

    def test_bit_identical_across_runs(self):
        g = {"w": np.array([[0.1, 0.2]], dtype=np.float32)}
        runs = []
        for _ in range(2):
            params = make_params()
            state = optim.init_adam(params, lr=1e-2)
            v1, state = optim.adam_step(params, g, state)
            optim.apply_update(params, v1)
            v2, state = optim.adam_step(params, g, state)
            runs.append(v2["w"].tobytes())
        assert runs[0] == runs[1]

    def test_pure_function_does_not_mutate_inputs(self):
        params = make_params()
        before = params["w"].values.copy()
        state = optim.init_adam(params)
        m_before = state.m["w"].copy()
        optim.adam_step(params, {"w": np.ones((1, 2), np.float32)}, state)
        assert np.array_equal(params["w"].values, before)
        assert np.array_equal(state.m["w"], m_before)
        assert state.t == 0

    def test_shape_mismatch_rejected(self):
        params = make_params()
        state = optim.init_adam(params)
        with pytest.raises(ShapeError, match="adam_step"):
            optim.adam_step(params, {"w": np.zeros((2, 2), np.float32)}, state)

    def test_step_counter_increments(self):
        params = make_params()
        state = optim.init_adam(params)
        g = {"w": np.ones((1, 2), np.float32)}
        for i in range(3):
            _, state = optim.adam_step(params, g, state)
        assert state.t == 3
