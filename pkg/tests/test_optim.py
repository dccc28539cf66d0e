import math

import numpy as np
import pytest

from orpit.autodiff import ShapeError, Tensor
from orpit.optim import AdamState, adam_step


def reference_adam(p, grads, lr, b1, b2, eps, wd):
    """Scalar loop-level Adam with decoupled decay, written independently."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * wd * p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


class TestAdam:
    def test_one_step_hand_value(self):
        p = {"p": Tensor(np.array([1.0]))}
        adam_step(p, {"p": np.array([1.0])}, AdamState(lr=0.1, weight_decay=0.0))
        np.testing.assert_allclose(p["p"].data, [0.9], atol=1e-7)

    def test_zero_grad_no_decay_is_noop(self):
        p = {"w": Tensor(np.array([0.3, -2.0]))}
        before = p["w"].data.copy()
        state = AdamState(weight_decay=0.0)
        for _ in range(3):
            adam_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(p["w"].data, before)

    def test_decay_only_shrinks_magnitude(self):
        p = {"w": Tensor(np.array([0.5, -1.5]))}
        before = np.abs(p["w"].data.copy())
        adam_step(p, {"w": np.zeros(2)}, AdamState(weight_decay=1e-2))
        assert np.all(np.abs(p["w"].data) < before)

    @pytest.mark.parametrize("wd", [0.0, 1e-5, 0.1])
    def test_matches_reference_over_steps(self, rng, wd):
        grads = rng.standard_normal(12)
        p = {"x": Tensor(np.array([0.7]))}
        state = AdamState(lr=0.01, weight_decay=wd)
        for g in grads:
            adam_step(p, {"x": np.array([g])}, state)
        expected = reference_adam(0.7, grads, 0.01, 0.9, 0.999, 1e-8, wd)
        np.testing.assert_allclose(p["x"].data[0], expected, rtol=1e-12)
        assert state.step == 12

    def test_defaults(self):
        s = AdamState()
        assert (s.lr, s.weight_decay, s.beta1, s.beta2) == (1e-3, 1e-5, 0.9, 0.999)

    def test_state_shapes_follow_params(self):
        p = {"a": Tensor(np.ones((2, 3))), "b": Tensor(np.ones(4))}
        state = AdamState()
        adam_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, state)
        assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"a": Tensor(np.ones(3))}, {"a": np.ones(4)}, AdamState())

    def test_deterministic(self, rng):
        g = rng.standard_normal((5, 3))
        outs = []
        for _ in range(2):
            p = {"w": Tensor(np.ones(3, dtype=np.float32))}
            state = AdamState()
            for row in g:
                adam_step(p, {"w": row.astype(np.float32)}, state)
            outs.append(p["w"].data.tobytes())
        assert outs[0] == outs[1]
