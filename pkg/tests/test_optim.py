"""Tests for the adaptive moment optimizer."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from nasgs.optim import BETA1, BETA2, AdamState, exponential_decay, optimizer_step


class TestExponentialDecay:
    """Test the learning rate schedule."""

    def test_endpoints(self) -> None:
        """Test the schedule starts and ends at the given rates."""
        assert exponential_decay(1e-2, 1e-4, 100, 0) == pytest.approx(1e-2)
        assert exponential_decay(1e-2, 1e-4, 100, 100) == pytest.approx(1e-4)
        assert exponential_decay(1e-2, 1e-4, 100, 50) == pytest.approx(1e-3)

    def test_clamps_past_the_end(self) -> None:
        """Test steps beyond max_steps keep the final rate."""
        assert exponential_decay(1e-2, 1e-4, 100, 1000) == pytest.approx(1e-4)

    def test_no_steps(self) -> None:
        """Test a zero-length schedule keeps the initial rate."""
        assert exponential_decay(0.5, 0.1, 0, 3) == 0.5


class TestAdamStep:
    """Test single and repeated optimizer steps."""

    def test_zero_gradient_fresh_state(self) -> None:
        """Test a zero gradient on fresh moments leaves parameters unchanged."""
        params = {"x": np.array([1.0, -2.0])}
        state = AdamState()
        state.step(params, {"x": np.zeros(2)}, {"x": 0.1})
        np.testing.assert_array_equal(params["x"], [1.0, -2.0])

    def test_zero_gradient_decays_moments(self) -> None:
        """Test moments shrink by beta1 and beta2 under a zero gradient."""
        params = {"x": np.array([0.0])}
        state = AdamState()
        state.step(params, {"x": np.array([2.0])}, {"x": 0.1})
        m, v = state.m["x"].copy(), state.v["x"].copy()
        state.step(params, {"x": np.array([0.0])}, {"x": 0.1})
        np.testing.assert_allclose(state.m["x"], BETA1 * m)
        np.testing.assert_allclose(state.v["x"], BETA2 * v)

    def test_constant_gradient_moves_by_rate(self) -> None:
        """Test a constant gradient moves each coordinate by -sign(g) * rate."""
        params = {"x": np.zeros(3)}
        grad = np.array([0.3, -4.0, 1e-3])
        state = AdamState()
        for _ in range(200):
            before = params["x"].copy()
            state.step(params, {"x": grad}, {"x": 0.01})
        np.testing.assert_allclose(params["x"] - before, -np.sign(grad) * 0.01, rtol=1e-8)

    def test_quadratic_bowl(self) -> None:
        """Test convergence to the minimum of a quadratic within 1e-6."""
        target = np.array([1.0, -2.0, 0.5])
        params = {"x": np.zeros(3)}
        state = AdamState()
        steps = 5000
        for step in range(steps):
            grad = 2.0 * (params["x"] - target)
            rate = exponential_decay(0.05, 1e-7, steps, step)
            state.step(params, {"x": grad}, {"x": rate})
        assert np.abs(params["x"] - target).max() < 1e-6

    def test_groups_without_rate_are_skipped(self) -> None:
        """Test parameters without a learning rate are not touched."""
        params = {"a": np.ones(2), "b": np.ones(2)}
        AdamState().step(params, {"a": np.ones(2), "b": np.ones(2)}, {"a": 0.1})
        np.testing.assert_array_equal(params["b"], 1.0)
        assert params["a"][0] < 1.0

    def test_row_sparse_update(self) -> None:
        """Test only the selected rows move and count steps."""
        params = {"w": np.zeros((3, 2))}
        state = AdamState()
        state.step(params, {"w": np.ones((3, 2))}, {"w": 0.1}, rows={"w": np.array([1])})
        assert not params["w"][[0, 2]].any()
        assert params["w"][1] == pytest.approx([-0.1, -0.1])
        assert state.steps["w"].tolist() == [0, 1, 0]


class TestRemap:
    """Test moment bookkeeping after densification."""

    def test_remap_rows(self) -> None:
        """Test inherited rows keep moments and fresh rows start at zero."""
        params = {"x": np.zeros((2, 1))}
        state = AdamState()
        state.step(params, {"x": np.array([[1.0], [2.0]])}, {"x": 0.1})
        m = state.m["x"].copy()
        state.remap(["x"], np.array([1, -1, 0]))
        np.testing.assert_array_equal(state.m["x"], [m[1], [0.0], m[0]])
        assert state.steps["x"].tolist() == [1, 0, 1]

    def test_save_and_load(self, tmp_path: Path) -> None:
        """Test moments and step counts survive a round trip."""
        params = {"x": np.zeros(4)}
        state = AdamState()
        for _ in range(3):
            state.step(params, {"x": np.arange(4.0)}, {"x": 0.1})
        state.save(tmp_path / "opt.bin")
        back = AdamState.load(tmp_path / "opt.bin")
        np.testing.assert_array_equal(back.m["x"], state.m["x"])
        np.testing.assert_array_equal(back.v["x"], state.v["x"])
        assert back.steps["x"].tolist() == [3, 3, 3, 3]
        assert back.beta1 == state.beta1


class TestOptimizerStep:
    """Test the step wrapper."""

    def test_renormalizes_quaternions(self) -> None:
        """Test rotations stay unit length after a step."""
        params = {"rotations": np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])}
        grads = {"rotations": np.array([[0.5, -0.2, 0.1, 0.0], [0.1, 0.1, 0.1, 0.1]])}
        optimizer_step(params, grads, AdamState(), {"rotations": 0.2})
        np.testing.assert_allclose(np.linalg.norm(params["rotations"], axis=1), 1.0)
