from __future__ import annotations

import math

import numpy as np
import pytest

from lasalt import expectation, grid as gridmod, moments
from lasalt.fields import ScalarField
from lasalt.noise import build_noise_basis
from lasalt.runconfig import RunConfig

from .conftest import small_config_dict


EPS2 = 0.09


@pytest.fixture(scope="module")
def sine_setup():
    """Zero flow with theta0 = sin x: members are random translations in x."""
    raw = small_config_dict(
        physics={"g": 0.0},
        initial={"omega": "zero", "theta": "mode(1, 0, 0.0, 1.0)"},
    )
    config = RunConfig.from_dict(raw)
    traj = expectation.run_expectation(config)
    return config, traj, moments.run_moments(config, traj)


def test_variance_of_a_translated_mode(sine_setup):
    """Theta2 matches E[sin^2(x - eps W)] - (E sin(x - eps W))^2."""
    config, traj, solution = sine_setup
    grid = traj.grid
    x, _ = grid.mesh
    t = solution.final.t
    exact = (
        0.5
        - 0.5 * np.cos(2 * x) * math.exp(-2 * EPS2 * t)
        - np.sin(x) ** 2 * math.exp(-EPS2 * t)
    )
    assert gridmod.relative_l2(solution.final.theta2, ScalarField(exact, grid)) < 1e-6


def test_gradient_covariance_of_a_translated_mode(sine_setup):
    """The xx entry of dTheta2 is the variance of cos(x - eps W)."""
    _, traj, solution = sine_setup
    x, _ = traj.grid.mesh
    t = solution.final.t
    exact = (
        0.5
        + 0.5 * np.cos(2 * x) * math.exp(-2 * EPS2 * t)
        - np.cos(x) ** 2 * math.exp(-EPS2 * t)
    )
    computed = solution.final.dtheta2.values[0, 0]
    np.testing.assert_allclose(computed, exact, atol=1e-6 * np.max(np.abs(exact)))
    np.testing.assert_allclose(solution.final.dtheta2.values[1, 1], 0.0, atol=1e-14)


def test_snapshots_line_up_with_trajectory(sine_setup):
    """Moment snapshots are kept at the expectation snapshot times."""
    _, traj, solution = sine_setup
    assert [s.t for s in solution.states] == pytest.approx(list(traj.times))
    assert solution.final.max_order == 4
    assert solution.at_time(traj.times[2]).step == traj.states[2].step
    with pytest.raises(KeyError):
        solution.at_time(0.0123)


def test_even_moments_stay_positive(sine_setup):
    """Zero initial moments stay non-negative."""
    _, _, solution = sine_setup
    assert all(report.ok for report in solution.positivity)


def test_order_two_is_the_variance_equation(trajectory, config):
    """Stepping A^(2) alone, Theta2 alone and all moments together agree."""
    basis = build_noise_basis(config.noise, trajectory.grid)
    state = moments.initial_moments(config)
    dt, g = trajectory.dt, trajectory.g
    alone = moments.step_theta_covariance(state.theta2, trajectory, basis, dt, 0.0)
    as_pth = moments.step_pth_moment([state.theta2], trajectory, basis, 2, dt, 0.0)
    together = moments.step_moments(state, trajectory, basis, g, dt)
    np.testing.assert_allclose(as_pth.values, alone.values, rtol=0, atol=1e-15)
    np.testing.assert_allclose(together.theta2.values, alone.values, rtol=0, atol=1e-15)
    assert together.t == pytest.approx(dt)


def test_covariance_steps_agree_with_lockstep(trajectory, config):
    """The per-quantity steppers reproduce the lockstep update."""
    basis = build_noise_basis(config.noise, trajectory.grid)
    dt, g = trajectory.dt, trajectory.g
    state = moments.step_moments(
        moments.initial_moments(config), trajectory, basis, g, dt
    )
    t = state.t
    together = moments.step_moments(state, trajectory, basis, g, dt)
    dtheta2 = moments.step_dtheta_covariance(state.dtheta2, trajectory, basis, dt, t)
    cross = moments.step_cross_covariance(
        state.cross, state.dtheta2, trajectory, basis, g, dt, t
    )
    np.testing.assert_allclose(dtheta2.values, together.dtheta2.values, atol=1e-15)
    np.testing.assert_allclose(cross.values, together.cross.values, atol=1e-15)
    u2 = moments.step_u_covariance(
        state.u2, state.cross, trajectory, basis, g, dt, t, dtheta2=state.dtheta2
    )
    np.testing.assert_allclose(u2.values, together.u2.values, atol=1e-15)


def test_pth_moment_needs_lower_orders(trajectory, basis):
    """A^(p) cannot be stepped without A^(2) .. A^(p-1)."""
    zero = ScalarField.zeros(trajectory.grid)
    with pytest.raises(ValueError, match="orders 2..4"):
        moments.step_pth_moment([zero, zero], trajectory, basis, 4, trajectory.dt, 0.0)


def test_positivity_report(grid):
    """Negative even moments and a negative A4 - A2^2 are flagged."""
    a2 = ScalarField(np.ones(grid.shape), grid)
    a3 = ScalarField.zeros(grid)
    good = moments.even_moment_positivity_check([a2, a3, a2 * 3.0])
    assert good.ok
    assert good.min_gap == pytest.approx(2.0)
    values = np.ones(grid.shape)
    values[3, 5] = -0.5
    bad = moments.even_moment_positivity_check([ScalarField(values, grid)])
    assert not bad.ok
    assert bad.argmin_a2 == (3, 5)
    gap = moments.even_moment_positivity_check([a2, a3, a2 * 0.5])
    assert not gap.ok


def test_lower_max_order(trajectory, config):
    """max_order limits the tracked central moments."""
    solution = moments.run_moments(config, trajectory, max_order=3)
    assert solution.final.max_order == 3
    assert set(solution.final.as_map()) == {"theta2", "A3", "dtheta2", "cross", "u2"}


def test_save(tmp_path, sine_setup):
    """Every field is written as a series next to the diagnostics."""
    _, _, solution = sine_setup
    hashes = solution.save(tmp_path / "moments")
    assert "A4_000000.lsf1" in hashes
    assert (tmp_path / "moments" / "l2_identity.csv").exists()
    assert (tmp_path / "moments" / "diagnostics.csv").exists()


if __name__ == "__main__":
    pytest.main([__file__])
