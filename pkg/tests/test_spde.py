from __future__ import annotations

import numpy as np
import pytest

from lasalt import characteristics, expectation, grid as gridmod, spde
from lasalt.errors import (
    SeamContaminationWarning,
    TimeMisalignedError,
    TrajectoryExhaustedError,
)
from lasalt.fields import ScalarField
from lasalt.noise import build_noise_basis, sample_path, sample_paths
from lasalt.runconfig import RunConfig

from .conftest import small_config_dict


@pytest.fixture(scope="module")
def still_trajectory():
    """Expectation run without flow: ``E[u] = 0`` at every time."""
    raw = small_config_dict(
        physics={"g": 0.0},
        initial={"omega": "zero", "theta": "mode(1, 1, 0.0, 1.0)"},
    )
    return expectation.run_expectation(RunConfig.from_dict(raw))


def test_initial_state(trajectory):
    """Members start from the expectation data, optionally with u."""
    state = spde.initial_state(trajectory, [3, 4], enable_u=True)
    assert state.member_ids == (3, 4)
    assert state.theta.batch_shape == (2,)
    assert state.u is not None
    np.testing.assert_array_equal(
        state.theta.member(1).values, trajectory.states[0].theta.values
    )


def test_constant_noise_translates(still_trajectory):
    """Without mean flow a constant-noise member is a random translation."""
    traj = still_trajectory
    basis = build_noise_basis("canonical(0.3)", traj.grid)
    path = sample_path(3, 0, 10, traj.dt, basis)
    final = spde.run_member(
        spde.initial_state(traj), traj, basis, traj.g, path.increments
    )
    shift = tuple(0.3 * path.increments.sum(axis=1))
    exact = characteristics.translation_oracle(traj.states[0].theta, shift)
    assert gridmod.relative_l2(final.theta, exact) < 5e-4
    assert final.t == pytest.approx(traj.t_end)


def test_zero_noise_ignores_increments(trajectory):
    """With vanishing noise fields every path gives the same member."""
    basis = build_noise_basis("canonical(0.0)", trajectory.grid)
    start = spde.initial_state(trajectory)
    runs = [
        spde.run_member(start, trajectory, basis, trajectory.g, increments)
        for increments in (
            np.zeros((2, 10)),
            sample_path(1, 0, 10, trajectory.dt, basis).increments,
            sample_path(1, 1, 10, trajectory.dt, basis).increments,
        )
    ]
    for other in runs[1:]:
        assert gridmod.relative_l2(other.theta, runs[0].theta) <= 1e-12
        assert gridmod.relative_l2(other.omega, runs[0].omega) <= 1e-12


@pytest.mark.parametrize("scheme", ["strat", "ito"])
def test_batch_matches_single_members(trajectory, basis, scheme):
    """Stepping members together equals stepping them one by one."""
    ids = [0, 1, 2]
    table = sample_paths(5, ids, 10, trajectory.dt, basis)
    batch = spde.run_member(
        spde.initial_state(trajectory, ids),
        trajectory,
        basis,
        trajectory.g,
        table,
        scheme=scheme,
    )
    for i in ids:
        single = spde.run_member(
            spde.initial_state(trajectory),
            trajectory,
            basis,
            trajectory.g,
            table[i],
            scheme=scheme,
        )
        np.testing.assert_allclose(
            batch.theta.member(i).values, single.theta.values, rtol=0, atol=1e-12
        )


def test_u_equation_needs_forcing(trajectory, basis):
    """Members carrying u must be given the assembled forcing."""
    state = spde.initial_state(trajectory, enable_u=True)
    with pytest.raises(ValueError, match="ForcingCache"):
        spde.step("strat", state, trajectory, basis, 1.0, trajectory.dt, np.zeros(2))
    forcing = spde.assemble_forcing(trajectory, trajectory.g)
    dt = trajectory.dt
    after = spde.step(
        "strat", state, trajectory, basis, 1.0, dt, np.zeros(2), forcing=forcing
    )
    assert after.u is not None
    assert after.u.is_finite()


def test_unknown_scheme(trajectory, basis):
    """Only the Stratonovich and Itô integrators exist."""
    with pytest.raises(ValueError, match="scheme"):
        spde.step(
            "milstein",  # type: ignore[arg-type]
            spde.initial_state(trajectory),
            trajectory,
            basis,
            1.0,
            trajectory.dt,
            np.zeros(2),
        )


def test_running_past_the_archive(trajectory, basis):
    """Members cannot be stepped beyond the trajectory's end."""
    with pytest.raises(TrajectoryExhaustedError):
        spde.run_member(
            spde.initial_state(trajectory), trajectory, basis, 1.0, np.zeros((2, 11))
        )


def test_fluctuations(trajectory, basis):
    """Fluctuations are taken against the expectation at the member's time."""
    state = spde.initial_state(trajectory)
    u_prime, theta_prime = spde.fluctuations(state, trajectory)
    assert u_prime is None
    assert theta_prime.l2_norm() == 0.0
    shifted = spde.SpdeState(state.theta, state.omega, t=0.0012)
    with pytest.raises(TimeMisalignedError):
        spde.fluctuations(shifted, trajectory)


def test_seam_warning(grid):
    """Fluctuations reaching y = 0 trigger a warning."""
    _, y = grid.mesh
    quiet = ScalarField(np.sin(y / 2) ** 8, grid)
    assert spde.check_seam(quiet) < spde.SEAM_TOLERANCE
    with pytest.warns(SeamContaminationWarning):
        spde.check_seam(ScalarField(np.cos(y), grid))


if __name__ == "__main__":
    pytest.main([__file__])
