from __future__ import annotations

import numpy as np
import pytest

from lasalt import characteristics, expectation, grid as gridmod, snapshots, spde
from lasalt.characteristics import FlowMap
from lasalt.errors import JacobianDegenerateError, TrajectoryExhaustedError
from lasalt.fields import OneFormField, ScalarField
from lasalt.noise import build_noise_basis, sample_path
from lasalt.runconfig import RunConfig

from .conftest import small_config_dict


@pytest.fixture(scope="module")
def still_trajectory():
    raw = small_config_dict(
        grid={"n": 32},
        physics={"g": 0.0},
        initial={"omega": "zero", "theta": "mode(1, 1, 0.0, 1.0)"},
    )
    return expectation.run_expectation(RunConfig.from_dict(raw))


def test_constant_noise_flow_is_a_translation(still_trajectory):
    """Without mean flow the inverse map shifts every node by -eps W."""
    traj = still_trajectory
    basis = build_noise_basis("canonical(0.3)", traj.grid)
    path = sample_path(4, 2, 10, traj.dt, basis)
    inverse = characteristics.integrate_flow(
        traj, basis, path.increments, traj.t_start, traj.t_end, "inverse"
    )
    shift = 0.3 * path.increments.sum(axis=1)
    np.testing.assert_allclose(
        inverse.displacement, np.broadcast_to(-shift[:, None, None], (2, 32, 32)),
        atol=1e-10,
    )
    np.testing.assert_allclose(inverse.jacobian_determinant(), 1.0, atol=1e-10)


def test_pullback_matches_translation_oracle(still_trajectory):
    """Pulling theta0 back reproduces the exactly translated field."""
    traj = still_trajectory
    basis = build_noise_basis("canonical(0.3)", traj.grid)
    path = sample_path(4, 3, 10, traj.dt, basis)
    inverse = characteristics.integrate_flow(
        traj, basis, path.increments, traj.t_start, traj.t_end, "inverse"
    )
    theta0 = traj.states[0].theta
    shift = tuple(0.3 * path.increments.sum(axis=1))
    oracle = characteristics.translation_oracle(theta0, shift)
    pulled = characteristics.theta_by_pullback(theta0, inverse)
    assert gridmod.relative_l2(pulled, oracle) < 1e-3


def test_pullback_agrees_with_spde_member(trajectory, basis):
    """The characteristics solution tracks the Eulerian member."""
    path = sample_path(7, 0, 10, trajectory.dt, basis)
    member = spde.run_member(
        spde.initial_state(trajectory), trajectory, basis, trajectory.g, path.increments
    )
    inverse = characteristics.integrate_flow(
        trajectory, basis, path.increments, trajectory.t_start, trajectory.t_end,
        "inverse",
    )
    pulled = characteristics.theta_by_pullback(trajectory.states[0].theta, inverse)
    assert gridmod.relative_l2(pulled, member.theta) < 5e-2


def test_incompressible_flow_preserves_area(trajectory, basis):
    """Divergence-free drift and noise give Jacobian determinants near one."""
    path = sample_path(1, 5, 10, trajectory.dt, basis)
    forward = characteristics.integrate_flow(
        trajectory, basis, path.increments, 0.0, trajectory.t_end
    )
    assert forward.is_finite()
    np.testing.assert_allclose(forward.jacobian_determinant(), 1.0, atol=1e-2)


def test_inverse_levels(trajectory, basis):
    """Inverse integration collects one intermediate map per step."""
    path = sample_path(1, 6, 10, trajectory.dt, basis)
    levels: list[FlowMap] = []
    final = characteristics.integrate_flow(
        trajectory, basis, path.increments, 0.0, trajectory.t_end, "inverse",
        levels=levels,
    )
    assert len(levels) == 10
    assert levels[-1].s == pytest.approx(0.0)
    np.testing.assert_array_equal(levels[-1].positions, final.positions)


def test_ito_scheme_runs(trajectory, basis):
    """The Euler-Maruyama characteristics stay close to the Heun ones."""
    path = sample_path(1, 8, 10, trajectory.dt, basis)
    maps = [
        characteristics.integrate_flow(
            trajectory, basis, path.increments, 0.0, trajectory.t_end, scheme=scheme
        )
        for scheme in ("strat", "ito")
    ]
    assert maps[0].max_distance(maps[1]) < 0.1


def test_flow_beyond_archive(trajectory, basis):
    """Flows must stay inside the archived time range."""
    with pytest.raises(TrajectoryExhaustedError):
        characteristics.integrate_flow(
            trajectory, basis, np.zeros((2, 20)), 0.0, 2 * trajectory.t_end
        )
    with pytest.raises(TrajectoryExhaustedError):
        characteristics.integrate_flow(trajectory, basis, np.zeros((2, 4)), 0.0, 0.05)


def test_constant_velocity_flow(grid32):
    """Node images move by velocity times elapsed time and wind around the torus."""
    flow = characteristics.constant_velocity_flow(grid32, (2.0 * np.pi + 0.5, 0.0), 0, 1)
    assert flow.winding[0].min() == 1
    assert (flow.winding[1] == 0).all()
    shifted = characteristics.constant_velocity_flow(grid32, (0.5, 0.0), 0, 1)
    assert flow.max_distance(shifted) < 1e-12


def test_pushforward_of_dx(grid32):
    """A pure translation pushes dx forward unchanged."""
    ones = np.ones(grid32.shape)
    dx = OneFormField(np.stack([ones, 0 * ones]), grid32)
    ident = FlowMap.identity(grid32, 0.0, "inverse")
    moved = FlowMap(grid32, ident.positions - 0.3, 0.0, 1.0, "inverse")
    pushed = characteristics.pushforward_oneform(dx, moved)
    np.testing.assert_allclose(pushed.values, dx.values, atol=1e-12)
    with pytest.raises(ValueError, match="inverse"):
        characteristics.pushforward_oneform(dx, FlowMap.identity(grid32))


def test_degenerate_jacobian(grid32):
    """Collapsed maps are reported with the offending node."""
    x, y = grid32.mesh
    collapsed = np.stack([x - 1.08 * np.sin(x), y])
    ident = FlowMap.identity(grid32, 0.0, "inverse")
    flow = FlowMap(grid32, collapsed, 0.0, 1.0, "inverse")
    alpha = OneFormField(np.ones((2, *grid32.shape)), grid32)
    assert ident.jacobian_determinant().min() == pytest.approx(1.0)
    with pytest.raises(JacobianDegenerateError) as info:
        characteristics.pushforward_oneform(alpha, flow)
    assert info.value.determinant < characteristics.DETERMINANT_FLOOR


def test_save(tmp_path, grid32):
    """Maps are stored as two-component displacement snapshots."""
    flow = characteristics.constant_velocity_flow(grid32, (0.25, -0.5), 0.0, 2.0)
    flow.save(tmp_path / "map.lsf1")
    snap = snapshots.read_lsf1(tmp_path / "map.lsf1")
    assert snap.n_components == 2
    assert snap.time == 2.0
    np.testing.assert_allclose(snap.values[0], 0.5)
    np.testing.assert_allclose(snap.values[1], -1.0)


def test_pullback_of_constant(grid32):
    """Constants are invariant under any map."""
    flow = characteristics.constant_velocity_flow(grid32, (0.7, 0.2), 0.0, 1.0)
    constant = ScalarField(np.full(grid32.shape, 3.0), grid32)
    pulled = characteristics.theta_by_pullback(constant, flow)
    np.testing.assert_allclose(pulled.values, 3.0)


if __name__ == "__main__":
    pytest.main([__file__])
