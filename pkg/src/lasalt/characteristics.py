"""Method-of-characteristics solutions driven by the same Brownian increments.

Grid nodes are carried along the stochastic flow ``dX = E[u] dt + sum xi_k o dW_k``
with off-grid values taken from periodic cubic splines. Positions are kept
unwrapped, so displacements are smooth periodic fields and can be differentiated
spectrally.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
from typing import TYPE_CHECKING, Literal

import numpy as np
from scipy import ndimage

from lasalt import grid as gridmod, snapshots, utils
from lasalt.errors import JacobianDegenerateError, TrajectoryExhaustedError
from lasalt.fields import (
    OneFormField,
    ScalarField,
    VectorField,
    coordinate_scale,
    exterior_d,
)
from lasalt.noise import ito_correction_vector


if TYPE_CHECKING:
    import os
    from collections.abc import Callable

    from lasalt.expectation import ExpectationTrajectory
    from lasalt.grid import TorusGrid
    from lasalt.noise import NoiseBasis
    from lasalt.spde import ForcingCache


logger = logging.getLogger(__name__)

DirectionStr = Literal["forward", "inverse"]
SchemeStr = Literal["strat", "ito"]
DETERMINANT_FLOOR = 1e-6


class PeriodicSampler:
    """Cubic-spline evaluation of grid values at arbitrary points of the torus."""

    def __init__(self, values: np.ndarray, grid: TorusGrid) -> None:
        self.grid = grid
        arr = np.asarray(values, dtype=np.float64)
        self.component_shape = arr.shape[:-2]
        flat = arr.reshape(-1, grid.n, grid.n)
        self._coeffs = [
            ndimage.spline_filter(f, order=3, mode="grid-wrap") for f in flat
        ]

    def __repr__(self) -> str:
        return utils.get_repr(self, grid=self.grid, components=self.component_shape)

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        """Sample at ``positions`` of shape ``(2, ...)`` (x first, any period)."""
        # index coordinates: axis 0 of the data is y
        coords = np.stack([positions[1], positions[0]]) / self.grid.spacing
        out = [
            ndimage.map_coordinates(
                c, coords, order=3, mode="grid-wrap", prefilter=False
            )
            for c in self._coeffs
        ]
        return np.stack(out).reshape(*self.component_shape, *positions.shape[1:])


@dataclasses.dataclass(frozen=True, eq=False)
class FlowMap:
    """Images of the grid nodes under the flow from ``s`` to ``t`` (or its inverse)."""

    grid: TorusGrid
    positions: np.ndarray
    """Unwrapped positions, shape ``(2, n, n)``."""
    s: float
    t: float
    direction: DirectionStr = "forward"

    def __repr__(self) -> str:
        return utils.get_repr(self, s=self.s, t=self.t, direction=self.direction)

    @classmethod
    def identity(
        cls, grid: TorusGrid, s: float = 0.0, direction: DirectionStr = "forward"
    ) -> FlowMap:
        x, y = grid.mesh
        return cls(grid, np.stack([x, y]), s, s, direction)

    @property
    def displacement(self) -> np.ndarray:
        """``positions - nodes``, a periodic field."""
        x, y = self.grid.mesh
        return self.positions - np.stack([x, y])

    @property
    def wrapped(self) -> np.ndarray:
        return np.mod(self.positions, self.grid.length)

    @property
    def winding(self) -> np.ndarray:
        """Number of periods each node image crossed, per axis."""
        return np.floor_divide(self.positions, self.grid.length).astype(int)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.positions)))

    def jacobian(self) -> np.ndarray:
        """``J[i, j] = d positions^i / d x^j`` by spectral differentiation."""
        return np.eye(2)[:, :, None, None] + gridmod.jacobian_values(
            self.displacement, self.grid
        )

    def jacobian_determinant(self) -> np.ndarray:
        j = self.jacobian()
        return j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0]

    def max_distance(self, other: FlowMap) -> float:
        """Largest node distance to another map, measured on the torus."""
        diff = self.positions - other.positions
        length = self.grid.length
        diff = diff - length * np.round(diff / length)
        return float(np.max(np.hypot(diff[0], diff[1])))

    def save(self, path: str | os.PathLike[str]) -> str:
        """Write the displacement as a two-component LSF1 snapshot."""
        return snapshots.write_lsf1(path, self.displacement, 0, self.t)


# -- integration -------------------------------------------------------------------


def _step_range(traj: ExpectationTrajectory, s: float, t: float) -> tuple[int, int]:
    if not traj.covers(min(s, t), max(s, t)):
        msg = f"Flow over [{s}, {t}] leaves the archived range"
        raise TrajectoryExhaustedError(msg)
    return traj.step_of(s), traj.step_of(t)


def _drift_sampler(
    traj: ExpectationTrajectory,
) -> Callable[[float], PeriodicSampler]:
    @functools.cache
    def at(time: float) -> PeriodicSampler:
        return PeriodicSampler(traj.u_at(time).values, traj.grid)

    return at


def integrate_flow(
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    increments: np.ndarray,
    s: float,
    t: float,
    direction: DirectionStr = "forward",
    *,
    scheme: SchemeStr = "strat",
    levels: list[FlowMap] | None = None,
) -> FlowMap:
    """Carry every grid node along the stochastic flow between ``s`` and ``t``.

    The forward map starts at the nodes at time ``s``. The inverse map starts at the
    nodes at time ``t`` and runs the backward equation (drift ``-E[u]``, noise
    ``-xi_k``) over the same increments in reverse order.

    Args:
        traj: Expectation trajectory supplying ``E[u]``
        basis: Noise basis
        increments: ``(N, n_steps)`` table indexed by the trajectory's solver steps
        s: Start time
        t: End time
        direction: ``"forward"`` or ``"inverse"``
        scheme: ``"strat"`` (Heun) or ``"ito"`` (Euler-Maruyama with Itô drift)
        levels: If given, inverse maps collect every intermediate ``phi_{r,t}^-1``
            here, latest ``r`` first

    Raises:
        TrajectoryExhaustedError: If ``[s, t]`` is not covered by the trajectory.
    """
    k0, k1 = _step_range(traj, s, t)
    grid = traj.grid
    dt = traj.dt
    table = np.asarray(increments)
    if table.shape[-1] < k1:
        msg = f"Increment table has {table.shape[-1]} steps, the flow needs {k1}"
        raise TrajectoryExhaustedError(msg)
    drift = _drift_sampler(traj)
    noise = [PeriodicSampler(xi.values, grid) for xi in basis.xis]
    correction = PeriodicSampler(ito_correction_vector(basis).values, grid)
    sign = 1.0 if direction == "forward" else -1.0

    def velocity(pos: np.ndarray, time: float, dw: np.ndarray) -> np.ndarray:
        v = drift(time)(pos) * dt
        for k, sampler in enumerate(noise):
            v = v + sampler(pos) * dw[k]
        return sign * v

    flow = FlowMap.identity(grid, s if direction == "forward" else t, direction)
    pos = flow.positions
    order = range(k0, k1) if direction == "forward" else range(k1 - 1, k0 - 1, -1)
    for k in order:
        dw = table[:, k]
        t_from = traj.t_start + (k if direction == "forward" else k + 1) * dt
        t_to = traj.t_start + (k + 1 if direction == "forward" else k) * dt
        if scheme == "ito":
            # the Itô correction keeps its sign in the backward equation
            pos = pos + velocity(pos, t_from, dw) + correction(pos) * dt
        else:
            v1 = velocity(pos, t_from, dw)
            v2 = velocity(pos + v1, t_to, dw)
            pos = pos + 0.5 * (v1 + v2)
        if levels is not None and direction == "inverse":
            levels.append(FlowMap(grid, pos, t_to, t, direction))
    return FlowMap(grid, pos, s, t, direction)


def theta_by_pullback(theta0: ScalarField, inverse: FlowMap) -> ScalarField:
    """``theta(t, x) = theta0(phi^-1(x))``."""
    values = PeriodicSampler(theta0.values, theta0.grid)(inverse.positions)
    return ScalarField(values, theta0.grid)


def pushforward_oneform(alpha: OneFormField, inverse: FlowMap) -> OneFormField:
    """``(phi_* alpha)_j(x) = alpha_i(A(x)) dA^i/dx^j`` with ``A = phi^-1``.

    Raises:
        JacobianDegenerateError: If ``det dA < 1e-6`` at some node.
    """
    if inverse.direction != "inverse":
        msg = "pushforward_oneform needs the inverse flow map"
        raise ValueError(msg)
    jac = inverse.jacobian()
    det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
    if np.min(det) < DETERMINANT_FLOOR:
        j, i = np.unravel_index(int(np.argmin(det)), det.shape)
        worst = float(det[j, i])
        msg = f"Flow map Jacobian degenerate at node ({i}, {j}): det={worst:.3e}"
        raise JacobianDegenerateError(msg, node=(int(i), int(j)), determinant=worst)
    sampled = PeriodicSampler(alpha.values, alpha.grid)(inverse.positions)
    values = np.einsum("iyx,ijyx->jyx", sampled, jac)
    return OneFormField(values, alpha.grid)


def _source(
    theta: ScalarField,
    traj: ExpectationTrajectory,
    forcing: ForcingCache,
    g: float,
    time: float,
) -> OneFormField:
    """``F + g y d theta'`` along one path."""
    theta_prime = theta - traj.theta_at(time)
    y = theta.grid.sawtooth_y()
    return coordinate_scale(g * y, exterior_d(theta_prime)) + forcing.drive_at(time)


def u_by_characteristics(
    u0: OneFormField,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    increments: np.ndarray,
    forcing: ForcingCache,
    t: float,
    *,
    macro_every: int = 5,
) -> OneFormField:
    """``u(t) = phi_* u0 - int_0^t (phi_{s,t})_* (F + g y d theta')(s) ds``.

    The time integral is the trapezoid rule over macro levels ``s`` spaced
    ``macro_every`` solver steps apart; ``theta(s)`` is itself obtained by
    pullback of the initial buoyancy.

    Args:
        u0: Initial circulation one-form
        traj: Expectation trajectory
        basis: Noise basis
        increments: ``(N, n_steps)`` Brownian increments of the path
        forcing: Forcing one-forms of the trajectory
        t: Final time, on the solver grid
        macro_every: Solver steps between quadrature levels
    """
    t0 = traj.t_start
    g = traj.g
    theta0 = traj.states[0].theta
    k_end = traj.step_of(t)
    levels: list[FlowMap] = []
    full = integrate_flow(traj, basis, increments, t0, t, "inverse", levels=levels)
    by_step = {traj.step_of(m.s): m for m in levels}
    by_step[k_end] = FlowMap.identity(traj.grid, t, "inverse")
    result = pushforward_oneform(u0, full)

    ks = sorted({*range(0, k_end + 1, macro_every), k_end})
    integrand = []
    for k in ks:
        s = t0 + k * traj.dt
        if k == 0:
            theta_s = theta0
        else:
            back = integrate_flow(traj, basis, increments, t0, s, "inverse")
            theta_s = theta_by_pullback(theta0, back)
        source = _source(theta_s, traj, forcing, g, s)
        integrand.append((s, pushforward_oneform(source, by_step[k])))
    total = OneFormField.zeros(traj.grid)
    for (s0, f0), (s1, f1) in zip(integrand, integrand[1:], strict=False):
        total = total + 0.5 * (s1 - s0) * (f0 + f1)
    logger.debug("u by characteristics: %d quadrature levels", len(integrand))
    return result - total


def translation_oracle(theta0: ScalarField, shift: tuple[float, float]) -> ScalarField:
    """``theta0(x - c)`` by a spectral phase shift."""
    grid = theta0.grid
    ikx, iky = grid.derivative_symbols
    phase = np.exp(-(ikx * shift[0] + iky * shift[1]))
    coeffs = gridmod.to_spectral(theta0.values) * phase
    return ScalarField(gridmod.to_physical(coeffs, grid), grid)


def constant_velocity_flow(
    grid: TorusGrid, velocity: VectorField | tuple[float, float], s: float, t: float
) -> FlowMap:
    """Exact forward map of a constant drift without noise."""
    c = np.asarray(getattr(velocity, "values", velocity), dtype=np.float64)
    shift = c.reshape(2, -1)[:, 0] * (t - s)
    ident = FlowMap.identity(grid, s)
    return FlowMap(grid, ident.positions + shift[:, None, None], s, t, "forward")
