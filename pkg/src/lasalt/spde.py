"""Stochastic ("weather") transport driven by a precomputed expectation trajectory.

States may carry a leading member axis so one call advances a whole shard of
ensemble members; increments then have shape ``(members, N)``.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import TYPE_CHECKING, Literal
import warnings

import numpy as np

from lasalt import grid as gridmod, utils
from lasalt.errors import InstabilityError, SeamContaminationWarning
from lasalt.fields import (
    OneFormField,
    ScalarField,
    VectorField,
    coordinate_scale,
    double_lie,
    exterior_d,
    lie_oneform,
    lie_scalar,
)


if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from lasalt.expectation import ExpectationTrajectory
    from lasalt.fields import GridField
    from lasalt.noise import NoiseBasis


logger = logging.getLogger(__name__)

SchemeStr = Literal["strat", "ito"]
GROWTH_LIMIT = 10.0
SEAM_TOLERANCE = 1e-2


@dataclasses.dataclass(frozen=True, eq=False)
class SpdeState:
    """One member (or a batch of members) of the stochastic system."""

    theta: ScalarField
    omega: ScalarField
    u: OneFormField | None = None
    """Circulation one-form, only when the u-equation is enabled."""
    t: float = 0.0
    step_index: int = 0
    member_ids: tuple[int, ...] = ()
    """Member of each batch entry (empty for an unbatched state)."""

    def __repr__(self) -> str:
        return utils.get_repr(
            self, t=self.t, step_index=self.step_index, members=len(self.member_ids)
        )

    @property
    def grid(self) -> gridmod.TorusGrid:
        return self.theta.grid

    def is_finite(self) -> bool:
        fields = [self.theta, self.omega] + ([self.u] if self.u is not None else [])
        return all(f.is_finite() for f in fields)


@dataclasses.dataclass(frozen=True, eq=False)
class ForcingCache:
    """Per-snapshot forcing one-forms assembled from the trajectory."""

    times: np.ndarray
    f_snapshots: list[OneFormField]
    """``f = -d(p~ - g Theta y) + g Theta y_hat`` taken literally (``dy = y_hat``)."""
    drive_snapshots: list[OneFormField]
    """``F = d p~ - g Theta y_hat``, the term entering ``du + ... + F dt``."""
    snapshot_dt: float

    def __repr__(self) -> str:
        return utils.get_repr(self, snapshots=len(self.times))

    def _interp(self, seq: Sequence[OneFormField], t: float) -> OneFormField:
        pos = (t - self.times[0]) / self.snapshot_dt if len(self.times) > 1 else 0.0
        i = min(max(int(np.floor(pos + 1e-9)), 0), len(seq) - 1)
        w = pos - i
        if i == len(seq) - 1 or abs(w) < 1e-9:  # noqa: PLR2004
            return seq[i]
        return seq[i] * (1.0 - w) + seq[i + 1] * w

    def drive_at(self, t: float) -> OneFormField:
        return self._interp(self.drive_snapshots, t)

    def f_at(self, t: float) -> OneFormField:
        return self._interp(self.f_snapshots, t)


def assemble_forcing(traj: ExpectationTrajectory, g: float) -> ForcingCache:
    """Build the forcing one-forms for every trajectory snapshot."""
    grid = traj.grid
    y = grid.sawtooth_y()
    y_hat = np.zeros((2, *grid.shape))
    y_hat[1] = 1.0
    f_list, drive_list = [], []
    for state, p in zip(traj.states, traj.ptilde_snapshots, strict=True):
        dp = exterior_d(p)
        dtheta = exterior_d(state.theta)
        buoy = OneFormField(g * state.theta.values * y_hat, grid)
        # d(g Theta y) = g y dTheta + g Theta dy
        d_theta_y = coordinate_scale(g * y, dtheta) + buoy
        f_list.append(-dp + d_theta_y + buoy)
        drive_list.append(dp - buoy)
    return ForcingCache(traj.times, f_list, drive_list, traj.snapshot_dt)


# -- stepping ----------------------------------------------------------------------


def _effective_field(
    u: VectorField, basis: NoiseBasis, increments: np.ndarray, dt: float
) -> VectorField:
    """``U dt + sum_k xi_k dW_k``, batched along the leading axes of ``increments``."""
    return u * dt + basis.combine(increments)


def _buoyancy_x(theta: ScalarField) -> np.ndarray:
    return gridmod.gradient(theta).values[..., 0, :, :]


def _u_source(
    u_theta: ScalarField,
    traj: ExpectationTrajectory,
    forcing: ForcingCache,
    g: float,
    t: float,
) -> OneFormField:
    """``F + g y d theta'`` at time ``t``."""
    theta_prime = u_theta - traj.theta_at(t)
    grid = u_theta.grid
    gy = g * grid.sawtooth_y()
    return coordinate_scale(gy, exterior_d(theta_prime)) + forcing.drive_at(t)


def _increments(increments: np.ndarray, state: SpdeState) -> np.ndarray:
    arr = np.asarray(increments, dtype=np.float64)
    if state.member_ids and arr.ndim != 2:  # noqa: PLR2004
        msg = f"Batched state needs increments of shape (members, N), got {arr.shape}"
        raise ValueError(msg)
    return arr


def step_stratonovich(
    state: SpdeState,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    g: float,
    dt: float,
    increments: np.ndarray,
    *,
    forcing: ForcingCache | None = None,
) -> SpdeState:
    """One stochastic Heun step.

    The predictor transports with ``V1 = U(t) dt + sum xi_k dW_k``, the corrector
    averages ``V1`` at the old state with ``V2 = U(t + dt) dt + sum xi_k dW_k`` at the
    predicted one.

    Raises:
        TrajectoryExhaustedError: If the trajectory does not cover ``[t, t + dt]``.
        InstabilityError: If a field grows by more than 10 within the step.
    """
    dw = _increments(increments, state)
    t0, t1 = state.t, state.t + dt
    v1 = _effective_field(traj.u_at(t0), basis, dw, dt)
    v2 = _effective_field(traj.u_at(t1), basis, dw, dt)

    lt1 = lie_scalar(v1, state.theta)
    theta_pred = state.theta - lt1
    theta = state.theta - 0.5 * (lt1 + lie_scalar(v2, theta_pred))

    lw1 = lie_scalar(v1, state.omega)
    omega_pred = state.omega - lw1 + g * dt * _buoyancy_x(state.theta)
    omega = (
        state.omega
        - 0.5 * (lw1 + lie_scalar(v2, omega_pred))
        + 0.5 * g * dt * (_buoyancy_x(state.theta) + _buoyancy_x(theta_pred))
    )

    u = None
    if state.u is not None:
        if forcing is None:
            msg = "The u-equation needs a ForcingCache"
            raise ValueError(msg)
        s0 = _u_source(state.theta, traj, forcing, g, t0)
        lu1 = lie_oneform(v1, state.u)
        u_pred = state.u - lu1 - s0 * dt
        s1 = _u_source(theta_pred, traj, forcing, g, t1)
        u = state.u - 0.5 * (lu1 + lie_oneform(v2, u_pred)) - 0.5 * dt * (s0 + s1)
    return _advance(state, theta, omega, u, traj, dt)


def step_ito(
    state: SpdeState,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    g: float,
    dt: float,
    increments: np.ndarray,
    *,
    forcing: ForcingCache | None = None,
) -> SpdeState:
    """One Euler-Maruyama step of the Itô form with the ``1/2 sum L_xi^2`` drift.

    Raises:
        TrajectoryExhaustedError: If the trajectory does not cover ``t``.
        InstabilityError: If a field grows by more than 10 within the step.
    """
    dw = _increments(increments, state)
    t0 = state.t
    traj.locate(t0 + dt)
    v = _effective_field(traj.u_at(t0), basis, dw, dt)

    theta = state.theta - lie_scalar(v, state.theta)
    theta = theta + 0.5 * dt * double_lie(basis, state.theta)
    omega = state.omega - lie_scalar(v, state.omega)
    omega = omega + 0.5 * dt * double_lie(basis, state.omega)
    omega = omega + g * dt * _buoyancy_x(state.theta)

    u = None
    if state.u is not None:
        if forcing is None:
            msg = "The u-equation needs a ForcingCache"
            raise ValueError(msg)
        u = state.u - lie_oneform(v, state.u) + 0.5 * dt * double_lie(basis, state.u)
        u = u - _u_source(state.theta, traj, forcing, g, t0) * dt
    return _advance(state, theta, omega, u, traj, dt)


def _advance(
    state: SpdeState,
    theta: ScalarField,
    omega: ScalarField,
    u: OneFormField | None,
    traj: ExpectationTrajectory,
    dt: float,
) -> SpdeState:
    step = state.step_index + 1
    pairs = [("theta", state.theta, theta), ("omega", state.omega, omega)]
    if u is not None and state.u is not None:
        pairs.append(("u", state.u, u))
    for name, before, after in pairs:
        _check_growth(name, before, after, step)
    return SpdeState(
        theta=theta,
        omega=omega,
        u=u,
        t=traj.t_start + step * dt,
        step_index=step,
        member_ids=state.member_ids,
    )


def _check_growth(name: str, before: GridField, after: GridField, step: int) -> None:
    new = np.atleast_1d(after.member_l2())
    if not np.all(np.isfinite(new)):
        bad = int(np.flatnonzero(~np.isfinite(new))[0])
        msg = f"Non-finite {name} at step {step}"
        raise InstabilityError(msg, step_index=step, field=name, member_index=bad)
    old = np.atleast_1d(before.member_l2())
    with np.errstate(divide="ignore", invalid="ignore"):
        growth = np.where(old > 0, new / old, 1.0)
    if np.any(growth > GROWTH_LIMIT):
        worst = int(np.argmax(growth))
        msg = f"{name} grew by {growth[worst]:.3e} in step {step}"
        raise InstabilityError(
            msg,
            step_index=step,
            field=name,
            growth=float(growth[worst]),
            member_index=worst,
        )


def step(
    scheme: SchemeStr,
    state: SpdeState,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    g: float,
    dt: float,
    increments: np.ndarray,
    *,
    forcing: ForcingCache | None = None,
) -> SpdeState:
    match scheme:
        case "strat":
            return step_stratonovich(
                state, traj, basis, g, dt, increments, forcing=forcing
            )
        case "ito":
            return step_ito(state, traj, basis, g, dt, increments, forcing=forcing)
        case _:
            msg = f"Unknown scheme {scheme!r}"
            raise ValueError(msg)


# -- driving -----------------------------------------------------------------------


def initial_state(
    traj: ExpectationTrajectory,
    member_ids: Sequence[int] = (),
    *,
    enable_u: bool = False,
) -> SpdeState:
    """Members start from the deterministic expectation data at the trajectory start."""
    first = traj.states[0]
    batch = (len(member_ids),) if member_ids else ()

    def rep[F: (ScalarField, OneFormField)](f: F) -> F:
        values = np.broadcast_to(f.values, (*batch, *f.values.shape)).copy()
        return type(f)(values, f.grid)

    u0 = rep(traj.u_snapshots[0].as_oneform()) if enable_u else None
    return SpdeState(
        theta=rep(first.theta),
        omega=rep(first.omega),
        u=u0,
        t=first.t,
        step_index=0,
        member_ids=tuple(member_ids),
    )


def run_member(
    state: SpdeState,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    g: float,
    increments: np.ndarray,
    *,
    scheme: SchemeStr = "strat",
    forcing: ForcingCache | None = None,
    callback: Callable[[SpdeState], None] | None = None,
) -> SpdeState:
    """Step a state through a whole increment table.

    Args:
        state: Initial (possibly batched) state
        traj: Expectation trajectory, its ``dt`` is the step size
        basis: Noise basis
        g: Buoyancy constant
        increments: ``(N, n_steps)`` for one member or ``(members, N, n_steps)``
        scheme: ``"strat"`` or ``"ito"``
        forcing: Needed when the state carries ``u``
        callback: Called with the state after every step
    """
    table = np.asarray(increments)
    for k in range(table.shape[-1]):
        state = step(
            scheme, state, traj, basis, g, traj.dt, table[..., k], forcing=forcing
        )
        if callback is not None:
            callback(state)
    return state


def fluctuations(
    state: SpdeState, traj: ExpectationTrajectory
) -> tuple[OneFormField | None, ScalarField]:
    """``(u - E[u], theta - E[theta])`` at the state's time.

    Raises:
        TimeMisalignedError: If the state is not on the trajectory's time grid.
        TrajectoryExhaustedError: If the state's time is outside the archive.
    """
    traj.step_of(state.t)
    theta_prime = state.theta - traj.theta_at(state.t)
    u_prime = None if state.u is None else state.u - traj.u_flat_at(state.t)
    return u_prime, theta_prime


def seam_ratio(field: ScalarField, width: float | None = None) -> float:
    """Largest amplitude inside the seam band of y relative to the global maximum."""
    band = field.grid.seam_band(width)
    peak = float(np.max(np.abs(field.values)))
    if peak == 0:
        return 0.0
    return float(np.max(np.abs(field.values[..., band]))) / peak


def check_seam(theta_prime: ScalarField, width: float | None = None) -> float:
    """Warn with `SeamContaminationWarning` if fluctuations reached the y-seam."""
    ratio = seam_ratio(theta_prime, width)
    if ratio > SEAM_TOLERANCE:
        msg = f"Fluctuations reached the y-seam (band/max = {ratio:.3e})"
        logger.warning(msg)
        warnings.warn(msg, SeamContaminationWarning, stacklevel=2)
    return ratio

