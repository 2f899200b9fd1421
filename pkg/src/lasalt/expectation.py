"""Deterministic expectation ("climate") solver in vorticity form.

State is ``(Omega, Theta, Ubar)``: the expected vorticity, the expected buoyancy and
the spatial mean of the expected velocity. The velocity ``U = K Omega + Ubar`` is
reconstructed at every Runge-Kutta stage, the modified pressure is recovered from
its Poisson problem at every saved snapshot.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
from typing import TYPE_CHECKING, Any

import numpy as np
import upath

from lasalt import grid as gridmod, serialization, snapshots, utils
from lasalt.errors import (
    HashMismatchError,
    InstabilityError,
    TimeMisalignedError,
    TrajectoryExhaustedError,
)
from lasalt.fields import (
    ConstantVector,
    OneFormField,
    ScalarField,
    VectorField,
    double_lie,
    exterior_d,
    lie_oneform,
    lie_scalar,
)
from lasalt.noise import NoiseBasis, build_noise_basis


if TYPE_CHECKING:
    import os
    from collections.abc import Sequence

    from lasalt.grid import TorusGrid
    from lasalt.runconfig import RunConfig


logger = logging.getLogger(__name__)

GROWTH_LIMIT = 1e6
TIME_RTOL = 1e-9
ADVECTIVE_CFL = 0.5
DIFFUSIVE_CFL = 0.25


@dataclasses.dataclass(frozen=True, eq=False)
class ExpectationState:
    """Expected vorticity and buoyancy with the mean velocity at time ``t``."""

    omega: ScalarField
    """``E[omega]``, mean-free."""
    theta: ScalarField
    """``E[theta]``."""
    ubar: ConstantVector = ConstantVector()
    """Spatial mean of ``E[u]``."""
    t: float = 0.0
    step: int = 0

    def __repr__(self) -> str:
        return utils.get_repr(self, t=self.t, step=self.step, ubar=self.ubar)

    @property
    def grid(self) -> TorusGrid:
        return self.omega.grid

    def is_finite(self) -> bool:
        return self.omega.is_finite() and self.theta.is_finite()

    def velocity(self) -> VectorField:
        return reconstruct_velocity(self)


def reconstruct_velocity(state: ExpectationState) -> VectorField:
    """``E[u] = K Omega + Ubar``."""
    return gridmod.biot_savart(state.omega) + state.ubar.to_field(state.grid)


# -- mean velocity -----------------------------------------------------------------


def _integrate_vector(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return np.sum(values, axis=(-2, -1)) * grid.cell_area


def mean_term_readings(ubar: ConstantVector, basis: NoiseBasis) -> dict[str, np.ndarray]:
    """``1/2 sum_k int L_xi_k^2 Ubar dV`` under the vector-field and one-form readings."""
    grid = basis.grid
    field = ubar.to_field(grid)
    as_vector = double_lie(basis, field)
    as_oneform = double_lie(basis, field.as_oneform())
    return {
        "vector": 0.5 * _integrate_vector(as_vector.values, grid),
        "oneform": 0.5 * _integrate_vector(as_oneform.values, grid),
    }


def mean_tendency(
    ubar: ConstantVector,
    theta: ScalarField,
    v: VectorField,
    basis: NoiseBasis,
    g: float,
) -> np.ndarray:
    """Right-hand side of the mean-velocity ODE.

    ``g int Theta dV y_hat + 1/2 sum_k int L_xi^2 V dV + 1/2 sum_k int L_xi^2 Ubar dV``
    with the one-form Lie derivative on ``V`` and the vector-field one on ``Ubar``.
    Integrals are over the whole torus, so a constant ``Theta = c`` gives ``g c L^2``.
    """
    grid = basis.grid
    rate = np.array([0.0, g * float(gridmod.integral(theta))])
    if basis.constant:
        # both Lie terms vanish identically for constant fields
        return rate
    v_term = double_lie(basis, v.as_oneform())
    rate = rate + 0.5 * _integrate_vector(v_term.values, grid)
    return rate + mean_term_readings(ubar, basis)["vector"]


def evolve_mean(
    ubar: ConstantVector,
    theta: ScalarField,
    v: VectorField,
    basis: NoiseBasis,
    g: float,
    dt: float,
) -> ConstantVector:
    """One RK4 step of the mean ODE with ``Theta`` and ``V`` held fixed."""
    def rhs(b: np.ndarray) -> np.ndarray:
        return mean_tendency(ConstantVector.from_array(b), theta, v, basis, g)

    b = ubar.as_array()
    k1 = rhs(b)
    k2 = rhs(b + 0.5 * dt * k1)
    k3 = rhs(b + 0.5 * dt * k2)
    k4 = rhs(b + dt * k3)
    return ConstantVector.from_array(b + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


# -- pressure ----------------------------------------------------------------------


def pressure_source(
    u: VectorField, theta: ScalarField, basis: NoiseBasis, g: float
) -> ScalarField:
    """``div L_U U - g d_y Theta - 1/2 sum_k div L_xi^2 U`` (one-form Lie derivatives)."""
    flat = u.as_oneform()
    transport = gridmod.divergence(lie_oneform(u, flat).as_vector())
    buoyancy = gridmod.gradient(theta).values[..., 1, :, :] * g
    noise = gridmod.divergence(double_lie(basis, flat).as_vector())
    return transport - buoyancy - 0.5 * noise


def recover_pressure(
    u: VectorField, theta: ScalarField, basis: NoiseBasis, g: float
) -> ScalarField:
    """Mean-free modified pressure solving ``-Laplace(p) = pressure_source``.

    The (discretisation-level) mean of the source is removed before inversion and
    logged.
    """
    src = pressure_source(u, theta, basis, g)
    mean = float(src.mean())
    logger.debug("Pressure source mean %.3e removed", mean)
    return gridmod.poisson_solve(src - mean)


# -- stepping ----------------------------------------------------------------------


def stable_dt(u: VectorField, basis: NoiseBasis) -> float:
    """``min(0.5 dx / |U|_inf, 0.25 dx^2 / lambda_max)``.

    The diffusive limit is dropped for constant noise, which is integrated exactly.
    """
    dx = basis.grid.spacing
    speed = u.max_speed()
    bound = ADVECTIVE_CFL * dx / speed if speed > 0 else math.inf
    if not basis.constant and basis.lambda_max > 0:
        bound = min(bound, DIFFUSIVE_CFL * dx**2 / basis.lambda_max)
    return bound


@functools.cache
def _propagator(basis: NoiseBasis, tau: float) -> np.ndarray:
    return np.exp(basis.diffusion_symbol() * tau)


def _tendency(
    y: np.ndarray,
    b: np.ndarray,
    basis: NoiseBasis,
    g: float,
    *,
    diffuse: bool,
    frozen_velocity: VectorField | None,
) -> tuple[np.ndarray, np.ndarray]:
    grid = basis.grid
    omega, theta = ScalarField(y[0], grid), ScalarField(y[1], grid)
    if frozen_velocity is None:
        v = gridmod.biot_savart(omega - omega.mean())
        u = v + ConstantVector.from_array(b).to_field(grid)
    else:
        u = v = frozen_velocity
    d_omega = -lie_scalar(u, omega) + g * gridmod.gradient(theta).values[0]
    d_theta = -lie_scalar(u, theta)
    if diffuse:
        d_omega = d_omega + 0.5 * double_lie(basis, omega)
        d_theta = d_theta + 0.5 * double_lie(basis, theta)
    if frozen_velocity is None:
        d_b = mean_tendency(ConstantVector.from_array(b), theta, v, basis, g)
    else:
        d_b = np.zeros(2)
    # vorticity is a curl, its tendency carries no mean
    d_omega = d_omega - d_omega.mean()
    return np.stack([d_omega.values, d_theta.values]), d_b


def step_expectation(
    state: ExpectationState,
    basis: NoiseBasis,
    g: float,
    dt: float,
    *,
    frozen_velocity: VectorField | None = None,
    require_parabolic: bool = True,
) -> ExpectationState:
    """Advance ``(Omega, Theta, Ubar)`` by one step.

    Classical RK4, or its integrating-factor (Lawson) form when every noise field
    is constant: the diffusion ``1/2 sum_k (xi_k . grad)^2`` is then applied exactly
    in spectral space.

    Args:
        state: Current state
        basis: Noise basis
        g: Buoyancy constant
        dt: Step size
        frozen_velocity: Use this velocity instead of ``K Omega + Ubar`` (test mode,
            ``Ubar`` is then held fixed)
        require_parabolic: Raise EllipticityViolationError for degenerate noise

    Raises:
        InstabilityError: On non-finite values or growth beyond 1e6 within the step.
        EllipticityViolationError: If ``require_parabolic`` and the basis is degenerate.
    """
    if require_parabolic:
        basis.require_elliptic()
    grid = gridmod.check_same_grid(state.omega, state.theta, basis.xis[0])
    lawson = basis.constant
    kw: dict[str, Any] = {"diffuse": not lawson, "frozen_velocity": frozen_velocity}

    def prop(values: np.ndarray, tau: float) -> np.ndarray:
        if not lawson:
            return values
        coeffs = gridmod.to_spectral(values) * _propagator(basis, tau)
        return gridmod.to_physical(coeffs, grid)

    h = dt
    y = np.stack([state.omega.values, state.theta.values])
    b = state.ubar.as_array()
    k1, m1 = _tendency(y, b, basis, g, **kw)
    k2, m2 = _tendency(prop(y + 0.5 * h * k1, 0.5 * h), b + 0.5 * h * m1, basis, g, **kw)
    y_half = prop(y, 0.5 * h)
    k3, m3 = _tendency(y_half + 0.5 * h * k2, b + 0.5 * h * m2, basis, g, **kw)
    y_full = prop(y, h)
    k4, m4 = _tendency(y_full + h * prop(k3, 0.5 * h), b + h * m3, basis, g, **kw)
    y_new = y_full + h / 6.0 * (prop(k1, h) + 2.0 * prop(k2 + k3, 0.5 * h) + k4)
    b_new = b + h / 6.0 * (m1 + 2.0 * m2 + 2.0 * m3 + m4)

    step = state.step + 1
    _check_growth(y, y_new, step)
    omega = ScalarField(y_new[0], grid)
    return ExpectationState(
        omega=omega - omega.mean(),
        theta=ScalarField(y_new[1], grid),
        ubar=ConstantVector.from_array(b_new),
        t=state.t + dt,
        step=step,
    )


def _check_growth(before: np.ndarray, after: np.ndarray, step: int) -> None:
    names = ("omega", "theta")
    for i, name in enumerate(names):
        if not np.all(np.isfinite(after[i])):
            msg = f"Non-finite {name} at step {step}"
            raise InstabilityError(msg, step_index=step, field=name)
    norm_before = float(np.linalg.norm(before))
    norm_after = float(np.linalg.norm(after))
    if norm_before > 0 and norm_after > GROWTH_LIMIT * norm_before:
        growth = norm_after / norm_before
        per_field = [float(np.linalg.norm(after[i] - before[i])) for i in range(2)]
        worst = names[int(np.argmax(per_field))]
        msg = f"Expectation state grew by {growth:.3e} in step {step}"
        raise InstabilityError(msg, step_index=step, field=worst, growth=growth)


# -- trajectory --------------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class ExpectationTrajectory:
    """Write-once archive of expectation snapshots at a uniform stride."""

    grid: TorusGrid
    dt: float
    """Solver step."""
    save_every: int
    g: float
    noise_hash: str
    states: list[ExpectationState]
    u_snapshots: list[VectorField]
    """``K Omega + Ubar`` per snapshot."""
    ptilde_snapshots: list[ScalarField]
    """Modified pressure ``E[p - |u|^2 / 2]`` per snapshot."""
    config_hash: str = ""
    initial: dict[str, Any] = dataclasses.field(default_factory=dict)
    diagnostics: list[dict[str, Any]] = dataclasses.field(default_factory=list)
    """Rows ``(t, field, l2, min, max, aux...)`` per saved snapshot."""
    mean_terms: list[dict[str, Any]] = dataclasses.field(default_factory=list)
    """Both readings of the mean-velocity noise term per saved snapshot."""

    def __repr__(self) -> str:
        return utils.get_repr(
            self, n=self.grid.n, snapshots=len(self.states), t_end=self.t_end
        )

    def __len__(self) -> int:
        return len(self.states)

    @functools.cached_property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def snapshot_dt(self) -> float:
        return self.dt * self.save_every

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def covers(self, t0: float, t1: float) -> bool:
        slack = TIME_RTOL * max(1.0, abs(self.t_end))
        return t0 >= self.t_start - slack and t1 <= self.t_end + slack

    def locate(self, t: float) -> tuple[int, float]:
        """Snapshot index and linear weight of ``t``.

        Raises:
            TrajectoryExhaustedError: If ``t`` is outside the archived range.
        """
        if not self.covers(t, t):
            msg = f"t={t} outside the archived range [{self.t_start}, {self.t_end}]"
            raise TrajectoryExhaustedError(msg)
        if len(self.states) == 1:
            return 0, 0.0
        pos = (t - self.t_start) / self.snapshot_dt
        i = min(max(math.floor(pos + TIME_RTOL), 0), len(self.states) - 1)
        w = pos - i
        if abs(w) < TIME_RTOL or i == len(self.states) - 1:
            return i, 0.0
        if w > 1.0 - TIME_RTOL:
            return i + 1, 0.0
        return i, w

    def index_of(self, t: float) -> int:
        """Index of the snapshot at exactly ``t``.

        Raises:
            TimeMisalignedError: If ``t`` falls between snapshots.
        """
        i, w = self.locate(t)
        if w:
            msg = f"t={t} is not a snapshot time (stride {self.snapshot_dt})"
            raise TimeMisalignedError(msg)
        return i

    def step_of(self, t: float) -> int:
        """Solver step index of ``t``.

        Raises:
            TimeMisalignedError: If ``t`` is not on the solver's time grid.
        """
        pos = (t - self.t_start) / self.dt
        k = round(pos)
        if abs(pos - k) > 1e-6:  # noqa: PLR2004
            msg = f"t={t} is not on the solver time grid (dt={self.dt})"
            raise TimeMisalignedError(msg)
        return k

    def _interp[F: (ScalarField, VectorField)](self, seq: Sequence[F], t: float) -> F:
        i, w = self.locate(t)
        if not w:
            return seq[i]
        return seq[i] * (1.0 - w) + seq[i + 1] * w

    def u_at(self, t: float) -> VectorField:
        """``E[u]`` at ``t``, linearly interpolated between snapshots."""
        return self._interp(self.u_snapshots, t)

    def u_flat_at(self, t: float) -> OneFormField:
        return self.u_at(t).as_oneform()

    def theta_at(self, t: float) -> ScalarField:
        return self._interp([s.theta for s in self.states], t)

    def omega_at(self, t: float) -> ScalarField:
        return self._interp([s.omega for s in self.states], t)

    def ptilde_at(self, t: float) -> ScalarField:
        return self._interp(self.ptilde_snapshots, t)

    def dtheta_at(self, t: float) -> OneFormField:
        return exterior_d(self.theta_at(t))

    def ubar_at(self, t: float) -> ConstantVector:
        i, w = self.locate(t)
        if not w:
            return self.states[i].ubar
        return self.states[i].ubar * (1.0 - w) + self.states[i + 1].ubar * w

    def energy_growth_constant(self) -> float:
        """Fitted ``C0`` with ``|Theta(t)|^2 <= |Theta_0|^2 exp(C0 t)``."""
        norm0 = self.states[0].theta.l2_norm() ** 2
        if norm0 == 0:
            return 0.0
        rates = [
            math.log(max(s.theta.l2_norm() ** 2, np.finfo(float).tiny) / norm0)
            / (s.t - self.t_start)
            for s in self.states[1:]
        ]
        return max([0.0, *rates])

    # -- persistence -----------------------------------------------------------------

    def meta(self, hashes: dict[str, str]) -> dict[str, Any]:
        return {
            "grid": {
                "n": self.grid.n,
                "length": self.grid.length,
                "dealias_fraction": self.grid.dealias_fraction,
            },
            "dt": self.dt,
            "save_every": self.save_every,
            "g": self.g,
            "noise_hash": self.noise_hash,
            "config_hash": self.config_hash,
            "initial": self.initial,
            "times": [s.t for s in self.states],
            "steps": [s.step for s in self.states],
            "ubar": [s.ubar.as_list() for s in self.states],
            "mean_terms": self.mean_terms,
            "files": hashes,
        }

    def save(self, directory: str | os.PathLike[str], *, force: bool = False) -> None:
        """Write ``meta.json``, the LSF1 series and ``diagnostics.csv``."""
        root = snapshots.prepare_directory(directory, force=force)
        steps = [s.step for s in self.states]
        times = [s.t for s in self.states]
        hashes: dict[str, str] = {}
        series = {
            "omega": [s.omega for s in self.states],
            "theta": [s.theta for s in self.states],
            "U": self.u_snapshots,
            "ptilde": self.ptilde_snapshots,
        }
        for prefix, fields in series.items():
            hashes |= snapshots.write_series(root, prefix, fields, steps, times)
        serialization.dump_file(self.meta(hashes), root / "meta.json")
        if self.diagnostics:
            snapshots.write_csv(
                root / "diagnostics.csv", self.diagnostics, DIAGNOSTIC_COLUMNS
            )
        logger.info("Wrote expectation trajectory (%d snapshots) to %s", len(self), root)

    @classmethod
    def load(
        cls,
        directory: str | os.PathLike[str],
        *,
        config_hash: str | None = None,
    ) -> ExpectationTrajectory:
        """Read a trajectory directory back, verifying every recorded hash.

        Raises:
            HashMismatchError: If ``config_hash`` differs from the recorded one or a
                snapshot's content changed.
        """
        from lasalt.grid import TorusGrid

        root = upath.UPath(directory)
        meta = serialization.load_file(root / "meta.json")
        if config_hash is not None and meta["config_hash"] != config_hash:
            msg = (
                f"Trajectory in {directory} was computed for config "
                f"{meta['config_hash']}, not {config_hash}"
            )
            raise HashMismatchError(msg)
        grid = TorusGrid(**meta["grid"])
        hashes = meta["files"]
        omegas = snapshots.read_series(root, "omega", ScalarField, grid, hashes)
        thetas = snapshots.read_series(root, "theta", ScalarField, grid, hashes)
        us = snapshots.read_series(root, "U", VectorField, grid, hashes)
        ps = snapshots.read_series(root, "ptilde", ScalarField, grid, hashes)
        states = [
            ExpectationState(om, th, ConstantVector.from_array(ub), t, step)
            for om, th, ub, t, step in zip(
                omegas, thetas, meta["ubar"], meta["times"], meta["steps"], strict=True
            )
        ]
        logger.debug("Loaded %d snapshots from %s", len(states), root)
        return cls(
            grid=grid,
            dt=meta["dt"],
            save_every=meta["save_every"],
            g=meta["g"],
            noise_hash=meta["noise_hash"],
            states=states,
            u_snapshots=us,
            ptilde_snapshots=ps,
            config_hash=meta["config_hash"],
            initial=meta["initial"],
            mean_terms=meta.get("mean_terms", []),
        )


DIAGNOSTIC_COLUMNS = ("t", "field", "l2", "min", "max", "h1", "tail_energy", "aux")


def _diagnostics(state: ExpectationState, p: ScalarField) -> list[dict[str, Any]]:
    rows = []
    for name, f in (("omega", state.omega), ("theta", state.theta)):
        rows.append(
            snapshots.field_rows(
                state.t,
                name,
                f,
                h1=gridmod.sobolev_norm(f, 1),
                tail_energy=gridmod.tail_energy(f),
            )
        )
    rows.append(snapshots.field_rows(state.t, "ptilde", p))
    rows.append({"t": state.t, "field": "ubar_x", "aux": state.ubar.x})
    rows.append({"t": state.t, "field": "ubar_y", "aux": state.ubar.y})
    return rows


def run_expectation(
    config: RunConfig,
    *,
    frozen_velocity: VectorField | None = None,
) -> ExpectationTrajectory:
    """Integrate the expectation system and archive every ``save_every``-th step.

    Raises:
        EllipticityViolationError: If the config requires a parabolic solve and the
            noise basis is degenerate.
        InstabilityError: Propagated from `step_expectation`.
    """
    grid = config.grid.to_grid()
    solver = config.solver
    g = config.physics.g
    basis = build_noise_basis(
        config.noise, grid, require_elliptic=solver.require_parabolic
    )
    omega, theta, ubar = config.initial_fields()
    state = ExpectationState(omega, theta, ubar)
    states: list[ExpectationState] = []
    us: list[VectorField] = []
    ps: list[ScalarField] = []
    diagnostics: list[dict[str, Any]] = []
    mean_terms: list[dict[str, Any]] = []
    warned = False

    def archive(s: ExpectationState) -> VectorField:
        u = frozen_velocity if frozen_velocity is not None else reconstruct_velocity(s)
        p = recover_pressure(u, s.theta, basis, g)
        readings = mean_term_readings(s.ubar, basis)
        logger.debug(
            "t=%.4f mean term vector=%s oneform=%s", s.t, readings["vector"],
            readings["oneform"],
        )
        states.append(s)
        us.append(u)
        ps.append(p)
        diagnostics.extend(_diagnostics(s, p))
        mean_terms.append({
            "t": s.t,
            "vector": readings["vector"].tolist(),
            "oneform": readings["oneform"].tolist(),
        })
        return u

    logger.info("Expectation run %r: %d steps", config, solver.n_steps)
    with utils.log_duration("Expectation solve"):
        u = archive(state)
        for _ in range(solver.n_steps):
            bound = stable_dt(u, basis)
            if solver.dt > bound and not warned:
                logger.warning(
                    "dt=%.3e exceeds the stability bound %.3e at t=%.4f",
                    solver.dt, bound, state.t,
                )
                warned = True
            state = step_expectation(
                state,
                basis,
                g,
                solver.dt,
                frozen_velocity=frozen_velocity,
                require_parabolic=solver.require_parabolic,
            )
            if state.step % solver.save_every == 0:
                u = archive(state)
            elif frozen_velocity is None:
                u = reconstruct_velocity(state)
    return ExpectationTrajectory(
        grid=grid,
        dt=solver.dt,
        save_every=solver.save_every,
        g=g,
        noise_hash=basis.spec_hash,
        states=states,
        u_snapshots=us,
        ptilde_snapshots=ps,
        config_hash=config.config_hash,
        initial={"omega": config.initial.omega, "theta": config.initial.theta,
                 "ubar": list(config.initial.ubar)},
        diagnostics=diagnostics,
        mean_terms=mean_terms,
    )


# -- convergence studies -----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ConvergenceReport:
    """Errors of a refinement ladder against its finest member."""

    parameter: str
    """``"n"`` or ``"dt"``."""
    values: tuple[float, ...]
    errors: tuple[float, ...]
    """Relative L2 error of each level but the finest."""
    ratios: tuple[float, ...]
    """``errors[i] / errors[i + 1]``."""
    order: float | None = None
    """Richardson order estimate (time ladders)."""

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _restrict(f: ScalarField, grid: TorusGrid) -> np.ndarray:
    factor = f.grid.n // grid.n
    return f.values[..., ::factor, ::factor]


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    ref = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff / ref if ref > 0 else diff


def _ratios(errors: Sequence[float]) -> tuple[float, ...]:
    return tuple(
        errors[i] / errors[i + 1] if errors[i + 1] > 0 else math.inf
        for i in range(len(errors) - 1)
    )


def self_convergence(config: RunConfig, ns: Sequence[int]) -> ConvergenceReport:
    """Grid-refinement ladder on ``Theta`` at the final time.

    Every level is compared with the finest one on the coarsest grid's nodes, so
    each size must divide the largest.
    """
    ns = sorted(ns)
    if ns[-1] % ns[0] or any(ns[-1] % n for n in ns):
        msg = f"Grid sizes {ns} must all divide the finest one"
        raise ValueError(msg)
    finals = [run_expectation(config.with_grid(n)).states[-1].theta for n in ns]
    coarse = finals[0].grid
    ref = _restrict(finals[-1], coarse)
    errors = tuple(_rel(_restrict(f, coarse), ref) for f in finals[:-1])
    report = ConvergenceReport("n", tuple(ns), errors, _ratios(errors))
    logger.info("Grid convergence: %s", report)
    return report


def time_convergence(
    config: RunConfig, factors: Sequence[int] = (1, 2, 4)
) -> ConvergenceReport:
    """Step-refinement ladder (``dt / factor``) with a Richardson order estimate."""
    dt = config.solver.dt
    finals = []
    for factor in factors:
        cfg = config.with_solver(dt=dt / factor, save_every=1)
        finals.append(run_expectation(cfg).states[-1].theta.values)
    errors = tuple(_rel(f, finals[-1]) for f in finals[:-1])
    order = None
    if len(finals) >= 3:  # noqa: PLR2004
        d1 = float(np.linalg.norm(finals[-3] - finals[-2]))
        d2 = float(np.linalg.norm(finals[-2] - finals[-1]))
        ratio = factors[-2] / factors[-3]
        if d1 > 0 and d2 > 0:
            order = math.log(d1 / d2) / math.log(ratio)
    report = ConvergenceReport(
        "dt", tuple(dt / f for f in factors), errors, _ratios(errors), order
    )
    logger.info("Time convergence: %s", report)
    return report


if __name__ == "__main__":
    from lasalt.grid import TorusGrid

    g = TorusGrid(32)
    x, _ = g.mesh
    basis = build_noise_basis("canonical(0.1)", g)
    s = ExpectationState(ScalarField(np.zeros(g.shape), g), ScalarField(np.sin(x), g))
    for _ in range(10):
        s = step_expectation(s, basis, 1.0, 1e-2)
    print(s, s.theta.l2_norm())
