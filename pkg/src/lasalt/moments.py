"""Closed deterministic equations for the fluctuation statistics.

Every equation is driven by the expectation trajectory only: ``E[u]`` transports,
the noise fields diffuse through ``1/2 sum_k L_xi_k^2`` and the gradients of the
expected fields act as sources. All fields of a `MomentState` are stepped together
with one classical RK4 step whose size equals the trajectory's ``dt``.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
from typing import TYPE_CHECKING, Any

import numpy as np

from lasalt import grid as gridmod, runconfig, snapshots, utils
from lasalt.errors import InstabilityError
from lasalt.fields import (
    GridField,
    OneFormField,
    ScalarField,
    Tensor2Field,
    VectorField,
    coordinate_scale,
    double_lie,
    lie,
    lie_oneform,
    lie_scalar,
    outer,
    product,
    symmetric_outer,
)
from lasalt.noise import build_noise_basis
from lasalt.spde import check_seam, seam_ratio


if TYPE_CHECKING:
    import os
    from collections.abc import Callable, Mapping, Sequence

    from lasalt.expectation import ExpectationTrajectory
    from lasalt.noise import NoiseBasis
    from lasalt.runconfig import RunConfig


logger = logging.getLogger(__name__)

GROWTH_LIMIT = 1e6
POSITIVITY_RTOL = 1e-6

type FieldMap = dict[str, GridField]


@dataclasses.dataclass(frozen=True, eq=False)
class MomentState:
    """Covariances and scalar central moments at one time level."""

    theta2: ScalarField
    """``E[theta'^2]``, also the second central moment."""
    dtheta2: Tensor2Field
    """``E[d theta' (x) d theta']``."""
    cross: Tensor2Field
    """``E[u' (x) d theta' + d theta' (x) u']``."""
    u2: Tensor2Field
    """``E[u' (x) u']``."""
    higher: tuple[ScalarField, ...] = ()
    """Central moments of theta of order 3, 4, ..."""
    t: float = 0.0
    step: int = 0

    def __repr__(self) -> str:
        return utils.get_repr(self, t=self.t, step=self.step, max_order=self.max_order)

    @property
    def max_order(self) -> int:
        return 2 + len(self.higher)

    def central(self, p: int) -> ScalarField:
        """``A^(p)`` for ``2 <= p <= max_order``."""
        if p == 2:  # noqa: PLR2004
            return self.theta2
        return self.higher[p - 3]

    @property
    def ap(self) -> list[ScalarField]:
        """``[A^(2), ..., A^(P)]``."""
        return [self.theta2, *self.higher]

    def as_map(self) -> FieldMap:
        fields: FieldMap = {
            "theta2": self.theta2,
            "dtheta2": self.dtheta2,
            "cross": self.cross,
            "u2": self.u2,
        }
        for p, f in enumerate(self.higher, start=3):
            fields[_order_key(p)] = f
        return fields

    @classmethod
    def from_map(
        cls, fields: Mapping[str, GridField], t: float, step: int
    ) -> MomentState:
        higher = []
        p = 3
        while _order_key(p) in fields:
            higher.append(fields[_order_key(p)])
            p += 1
        return cls(
            theta2=fields["theta2"],  # type: ignore[arg-type]
            dtheta2=fields["dtheta2"],  # type: ignore[arg-type]
            cross=fields["cross"],  # type: ignore[arg-type]
            u2=fields["u2"],  # type: ignore[arg-type]
            higher=tuple(higher),  # type: ignore[arg-type]
            t=t,
            step=step,
        )


def _order_key(p: int) -> str:
    return "theta2" if p == 2 else f"A{p}"  # noqa: PLR2004


# -- sources -----------------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class Drivers:
    """Expectation data entering the moment equations at one time."""

    u: VectorField
    """Transport velocity ``E[u]``."""
    lie_theta: list[ScalarField]
    """``L_xi_k E[theta]``."""
    lie_dtheta: list[OneFormField]
    """``L_xi_k d E[theta]``."""
    lie_u: list[OneFormField]
    """``L_xi_k E[u]`` with ``E[u]`` read as a one-form."""
    y: np.ndarray
    """Sawtooth coordinate ``y``."""


def drivers_at(traj: ExpectationTrajectory, basis: NoiseBasis, t: float) -> Drivers:
    u = traj.u_at(t)
    theta = traj.theta_at(t)
    dtheta = traj.dtheta_at(t)
    flat = u.as_oneform()
    return Drivers(
        u=u,
        lie_theta=[lie_scalar(xi, theta) for xi in basis.xis],
        lie_dtheta=[lie_oneform(xi, dtheta) for xi in basis.xis],
        lie_u=[lie_oneform(xi, flat) for xi in basis.xis],
        y=traj.grid.sawtooth_y(),
    )


def transport_diffusion[F: GridField](field: F, u: VectorField, basis: NoiseBasis) -> F:
    """``-L_U X + 1/2 sum_k L_xi_k^2 X``."""
    return -lie(u, field) + 0.5 * double_lie(basis, field)


def scalar_moment_tendency(
    p: int,
    moments: Mapping[int, ScalarField],
    d: Drivers,
    basis: NoiseBasis,
) -> ScalarField:
    """Tendency of the p-th central moment of theta.

    ``-L_U A^p + sum_k (1/2 L^2 A^p + p (L A^(p-1)) (L E) + p(p-1)/2 A^(p-2) (L E)^2)``
    with ``A^1 = 0`` and ``A^0 = 1``, so ``p = 2`` is the variance equation.

    Args:
        p: Moment order, at least 2
        moments: ``{order: A^(order)}`` holding at least orders ``p`` to ``p - 2``
            that are 2 or above
        d: Expectation drivers at the evaluation time
        basis: Noise basis
    """
    rhs = transport_diffusion(moments[p], d.u, basis)
    weight = p * (p - 1) / 2
    for xi, le in zip(basis.xis, d.lie_theta, strict=True):
        square = product(le, le)
        if p == 2:  # noqa: PLR2004
            rhs = rhs + weight * square
            continue
        rhs = rhs + p * product(lie_scalar(xi, moments[p - 1]), le)
        if p > 3:  # noqa: PLR2004
            rhs = rhs + weight * product(moments[p - 2], square)
    return rhs


def dtheta_covariance_tendency(
    dtheta2: Tensor2Field, d: Drivers, basis: NoiseBasis
) -> Tensor2Field:
    rhs = transport_diffusion(dtheta2, d.u, basis)
    for s in d.lie_dtheta:
        rhs = rhs + outer(s, s)
    return rhs


def cross_covariance_tendency(
    cross: Tensor2Field,
    dtheta2: Tensor2Field,
    d: Drivers,
    basis: NoiseBasis,
    g: float,
) -> Tensor2Field:
    """``-L_U C + sum_k (1/2 L^2 C + a_k (x) s_k + s_k (x) a_k) - 2 g y dTheta2``."""
    rhs = transport_diffusion(cross, d.u, basis)
    for a, s in zip(d.lie_u, d.lie_dtheta, strict=True):
        rhs = rhs + symmetric_outer(a, s)
    return rhs - 2.0 * g * coordinate_scale(d.y, dtheta2)


def u_covariance_tendency(
    u2: Tensor2Field,
    cross: Tensor2Field,
    d: Drivers,
    basis: NoiseBasis,
    g: float,
) -> Tensor2Field:
    """``-L_U U2 + sum_k (1/2 L^2 U2 + (L E[u]) (x) (L E[u])) - g y Cross``."""
    rhs = transport_diffusion(u2, d.u, basis)
    for a in d.lie_u:
        rhs = rhs + outer(a, a)
    return rhs - g * coordinate_scale(d.y, cross)


def moment_tendency(
    fields: Mapping[str, GridField],
    d: Drivers,
    basis: NoiseBasis,
    g: float,
    frozen: Mapping[str, GridField] | None = None,
) -> FieldMap:
    """Tendencies of every field present in ``fields``.

    Couplings missing from ``fields`` are read from ``frozen``, held fixed over the
    step.
    """
    frozen = frozen or {}

    def get(name: str) -> Any:
        if name in fields:
            return fields[name]
        if name in frozen:
            return frozen[name]
        msg = f"{name} is needed as a coupling but was neither stepped nor given"
        raise ValueError(msg)

    out: FieldMap = {}
    orders = {}
    for name in fields:
        if name == "theta2" or name.startswith("A"):
            p = 2 if name == "theta2" else int(name[1:])
            orders[p] = name
    if orders:
        moments = {p: fields[name] for p, name in orders.items()}
        for p, name in orders.items():
            out[name] = scalar_moment_tendency(
                p, moments, d, basis  # type: ignore[arg-type]
            )
    if "dtheta2" in fields:
        out["dtheta2"] = dtheta_covariance_tendency(
            fields["dtheta2"], d, basis  # type: ignore[arg-type]
        )
    if "cross" in fields:
        out["cross"] = cross_covariance_tendency(
            fields["cross"], get("dtheta2"), d, basis, g  # type: ignore[arg-type]
        )
    if "u2" in fields:
        out["u2"] = u_covariance_tendency(
            fields["u2"], get("cross"), d, basis, g  # type: ignore[arg-type]
        )
    return out


# -- stepping ----------------------------------------------------------------------


def _combine(
    fields: Mapping[str, GridField], k: Mapping[str, GridField], h: float
) -> FieldMap:
    return {name: f + h * k[name] for name, f in fields.items()}


def rk4_moments(
    fields: Mapping[str, GridField],
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    g: float,
    dt: float,
    t: float,
    *,
    frozen: Mapping[str, GridField] | None = None,
) -> FieldMap:
    """One classical RK4 step of the named moment fields from ``t`` to ``t + dt``.

    Raises:
        TrajectoryExhaustedError: If the trajectory does not cover ``[t, t + dt]``.
        InstabilityError: On non-finite values or growth beyond 1e6.
    """
    drivers: Callable[[float], Drivers] = functools.cache(
        lambda s: drivers_at(traj, basis, s)
    )

    def rhs(y: Mapping[str, GridField], s: float) -> FieldMap:
        return moment_tendency(y, drivers(s), basis, g, frozen)

    k1 = rhs(fields, t)
    k2 = rhs(_combine(fields, k1, 0.5 * dt), t + 0.5 * dt)
    k3 = rhs(_combine(fields, k2, 0.5 * dt), t + 0.5 * dt)
    k4 = rhs(_combine(fields, k3, dt), t + dt)
    new = {
        name: f + dt / 6.0 * (k1[name] + 2.0 * k2[name] + 2.0 * k3[name] + k4[name])
        for name, f in fields.items()
    }
    step = round((t + dt - traj.t_start) / traj.dt)
    for name in fields:
        _check_growth(name, fields[name], new[name], step)
    return new


def _check_growth(name: str, before: GridField, after: GridField, step: int) -> None:
    if not after.is_finite():
        msg = f"Non-finite {name} at step {step}"
        raise InstabilityError(msg, step_index=step, field=name)
    old, new = before.l2_norm(), after.l2_norm()
    if old > 0 and new > GROWTH_LIMIT * old:
        msg = f"{name} grew by {new / old:.3e} in step {step}"
        raise InstabilityError(msg, step_index=step, field=name, growth=new / old)


def step_theta_covariance(
    theta2: ScalarField,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    dt: float,
    t: float,
) -> ScalarField:
    """Advance ``Theta2 = E[theta'^2]`` by one step."""
    new = rk4_moments({"theta2": theta2}, traj, basis, 0.0, dt, t)
    return new["theta2"]  # type: ignore[return-value]


def step_dtheta_covariance(
    dtheta2: Tensor2Field,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    dt: float,
    t: float,
) -> Tensor2Field:
    new = rk4_moments({"dtheta2": dtheta2}, traj, basis, 0.0, dt, t)
    return new["dtheta2"]  # type: ignore[return-value]


def step_cross_covariance(
    cross: Tensor2Field,
    dtheta2: Tensor2Field,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    g: float,
    dt: float,
    t: float,
) -> Tensor2Field:
    """Advance the cross covariance, co-evolving ``dTheta2`` over the step."""
    fields: FieldMap = {"dtheta2": dtheta2, "cross": cross}
    new = rk4_moments(fields, traj, basis, g, dt, t)
    return new["cross"]  # type: ignore[return-value]


def step_u_covariance(
    u2: Tensor2Field,
    cross: Tensor2Field,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    g: float,
    dt: float,
    t: float,
    *,
    dtheta2: Tensor2Field | None = None,
) -> Tensor2Field:
    """Advance ``U2 = E[u' (x) u']``.

    With ``dtheta2`` the cross covariance is co-evolved over the step, without it
    it is held at its start value.
    """
    fields: FieldMap = {"u2": u2, "cross": cross}
    if dtheta2 is not None:
        fields["dtheta2"] = dtheta2
        new = rk4_moments(fields, traj, basis, g, dt, t)
        return new["u2"]  # type: ignore[return-value]
    new = rk4_moments({"u2": u2}, traj, basis, g, dt, t, frozen={"cross": cross})
    return new["u2"]  # type: ignore[return-value]


def step_pth_moment(
    ap: Sequence[ScalarField],
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    p: int,
    dt: float,
    t: float,
) -> ScalarField:
    """Advance ``A^(p)``, co-evolving the lower orders it depends on.

    Args:
        ap: ``[A^(2), ..., A^(p)]``
        traj: Expectation trajectory
        basis: Noise basis
        p: Order, at least 2
        dt: Step size
        t: Current time
    """
    if p < 2 or len(ap) < p - 1:  # noqa: PLR2004
        msg = f"Order {p} needs the moments of orders 2..{p}, got {len(ap)} fields"
        raise ValueError(msg)
    fields: FieldMap = {_order_key(q): ap[q - 2] for q in range(2, p + 1)}
    new = rk4_moments(fields, traj, basis, 0.0, dt, t)
    return new[_order_key(p)]  # type: ignore[return-value]


def step_moments(
    state: MomentState,
    traj: ExpectationTrajectory,
    basis: NoiseBasis,
    g: float,
    dt: float,
) -> MomentState:
    """Advance every moment field in lockstep."""
    new = rk4_moments(state.as_map(), traj, basis, g, dt, state.t)
    return MomentState.from_map(new, state.t + dt, state.step + 1)


# -- diagnostics -------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PositivityReport:
    """Extremes of the even moments and the Cauchy-Schwarz gap ``A4 - A2^2``."""

    t: float
    min_a2: float
    argmin_a2: tuple[int, int]
    max_a2: float
    min_a4: float | None = None
    argmin_a4: tuple[int, int] | None = None
    min_gap: float | None = None
    """Minimum of ``A4 - A2^2``."""
    argmin_gap: tuple[int, int] | None = None

    @property
    def ok(self) -> bool:
        floor = -POSITIVITY_RTOL * max(self.max_a2, 1e-300)
        checks = [self.min_a2 >= floor]
        if self.min_a4 is not None:
            checks.append(self.min_a4 >= floor)
        if self.min_gap is not None:
            checks.append(self.min_gap >= floor * max(self.max_a2, 1.0))
        return all(checks)

    def as_dict(self) -> dict[str, Any]:
        return {**dataclasses.asdict(self), "ok": self.ok}


def _argmin(values: np.ndarray) -> tuple[float, tuple[int, int]]:
    j, i = np.unravel_index(int(np.argmin(values)), values.shape)
    return float(values[j, i]), (int(j), int(i))


def even_moment_positivity_check(
    ap: Sequence[ScalarField], t: float = 0.0
) -> PositivityReport:
    """Minimum and location of ``A^(2)``, ``A^(4)`` and of ``A^(4) - (A^(2))^2``.

    Args:
        ap: ``[A^(2), A^(3), ...]``
        t: Time stamp of the report
    """
    a2 = ap[0].values
    min_a2, at_a2 = _argmin(a2)
    kwargs: dict[str, Any] = {}
    if len(ap) >= 3:  # noqa: PLR2004
        a4 = ap[2].values
        kwargs["min_a4"], kwargs["argmin_a4"] = _argmin(a4)
        kwargs["min_gap"], kwargs["argmin_gap"] = _argmin(a4 - a2**2)
    report = PositivityReport(t, min_a2, at_a2, float(np.max(a2)), **kwargs)
    if not report.ok:
        logger.warning("Even-moment positivity violated at t=%.4f: %s", t, report)
    return report


@dataclasses.dataclass
class L2Identity:
    """Running sides of the variance energy identity.

    ``|Theta2(t)|^2 + 1/2 int_0^t |grad Theta2|^2 ds`` against
    ``int_0^t |grad E[theta]|^2 ds``, both accumulated by the trapezoid rule. They
    coincide only for the canonical basis with an incompressible mean flow.
    """

    lhs_integral: float = 0.0
    rhs_integral: float = 0.0
    _last: tuple[float, float, float] | None = None
    rows: list[dict[str, Any]] = dataclasses.field(default_factory=list)

    def update(self, t: float, theta2: ScalarField, theta: ScalarField) -> None:
        grad2 = gridmod.gradient(theta2).l2_norm() ** 2
        grad_mean = gridmod.gradient(theta).l2_norm() ** 2
        if self._last is not None:
            t0, g0, m0 = self._last
            self.lhs_integral += 0.5 * (t - t0) * (g0 + grad2)
            self.rhs_integral += 0.5 * (t - t0) * (m0 + grad_mean)
        self._last = (t, grad2, grad_mean)
        lhs = theta2.l2_norm() ** 2 + 0.5 * self.lhs_integral
        self.rows.append({"t": t, "lhs": lhs, "rhs": self.rhs_integral})


# -- driver ------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class MomentTrajectory:
    """Moment fields at the expectation trajectory's snapshot times."""

    states: list[MomentState]
    diagnostics: list[dict[str, Any]]
    identity_rows: list[dict[str, Any]]
    positivity: list[PositivityReport]
    seam_ratios: list[float]

    def __repr__(self) -> str:
        return utils.get_repr(self, snapshots=len(self.states))

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self) -> MomentState:
        return self.states[-1]

    def at_time(self, t: float) -> MomentState:
        for s in self.states:
            if math.isclose(s.t, t, rel_tol=1e-9, abs_tol=1e-12):
                return s
        msg = f"No moment snapshot at t={t}"
        raise KeyError(msg)

    def save(
        self, directory: str | os.PathLike[str], *, force: bool = False
    ) -> dict[str, str]:
        """Write LSF1 series per field, ``diagnostics.csv`` and ``l2_identity.csv``."""
        root = snapshots.prepare_directory(directory, force=force)
        steps = [s.step for s in self.states]
        times = [s.t for s in self.states]
        hashes: dict[str, str] = {}
        for name in self.states[0].as_map():
            fields = [s.as_map()[name] for s in self.states]
            hashes |= snapshots.write_series(root, name, fields, steps, times)
        snapshots.write_csv(
            root / "diagnostics.csv", self.diagnostics, DIAGNOSTIC_COLUMNS
        )
        snapshots.write_csv(
            root / "l2_identity.csv", self.identity_rows, ("t", "lhs", "rhs")
        )
        logger.info("Wrote %d moment snapshots to %s", len(self), root)
        return hashes


DIAGNOSTIC_COLUMNS = ("t", "field", "l2", "min", "max", "aux")


def initial_moments(config: RunConfig, max_order: int | None = None) -> MomentState:
    grid = config.grid.to_grid()
    init = config.initial.moments
    base = config.base_dir
    p_max = config.ensemble.moments_P if max_order is None else max_order
    theta2 = runconfig.scalar_from_spec(init.theta2, grid, base_dir=base)
    higher = tuple(ScalarField.zeros(grid) for _ in range(3, p_max + 1))
    return MomentState(
        theta2=theta2,
        dtheta2=_symmetric(runconfig.tensor_from_spec(init.dtheta2, grid, base_dir=base)),
        cross=_symmetric(runconfig.tensor_from_spec(init.cross, grid, base_dir=base)),
        u2=_symmetric(runconfig.tensor_from_spec(init.u2, grid, base_dir=base)),
        higher=higher,
    )


def _symmetric(t: Tensor2Field) -> Tensor2Field:
    return Tensor2Field(t.values, t.grid, symmetric=t.asymmetry() == 0)


def _trace(t: Tensor2Field) -> ScalarField:
    return ScalarField(t.values[..., 0, 0, :, :] + t.values[..., 1, 1, :, :], t.grid)


def _rows(state: MomentState) -> list[dict[str, Any]]:
    rows = [
        snapshots.field_rows(state.t, name, f)
        for name, f in state.as_map().items()
    ]
    for name in ("dtheta2", "cross", "u2"):
        tensor: Tensor2Field = getattr(state, name)
        rows.append(
            {"t": state.t, "field": f"{name}_asymmetry", "aux": tensor.asymmetry()}
        )
    return rows


def run_moments(
    config: RunConfig,
    traj: ExpectationTrajectory,
    *,
    max_order: int | None = None,
) -> MomentTrajectory:
    """Integrate every moment equation over the trajectory's time span.

    Snapshots are kept at the trajectory's snapshot times so they line up with
    ensemble statistics.

    Raises:
        InstabilityError: On blow-up of any moment field.
        TrajectoryExhaustedError: If the trajectory ends early.
    """
    grid = traj.grid
    basis = build_noise_basis(config.noise, grid)
    g = traj.g
    state = dataclasses.replace(initial_moments(config, max_order), t=traj.t_start)
    identity = L2Identity()
    states: list[MomentState] = []
    diagnostics: list[dict[str, Any]] = []
    positivity: list[PositivityReport] = []
    ratios: list[float] = []
    n_steps = round((traj.t_end - traj.t_start) / traj.dt)

    def archive(s: MomentState) -> None:
        states.append(s)
        diagnostics.extend(_rows(s))
        positivity.append(even_moment_positivity_check(s.ap, s.t))
        # the y-weighted couplings are only meaningful away from the seam
        ratios.append(seam_ratio(_trace(s.dtheta2)))

    logger.info("Moment run: %d steps up to order %d", n_steps, state.max_order)
    with utils.log_duration("Moment solve"):
        identity.update(state.t, state.theta2, traj.theta_at(state.t))
        archive(state)
        for _ in range(n_steps):
            state = step_moments(state, traj, basis, g, traj.dt)
            identity.update(state.t, state.theta2, traj.theta_at(state.t))
            if state.step % traj.save_every == 0:
                archive(state)
    check_seam(_trace(states[-1].dtheta2))
    last = identity.rows[-1]
    logger.info(
        "L2 identity at t=%.4f: lhs=%.6e rhs=%.6e", last["t"], last["lhs"], last["rhs"]
    )
    return MomentTrajectory(states, diagnostics, identity.rows, positivity, ratios)
