"""Acceptance ladder: oracle and closure checks at desk scale.

Every check returns a `Criterion`; `run_verify` runs them in a fixed order and
collects a `VerifySummary` whose JSON form contains no timings, so two runs of the
same configuration produce identical files whatever the thread count.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import TYPE_CHECKING, Any, Self

import numpy as np

from lasalt import (
    characteristics,
    grid as gridmod,
    moments,
    montecarlo,
    reporting,
    serialization,
    snapshots,
    spde,
    utils,
)
from lasalt.errors import EllipticityViolationError, NumericalError
from lasalt.expectation import ExpectationState, run_expectation, step_expectation
from lasalt.fields import ScalarField, VectorField, double_lie
from lasalt.grid import TorusGrid
from lasalt.noise import build_noise_basis, canonical, parse_noise_spec, sample_path


if TYPE_CHECKING:
    import os
    from collections.abc import Callable

    from lasalt.expectation import ExpectationTrajectory
    from lasalt.runconfig import RunConfig


logger = logging.getLogger(__name__)

DEFAULT_EPS = 0.1
SQRT2 = math.sqrt(2.0)


@dataclasses.dataclass(frozen=True)
class Ladder:
    """Scales of the acceptance runs."""

    heat_n: int = 64
    heat_t: float = 0.1
    zero_noise_steps: int = 100
    mean_members: int = 200
    mean_t: float = 0.25
    covariance_members: int = 800
    covariance_t: float = 0.25
    tensor_members: int = 800
    tensor_t: float = 0.1
    moment_members: int = 1600
    moment_t: float = 0.1
    characteristics_n: int = 64
    characteristics_t: float = 0.1
    refinement_t: float = 0.05
    refinements: int = 3
    determinism_members: int = 40
    determinism_t: float = 0.05

    @classmethod
    def quick(cls) -> Self:
        """A few seconds per criterion; verdicts of the statistical checks are loose."""
        return cls(
            heat_n=32,
            heat_t=0.02,
            zero_noise_steps=20,
            mean_members=40,
            mean_t=0.02,
            covariance_members=40,
            covariance_t=0.02,
            tensor_members=40,
            tensor_t=0.02,
            moment_members=40,
            moment_t=0.02,
            characteristics_n=32,
            characteristics_t=0.02,
            refinement_t=0.01,
            refinements=2,
            determinism_members=8,
            determinism_t=0.01,
        )


@dataclasses.dataclass(frozen=True)
class Criterion:
    id: str
    passed: bool
    value: float | None
    """Measured quantity (error, ratio or fraction)."""
    threshold: float | None
    note: str = ""

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class VerifySummary:
    config_hash: str
    grid_n: int
    dt: float
    criteria: tuple[Criterion, ...]
    skipped: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.skipped and all(c.passed for c in self.criteria)

    @property
    def failed(self) -> list[str]:
        return [c.id for c in self.criteria if not c.passed]

    def __getitem__(self, cid: str) -> Criterion:
        for c in self.criteria:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def as_dict(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "grid_n": self.grid_n,
            "dt": self.dt,
            "passed": self.passed,
            "failed": self.failed,
            "skipped": list(self.skipped),
            "criteria": [c.as_dict() for c in self.criteria],
        }

    def save(self, directory: str | os.PathLike[str], *, force: bool = False) -> None:
        """Write ``verify.json`` and the rendered ``verify.md``."""
        root = snapshots.prepare_directory(directory, force=force)
        summary = self.as_dict()
        serialization.dump_file(summary, root / "verify.json")
        reporting.write_text(reporting.render_verify_report(summary), root / "verify.md")


# -- helpers -----------------------------------------------------------------------


def band_limited_field(
    grid: TorusGrid, seed: int, kmax: int | None = None
) -> ScalarField:
    """Random field whose modes satisfy ``|k| <= kmax`` (default n/6)."""
    kmax = grid.n // 6 if kmax is None else kmax
    rng = np.random.Generator(np.random.Philox(seed))
    mask = grid.index_x**2 + grid.index_y**2 <= kmax**2
    coeffs = gridmod.to_spectral(rng.standard_normal(grid.shape)) * mask
    return ScalarField(gridmod.to_physical(coeffs, grid), grid)


def canonical_eps(config: RunConfig) -> float:
    """``eps`` of a ``canonical(eps)`` noise config, `DEFAULT_EPS` otherwise."""
    call = utils.parse_call(config.noise.preset or "")
    if call is not None and call[0] == "canonical" and call[1][0] > 0:
        return call[1][0]
    return DEFAULT_EPS


def with_span(config: RunConfig, t_end: float) -> RunConfig:
    """Same run up to ``t_end``, keeping the snapshot stride compatible."""
    n_steps = round(t_end / config.solver.dt)
    save_every = math.gcd(config.solver.save_every, n_steps)
    cfg = config.with_solver(t_end=n_steps * config.solver.dt, save_every=save_every)
    cfg.validate()
    return cfg


def anomaly_data(config: RunConfig) -> str:
    """Mean-free buoyancy for the tensor closures.

    A ``theta_blob`` preset keeps its parameters, anything else becomes a centred
    blob.
    """
    call = utils.parse_call(config.initial.theta)
    if call is not None and call[0] in ("theta_blob", "blob_anomaly"):
        args = ", ".join(repr(a) for a in call[1])
    else:
        c = config.grid.length / 2
        args = f"{c!r}, {c!r}, 0.6, 1.0"
    return f"blob_anomaly({args})"


def _drift_per_time(
    before: ScalarField, after: ScalarField, elapsed: float
) -> float:
    scale = before.grid.area * max(float(np.max(np.abs(before.values))), 1e-300)
    change = abs(float(gridmod.integral(after)) - float(gridmod.integral(before)))
    return change / scale / elapsed


class _Runs:
    """Memoised expectation trajectories of one verify session."""

    def __init__(self, preloaded: ExpectationTrajectory | None = None) -> None:
        self._cache: dict[str, ExpectationTrajectory] = {}
        if preloaded is not None:
            self._cache[preloaded.config_hash] = preloaded

    def trajectory(self, config: RunConfig) -> ExpectationTrajectory:
        key = config.config_hash
        if key not in self._cache:
            self._cache[key] = run_expectation(config)
        return self._cache[key]


# -- criteria ----------------------------------------------------------------------


def check_ellipticity(config: RunConfig) -> Criterion:
    basis = build_noise_basis(config.noise, config.grid.to_grid())
    try:
        basis.require_elliptic()
    except EllipticityViolationError as e:
        note = f"EllipticityViolation: {e}"
        return Criterion("E-1", False, basis.lambda_min, 0.0, note)
    return Criterion("E-1", True, basis.lambda_min, 0.0, "lambda_min > 0")


def check_operator_reduction(config: RunConfig) -> Criterion:
    eps = canonical_eps(config)
    grid = config.grid.to_grid()
    basis = build_noise_basis(canonical(eps), grid)
    f = band_limited_field(grid, config.ensemble.seed)
    err = gridmod.relative_l2(double_lie(basis, f), eps**2 * gridmod.laplacian(f))
    return Criterion("A-1", err <= 1e-10, err, 1e-10, f"eps={eps}")  # noqa: PLR2004


def check_heat_kernel(config: RunConfig, ladder: Ladder) -> Criterion:
    eps = canonical_eps(config)
    grid = TorusGrid(ladder.heat_n, config.grid.length, config.grid.dealias_fraction)
    basis = build_noise_basis(canonical(eps), grid)
    theta0 = band_limited_field(grid, config.ensemble.seed)
    dt = config.solver.dt
    n_steps = round(ladder.heat_t / dt)
    state = ExpectationState(ScalarField.zeros(grid), theta0)
    frozen = VectorField.zeros(grid)
    for _ in range(n_steps):
        state = step_expectation(
            state, basis, config.physics.g, dt, frozen_velocity=frozen
        )
    decay = np.exp(-0.5 * eps**2 * grid.k_squared * n_steps * dt)
    exact = gridmod.to_physical(gridmod.to_spectral(theta0.values) * decay, grid)
    err = gridmod.relative_l2(state.theta, ScalarField(exact, grid))
    note = f"n={grid.n}, t={n_steps * dt}"
    return Criterion("A-2", err <= 1e-6, err, 1e-6, note)  # noqa: PLR2004


def check_zero_noise(config: RunConfig, ladder: Ladder, runs: _Runs) -> Criterion:
    """Members driven by different increments coincide with the zero-increment run."""
    zero = dataclasses.replace(
        config, noise=parse_noise_spec([{"const": [0.0, 0.0]}])
    ).with_solver(require_parabolic=False)
    cfg = with_span(zero, ladder.zero_noise_steps * config.solver.dt)
    traj = runs.trajectory(cfg)
    basis = build_noise_basis(cfg.noise, traj.grid)
    n_steps = cfg.solver.n_steps
    g = cfg.physics.g
    reference = spde.run_member(
        spde.initial_state(traj), traj, basis, g, np.zeros((len(basis), n_steps))
    )
    errors = []
    for member in (0, 1):
        path = sample_path(cfg.ensemble.seed, member, n_steps, traj.dt, basis)
        out = spde.run_member(spde.initial_state(traj), traj, basis, g, path.increments)
        errors.append(gridmod.relative_l2(out.theta, reference.theta))
        errors.append(gridmod.relative_l2(out.omega, reference.omega))
    err = max(errors)
    gap = gridmod.relative_l2(reference.theta, traj.states[-1].theta)
    note = f"{n_steps} steps, Heun vs RK4 expectation gap {gap:.3e}"
    return Criterion("A-3", err <= 1e-8, err, 1e-8, note)  # noqa: PLR2004


def check_mean_consistency(
    config: RunConfig, ladder: Ladder, runs: _Runs, threads: int
) -> Criterion:
    cfg = with_span(config, ladder.mean_t).with_solver(scheme="ito")
    cfg = cfg.with_ensemble(members=ladder.mean_members)
    traj = runs.trajectory(cfg)
    stats = montecarlo.run_ensemble(cfg, traj, threads=threads)
    fraction = montecarlo.mean_consistency(stats, traj.states[-1].theta)
    note = f"M={stats.count}, t={stats.t:.3f}, Itô scheme"
    return Criterion("A-4", fraction >= 0.95, fraction, 0.95, note)  # noqa: PLR2004


def _closure(
    cid: str,
    cfg: RunConfig,
    runs: _Runs,
    threads: int,
    *,
    max_order: int,
    names: tuple[str, ...],
    tolerance: float,
) -> Criterion:
    traj = runs.trajectory(cfg)
    solution = moments.run_moments(cfg, traj, max_order=max_order)
    stats = montecarlo.run_ensemble(cfg, traj, threads=threads)
    report = montecarlo.closure_compare(
        stats, solution.final, tolerance=tolerance, names=names
    )
    worst = max(report.quantities, key=lambda q: q.rel_error / q.threshold)
    note = ", ".join(
        f"{q.name}: {q.rel_error:.3e}/{q.threshold:.3e}" for q in report.quantities
    )
    return Criterion(
        cid, report.passed, worst.rel_error, worst.threshold, f"M={stats.count}; {note}"
    )


def check_covariance_closure(
    config: RunConfig, ladder: Ladder, runs: _Runs, threads: int
) -> Criterion:
    cfg = with_span(config, ladder.covariance_t)
    cfg = cfg.with_ensemble(members=ladder.covariance_members)
    return _closure(
        "A-5", cfg, runs, threads, max_order=2, names=("theta2",), tolerance=0.05
    )


def check_tensor_closure(
    config: RunConfig, ladder: Ladder, runs: _Runs, threads: int
) -> Criterion:
    initial = dataclasses.replace(config.initial, theta=anomaly_data(config))
    cfg = dataclasses.replace(config, initial=initial)
    cfg = with_span(cfg, ladder.tensor_t).with_solver(enable_u_equation=True)
    cfg = cfg.with_ensemble(members=ladder.tensor_members)
    return _closure(
        "A-6",
        cfg,
        runs,
        threads,
        max_order=2,
        names=montecarlo.TENSOR_NAMES,
        tolerance=0.10,
    )


def check_pth_moments(
    config: RunConfig, ladder: Ladder, runs: _Runs, threads: int
) -> Criterion:
    cfg = with_span(config, ladder.moment_t)
    cfg = cfg.with_ensemble(
        members=ladder.moment_members, moments_P=max(config.ensemble.moments_P, 4)
    )
    return _closure(
        "A-7", cfg, runs, threads, max_order=4, names=("A3", "A4"), tolerance=0.10
    )


def check_characteristics(config: RunConfig, ladder: Ladder, runs: _Runs) -> Criterion:
    cfg = with_span(config.with_grid(ladder.characteristics_n), ladder.characteristics_t)
    traj = runs.trajectory(cfg)
    basis = build_noise_basis(cfg.noise, traj.grid)
    n_steps = cfg.solver.n_steps
    path = sample_path(cfg.ensemble.seed, 0, n_steps, traj.dt, basis)
    member = spde.run_member(
        spde.initial_state(traj), traj, basis, cfg.physics.g, path.increments
    )
    inverse = characteristics.integrate_flow(
        traj, basis, path.increments, traj.t_start, traj.t_end, "inverse"
    )
    pulled = characteristics.theta_by_pullback(traj.states[0].theta, inverse)
    err = gridmod.relative_l2(pulled, member.theta)
    note = f"n={traj.grid.n}, t={traj.t_end:.3f}"
    return Criterion("A-8", err <= 0.02, err, 0.02, note)  # noqa: PLR2004


def strat_ito_gaps(config: RunConfig, t_end: float, refinements: int) -> list[float]:
    """Final-time gap between the two steppers on one path, for ``dt / 2^i``."""
    finest = 2**refinements
    fine_dt = config.solver.dt / finest
    grid = config.grid.to_grid()
    basis = build_noise_basis(config.noise, grid)
    n_fine = round(t_end / fine_dt)
    path = sample_path(config.ensemble.seed, 0, n_fine, fine_dt, basis)
    gaps = []
    for i in range(refinements + 1):
        factor = 2**i
        cfg = config.with_solver(dt=config.solver.dt / factor, save_every=1)
        cfg = cfg.with_solver(t_end=t_end)
        traj = run_expectation(cfg)
        increments = path.coarsen(finest // factor).increments
        finals = [
            spde.run_member(
                spde.initial_state(traj), traj, basis, cfg.physics.g, increments,
                scheme=scheme,
            ).theta
            for scheme in ("strat", "ito")
        ]
        gaps.append(gridmod.relative_l2(finals[1], finals[0]))
        logger.debug("dt=%.3e strat/Itô gap %.3e", cfg.solver.dt, gaps[-1])
    return gaps


def check_strat_ito(config: RunConfig, ladder: Ladder) -> Criterion:
    gaps = strat_ito_gaps(config, ladder.refinement_t, ladder.refinements)
    ratios = [a / b if b > 0 else math.inf for a, b in zip(gaps, gaps[1:])]
    dts = [config.solver.dt / 2**i for i in range(len(gaps))]
    # fitted order is reported only, every halving must shrink the gap by sqrt 2
    order = float(np.polyfit(np.log(dts), np.log(np.maximum(gaps, 1e-300)), 1)[0])
    passed = all(r >= SQRT2 for r in ratios)
    note = f"order {order:.3f}, gaps " + ", ".join(f"{g:.3e}" for g in gaps)
    return Criterion("A-9", passed, min(ratios), SQRT2, note)


def check_conservation(config: RunConfig, runs: _Runs) -> Criterion:
    traj = runs.trajectory(config)
    basis = build_noise_basis(config.noise, traj.grid)
    elapsed = traj.t_end - traj.t_start
    drifts = []
    notes = []
    if basis.divergence_free:
        n_steps = round(elapsed / traj.dt)
        path = sample_path(config.ensemble.seed, 0, n_steps, traj.dt, basis)
        member = spde.run_member(
            spde.initial_state(traj), traj, basis, config.physics.g, path.increments
        )
        drifts.append(_drift_per_time(traj.states[0].theta, member.theta, elapsed))
        notes.append(f"pathwise {drifts[-1]:.3e}")
    if basis.constant:
        drift = _drift_per_time(traj.states[0].theta, traj.states[-1].theta, elapsed)
        drifts.append(drift)
        notes.append(f"expectation {drift:.3e}")
    if not drifts:
        note = "noise neither divergence-free nor constant"
        return Criterion("A-10", True, None, 1e-10, note)
    worst = max(drifts)
    passed = worst <= 1e-10  # noqa: PLR2004
    return Criterion("A-10", passed, worst, 1e-10, ", ".join(notes))


def check_ellipticity_gate(config: RunConfig) -> Criterion:
    grid = config.grid.to_grid()
    degenerate = build_noise_basis([{"const": [1.0, 0.0]}], grid)
    state = ExpectationState(ScalarField.zeros(grid), ScalarField.zeros(grid))
    try:
        step_expectation(state, degenerate, config.physics.g, config.solver.dt)
    except EllipticityViolationError:
        gated = True
    else:
        gated = False
    eps = canonical_eps(config)
    lam = build_noise_basis(canonical(eps), grid).lambda_min
    err = abs(lam - eps**2) / eps**2
    passed = gated and err <= 1e-12  # noqa: PLR2004
    note = f"degenerate basis {'refused' if gated else 'accepted'}, lambda_min={lam!r}"
    return Criterion("A-11", passed, err, 1e-12, note)


def ensemble_fingerprint(stats: montecarlo.EnsembleStats) -> str:
    data = b"".join(
        np.ascontiguousarray(stats.estimate(name).values).tobytes()
        for name in stats.names
    )
    return utils.get_hash(data + stats.mean_theta().values.tobytes(), hash_length=None)


def check_determinism(
    config: RunConfig, ladder: Ladder, runs: _Runs, threads: int
) -> Criterion:
    cfg = with_span(config, ladder.determinism_t)
    shard = max(1, ladder.determinism_members // 4)
    cfg = cfg.with_ensemble(members=ladder.determinism_members, shard_size=shard)
    traj = runs.trajectory(cfg)
    prints = [
        ensemble_fingerprint(montecarlo.run_ensemble(cfg, traj, threads=k))
        for k in (1, max(threads, 2))
    ]
    same = prints[0] == prints[1]
    note = f"threads 1 vs {max(threads, 2)}: {prints[0][:12]} / {prints[1][:12]}"
    return Criterion("A-12", same, 0.0 if same else 1.0, 0.0, note)


# -- driver ------------------------------------------------------------------------


def ladder_checks(
    ladder: Ladder, runs: _Runs, threads: int
) -> dict[str, Callable[[RunConfig], Criterion]]:
    return {
        "A-1": check_operator_reduction,
        "A-2": lambda c: check_heat_kernel(c, ladder),
        "A-3": lambda c: check_zero_noise(c, ladder, runs),
        "A-4": lambda c: check_mean_consistency(c, ladder, runs, threads),
        "A-5": lambda c: check_covariance_closure(c, ladder, runs, threads),
        "A-6": lambda c: check_tensor_closure(c, ladder, runs, threads),
        "A-7": lambda c: check_pth_moments(c, ladder, runs, threads),
        "A-8": lambda c: check_characteristics(c, ladder, runs),
        "A-9": lambda c: check_strat_ito(c, ladder),
        "A-10": lambda c: check_conservation(c, runs),
        "A-11": check_ellipticity_gate,
        "A-12": lambda c: check_determinism(c, ladder, runs, threads),
    }


def run_verify(
    config: RunConfig,
    *,
    threads: int = 1,
    ladder: Ladder | None = None,
    only: list[str] | None = None,
    trajectory: ExpectationTrajectory | None = None,
) -> VerifySummary:
    """Run E-1 and the A-criteria.

    A failing E-1 stops the ladder; the remaining criteria are listed as skipped.
    A numerical error inside a check fails that criterion only.

    Args:
        config: Base configuration, normally the packaged desk config
        threads: Worker threads of the ensemble runs
        ladder: Run scales (the full desk scales by default)
        only: Restrict to these criterion ids (E-1 always runs)
        trajectory: Precomputed expectation trajectory of ``config``
    """
    ladder = ladder or Ladder()
    runs = _Runs(trajectory)
    checks = ladder_checks(ladder, runs, threads)
    wanted = [cid for cid in checks if only is None or cid in only]
    criteria = [check_ellipticity(config)]
    logger.info("E-1: %s", reporting.verdict(criteria[0].passed))
    if not criteria[0].passed:
        return VerifySummary(
            config.config_hash,
            config.grid.n,
            config.solver.dt,
            tuple(criteria),
            tuple(wanted),
        )
    for cid in wanted:
        with utils.log_duration(cid):
            try:
                result = checks[cid](config)
            except NumericalError as e:
                logger.exception("%s raised", cid)
                result = Criterion(cid, False, None, None, f"{type(e).__name__}: {e}")
        logger.info("%s: %s (%s)", cid, reporting.verdict(result.passed), result.note)
        criteria.append(result)
    return VerifySummary(
        config.config_hash, config.grid.n, config.solver.dt, tuple(criteria)
    )


if __name__ == "__main__":
    from lasalt.runconfig import desk_config

    logging.basicConfig(level=logging.INFO)
    print(run_verify(desk_config(), ladder=Ladder.quick(), only=["A-1", "A-2"]).as_dict())
