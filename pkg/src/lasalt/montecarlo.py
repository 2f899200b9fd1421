"""Ensemble runs and streaming statistics of the stochastic members.

Members are advanced in shards of ``shard_size`` along a batch axis. Every shard
reduces its members to pointwise accumulators right away, and shards are merged
in shard order, so the thread count never changes a result.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import functools
import logging
import math
from typing import TYPE_CHECKING, Any, Self

import numpy as np
import upath

from lasalt import grid as gridmod, serialization, snapshots, spde, utils
from lasalt.errors import (
    ConfigMismatchError,
    GridMismatchError,
    HashMismatchError,
    MemberFailedError,
    NumericalError,
    TimeMisalignedError,
)
from lasalt.fields import ScalarField, Tensor2Field, exterior_d
from lasalt.moments import MomentState
from lasalt.noise import build_noise_basis, sample_paths


if TYPE_CHECKING:
    import os
    from collections.abc import Sequence

    from lasalt.expectation import ExpectationTrajectory
    from lasalt.grid import TorusGrid
    from lasalt.runconfig import RunConfig


logger = logging.getLogger(__name__)

TIME_ATOL = 1e-9
TENSOR_NAMES = ("dtheta2", "cross", "u2")


# -- accumulators ------------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class CentralMoments:
    """Pointwise sums of powered deviations ``M_p = sum (x - mean)^p``, p = 2..order.

    Batches are reduced exactly (two passes over the batch) and combined with the
    pairwise update of Pébay, which is exact for any split of the samples.
    """

    order: int
    count: int = 0
    mean: np.ndarray | None = None
    sums: tuple[np.ndarray, ...] = ()
    """``M_2 .. M_order``."""

    def __repr__(self) -> str:
        return utils.get_repr(self, order=self.order, count=self.count)

    @classmethod
    def from_samples(cls, samples: np.ndarray, order: int) -> Self:
        """Accumulate a batch with the samples along axis 0."""
        x = np.asarray(samples, dtype=np.float64)
        if x.shape[0] == 0:
            return cls(order)
        mean = x.mean(axis=0)
        dev = x - mean
        sums = tuple(np.sum(dev**p, axis=0) for p in range(2, order + 1))
        return cls(order, x.shape[0], mean, sums)

    def m(self, p: int) -> np.ndarray:
        return self.sums[p - 2]

    def merge(self, other: CentralMoments) -> CentralMoments:
        if self.order != other.order:
            msg = f"Cannot merge moments of order {self.order} and {other.order}"
            raise ConfigMismatchError(msg)
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        na, nb = self.count, other.count
        n = na + nb
        assert self.mean is not None
        assert other.mean is not None
        delta = other.mean - self.mean
        mean = self.mean + delta * (nb / n)
        sums = []
        for p in range(2, self.order + 1):
            total = self.m(p) + other.m(p)
            for k in range(1, p - 1):
                weight = math.comb(p, k) * delta**k
                total = total + weight * (
                    (-nb / n) ** k * self.m(p - k) + (na / n) ** k * other.m(p - k)
                )
            total = total + (na * nb / n * delta) ** p * (
                1.0 / nb ** (p - 1) - (-1.0 / na) ** (p - 1)
            )
            sums.append(total)
        return CentralMoments(self.order, n, mean, tuple(sums))

    def variance(self, ddof: int = 1) -> np.ndarray:
        return self.m(2) / max(self.count - ddof, 1)

    def central(self, p: int) -> np.ndarray:
        """Population central moment ``M_p / count``."""
        return self.m(p) / self.count


@dataclasses.dataclass(frozen=True, eq=False)
class CoMoments:
    """Pointwise co-moment matrix ``C_ij = sum (x_i - mean_i)(x_j - mean_j)``."""

    count: int = 0
    mean: np.ndarray | None = None
    """Shape ``(c, n, n)``."""
    comoment: np.ndarray | None = None
    """Shape ``(c, c, n, n)``."""

    def __repr__(self) -> str:
        return utils.get_repr(self, count=self.count)

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> Self:
        """Samples of shape ``(members, c, n, n)``."""
        x = np.asarray(samples, dtype=np.float64)
        if x.shape[0] == 0:
            return cls()
        mean = x.mean(axis=0)
        dev = x - mean
        return cls(x.shape[0], mean, np.einsum("bi...,bj...->ij...", dev, dev))

    def merge(self, other: CoMoments) -> CoMoments:
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        assert self.mean is not None
        assert other.mean is not None
        assert self.comoment is not None
        assert other.comoment is not None
        if self.mean.shape != other.mean.shape:
            msg = f"Co-moments of shapes {self.mean.shape} and {other.mean.shape}"
            raise ConfigMismatchError(msg)
        na, nb = self.count, other.count
        n = na + nb
        delta = other.mean - self.mean
        outer = np.einsum("i...,j...->ij...", delta, delta)
        comoment = self.comoment + other.comoment + outer * (na * nb / n)
        return CoMoments(n, self.mean + delta * (nb / n), comoment)

    def covariance(self, ddof: int = 1) -> np.ndarray:
        assert self.comoment is not None
        return self.comoment / max(self.count - ddof, 1)


# -- ensemble statistics -----------------------------------------------------------


def _order_name(p: int) -> str:
    return "theta2" if p == 2 else f"A{p}"  # noqa: PLR2004


def _tensor_estimates(cov: np.ndarray) -> dict[str, np.ndarray]:
    """Split the covariance of ``(d theta', u')`` into the closure tensors."""
    out = {"dtheta2": cov[0:2, 0:2]}
    if cov.shape[0] == 4:  # noqa: PLR2004
        uq = cov[2:4, 0:2]
        out["cross"] = uq + np.swapaxes(uq, 0, 1)
        out["u2"] = cov[2:4, 2:4]
    return out


def _gaussian_moment(sigma2: np.ndarray, k: int) -> np.ndarray:
    """``E[x^k]`` of a centred normal with variance ``sigma2``."""
    if k % 2:
        return np.zeros_like(sigma2)
    return sigma2 ** (k // 2) * float(math.prod(range(k - 1, 0, -2)))


def _moment_variance(theta: CentralMoments, p: int) -> np.ndarray:
    """Delta-method variance of the sample ``p``-th central moment, per sample.

    Orders beyond the tracked ones are taken from a normal with the sample variance.
    """
    sigma2 = theta.central(2)

    def mu(k: int) -> np.ndarray:
        if k == 1:
            return np.zeros_like(sigma2)
        if k <= theta.order:
            return theta.central(k)
        return _gaussian_moment(sigma2, k)

    return (
        mu(2 * p)
        - mu(p) ** 2
        - 2 * p * mu(p - 1) * mu(p + 1)
        + p**2 * sigma2 * mu(p - 1) ** 2
    )


def _tensor_variances(cov: np.ndarray) -> dict[str, np.ndarray]:
    """Normal-theory variance of every covariance-tensor entry, per sample.

    ``var(c_ab) = c_aa c_bb + c_ab^2`` and ``cov(c_ab, c_cd) = c_ac c_bd + c_ad c_bc``.
    """

    def pair(a: int, b: int, c: int, d: int) -> np.ndarray:
        return cov[a, c] * cov[b, d] + cov[a, d] * cov[b, c]

    out = {"dtheta2": np.array([[pair(i, j, i, j) for j in range(2)] for i in range(2)])}
    if cov.shape[0] == 4:  # noqa: PLR2004
        cross = [
            [
                pair(2 + i, j, 2 + i, j)
                + pair(2 + j, i, 2 + j, i)
                + 2 * pair(2 + i, j, 2 + j, i)
                for j in range(2)
            ]
            for i in range(2)
        ]
        out["cross"] = np.array(cross)
        out["u2"] = np.array(
            [[pair(2 + i, 2 + j, 2 + i, 2 + j) for j in range(2)] for i in range(2)]
        )
    return out


@dataclasses.dataclass(frozen=True, eq=False)
class EnsembleStats:
    """Sample statistics of the members at one time level."""

    grid: TorusGrid
    t: float
    step: int
    config_hash: str
    theta: CentralMoments
    """Central moments of theta up to ``moments_P``."""
    pairs: CoMoments
    """Co-moments of ``(d theta', u')``, or of ``d theta'`` alone without u."""
    shards: dict[str, CentralMoments] = dataclasses.field(default_factory=dict)
    """Second-order accumulators over the per-shard estimates (batch means)."""
    members: dict[int, np.ndarray] = dataclasses.field(default_factory=dict)
    """Per-member theta, kept with ``retain_members``."""
    history: tuple[EnsembleStats, ...] = ()
    """Statistics at the earlier report times of the same run."""

    def __repr__(self) -> str:
        return utils.get_repr(self, t=self.t, count=self.count, names=self.names)

    @property
    def count(self) -> int:
        return self.theta.count

    @property
    def n_shards(self) -> int:
        acc = self.shards.get("theta2")
        return acc.count if acc is not None else 0

    @property
    def names(self) -> list[str]:
        scalar = [_order_name(p) for p in range(2, self.theta.order + 1)]
        if self.pairs.mean is None:
            return scalar
        n_comp = self.pairs.mean.shape[0]
        tensors = TENSOR_NAMES if n_comp == 4 else TENSOR_NAMES[:1]  # noqa: PLR2004
        return scalar + list(tensors)

    @classmethod
    def from_members(
        cls,
        state: spde.SpdeState,
        traj: ExpectationTrajectory,
        *,
        order: int,
        config_hash: str,
        retain: bool = False,
    ) -> EnsembleStats:
        """Reduce a batched SPDE state (one shard) to statistics."""
        u_prime, theta_prime = spde.fluctuations(state, traj)
        pieces = [exterior_d(theta_prime).values]
        if u_prime is not None:
            pieces.append(u_prime.values)
        theta = CentralMoments.from_samples(state.theta.values, order)
        pairs = CoMoments.from_samples(np.concatenate(pieces, axis=1))
        stats = cls(
            grid=state.grid,
            t=state.t,
            step=state.step_index,
            config_hash=config_hash,
            theta=theta,
            pairs=pairs,
            members=(
                {m: state.theta.values[i].copy() for i, m in enumerate(state.member_ids)}
                if retain
                else {}
            ),
        )
        estimates = stats._raw_estimates(ddof=0)
        shards = {
            name: CentralMoments.from_samples(value[None], 2)
            for name, value in estimates.items()
        }
        return dataclasses.replace(stats, shards=shards)

    def merge(self, other: EnsembleStats) -> EnsembleStats:
        """Combine the statistics of two disjoint member sets.

        Raises:
            ConfigMismatchError: If config hash, grid, time or tracked quantities differ.
        """
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        same = (
            self.config_hash == other.config_hash
            and self.grid == other.grid
            and math.isclose(self.t, other.t, abs_tol=TIME_ATOL)
            and self.names == other.names
        )
        if not same:
            msg = f"Cannot merge {self!r} with {other!r}"
            raise ConfigMismatchError(msg)
        shards = {
            name: acc.merge(other.shards[name])
            for name, acc in self.shards.items()
            if name in other.shards
        }
        return dataclasses.replace(
            self,
            theta=self.theta.merge(other.theta),
            pairs=self.pairs.merge(other.pairs),
            shards=shards,
            members={**self.members, **other.members},
            history=(),
        )

    def _raw_estimates(self, ddof: int = 1) -> dict[str, np.ndarray]:
        out = {"theta2": self.theta.variance(ddof)}
        for p in range(3, self.theta.order + 1):
            out[_order_name(p)] = self.theta.central(p)
        if self.pairs.count:
            out |= _tensor_estimates(self.pairs.covariance(ddof))
        return out

    def mean_theta(self) -> ScalarField:
        assert self.theta.mean is not None
        return ScalarField(self.theta.mean, self.grid)

    def mean_stderr(self) -> ScalarField:
        """``sqrt(var / M)`` of the sample mean of theta."""
        return ScalarField(np.sqrt(self.theta.variance() / self.count), self.grid)

    def estimate(self, name: str) -> ScalarField | Tensor2Field:
        """Sample estimate of ``theta2``, ``A3`` ..., ``dtheta2``, ``cross`` or ``u2``."""
        values = self._raw_estimates()[name]
        if name in TENSOR_NAMES:
            return Tensor2Field(values, self.grid, symmetric=True)
        return ScalarField(values, self.grid)

    def stderr(self, name: str) -> np.ndarray:
        """Batch-means standard error field of an estimate.

        With fewer than two shards the analytic ``sqrt(var / M)`` of the pooled
        per-node samples is returned instead.
        """
        acc = self.shards[name]
        if acc.count >= 2:  # noqa: PLR2004
            return np.sqrt(acc.variance() / acc.count)
        logger.debug("Single shard, analytic standard error for %s", name)
        if name in TENSOR_NAMES:
            var = _tensor_variances(self.pairs.covariance())[name]
        else:
            p = 2 if name == "theta2" else int(name[1:])
            var = _moment_variance(self.theta, p)
        return np.sqrt(np.maximum(var, 0.0) / self.count)

    def as_moment_state(self) -> MomentState:
        """Estimates packed like a closure solution (for self-comparisons)."""
        est = {name: self.estimate(name) for name in self.names}
        higher = [est[_order_name(p)] for p in range(3, self.theta.order + 1)]
        zeros = Tensor2Field.zeros(self.grid)
        return MomentState(
            theta2=est["theta2"],  # type: ignore[arg-type]
            dtheta2=est.get("dtheta2", zeros),  # type: ignore[arg-type]
            cross=est.get("cross", zeros),  # type: ignore[arg-type]
            u2=est.get("u2", zeros),  # type: ignore[arg-type]
            higher=tuple(higher),  # type: ignore[arg-type]
            t=self.t,
            step=self.step,
        )

    def summary(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "step": self.step,
            "count": self.count,
            "shards": self.n_shards,
            "config_hash": self.config_hash,
            "quantities": self.names,
        }

    def save(self, directory: str | os.PathLike[str], *, force: bool = False) -> None:
        """Write the mean and every estimate as LSF1 plus ``stats.json``."""
        root = snapshots.prepare_directory(directory, force=force)
        fields = {"theta_mean": self.mean_theta()} | {
            name: self.estimate(name) for name in self.names
        }
        hashes = {}
        for name, f in fields.items():
            file_name = snapshots.snapshot_name(name, 0)
            hashes[file_name] = snapshots.write_lsf1(
                root / file_name, f, self.step, self.t
            )
        for m, values in sorted(self.members.items()):
            file_name = snapshots.snapshot_name(f"member{m}_theta", 0)
            hashes[file_name] = snapshots.write_lsf1(
                root / file_name, values, self.step, self.t
            )
        serialization.dump_file(self.summary() | {"files": hashes}, root / "stats.json")
        logger.info("Wrote ensemble statistics (%d members) to %s", self.count, root)


# -- running -----------------------------------------------------------------------


def report_steps(n_steps: int, report_every: int) -> list[int]:
    if report_every <= 0:
        return [n_steps]
    return sorted({*range(report_every, n_steps + 1, report_every), n_steps})


def _failed_member(
    error: Exception, state: spde.SpdeState, member_ids: Sequence[int]
) -> int:
    """Member a failure inside a batched step belongs to.

    Instabilities name their batch position. Other errors are pinned on the first
    member whose last good state is already non-finite, else on the shard's first.
    """
    index = getattr(error, "member_index", None)
    if index is None:
        finite = np.atleast_1d(np.isfinite(state.theta.member_l2()))
        bad = np.flatnonzero(~finite)
        index = int(bad[0]) if bad.size else 0
    return member_ids[index]


def _run_shard(
    member_ids: Sequence[int],
    config: RunConfig,
    traj: ExpectationTrajectory,
    forcing: spde.ForcingCache | None,
    steps: Sequence[int],
) -> list[EnsembleStats]:
    ens = config.ensemble
    basis = build_noise_basis(config.noise, traj.grid)
    n_steps = steps[-1]
    state = spde.initial_state(
        traj, member_ids, enable_u=config.solver.enable_u_equation
    )
    table = sample_paths(ens.seed, member_ids, n_steps, traj.dt, basis)
    wanted = set(steps)
    out = []
    for k in range(n_steps):
        try:
            state = spde.step(
                config.solver.scheme,
                state,
                traj,
                basis,
                traj.g,
                traj.dt,
                table[..., k],
                forcing=forcing,
            )
        except (NumericalError, ArithmeticError) as e:
            member = _failed_member(e, state, member_ids)
            msg = f"Ensemble member {member} failed at step {k}: {type(e).__name__}: {e}"
            raise MemberFailedError(msg, member_id=member, shard=member_ids) from e
        if state.step_index in wanted:
            out.append(
                EnsembleStats.from_members(
                    state,
                    traj,
                    order=ens.moments_P,
                    config_hash=config.config_hash,
                    retain=ens.retain_members and state.step_index == n_steps,
                )
            )
    logger.info("Shard %d..%d done", member_ids[0], member_ids[-1])
    return out


def run_ensemble(
    config: RunConfig,
    traj: ExpectationTrajectory,
    *,
    threads: int = 1,
) -> EnsembleStats:
    """Run ``ensemble.members`` SPDE members over the trajectory's time span.

    Args:
        config: Run configuration (members, seed, shard size, scheme ...)
        traj: Expectation trajectory computed for the same config
        threads: Worker threads; shards are merged in a fixed order regardless

    Raises:
        HashMismatchError: If the trajectory was computed for another config.
        MemberFailedError: If any member blows up, carrying its ``member_id``.
    """
    if traj.config_hash and traj.config_hash != config.config_hash:
        msg = (
            f"Trajectory config {traj.config_hash} does not match {config.config_hash}"
        )
        raise HashMismatchError(msg)
    ens = config.ensemble
    n_steps = round((traj.t_end - traj.t_start) / traj.dt)
    steps = report_steps(n_steps, ens.report_every)
    forcing = (
        spde.assemble_forcing(traj, traj.g) if config.solver.enable_u_equation else None
    )
    shards = [
        list(range(start, min(start + ens.shard_size, ens.members)))
        for start in range(0, ens.members, ens.shard_size)
    ]
    logger.info(
        "Ensemble of %d members in %d shards on %d threads",
        ens.members, len(shards), threads,
    )
    work = functools.partial(
        _run_shard, config=config, traj=traj, forcing=forcing, steps=steps
    )
    with (
        utils.log_duration("Ensemble"),
        concurrent.futures.ThreadPoolExecutor(max_workers=max(threads, 1)) as pool,
    ):
        results = list(pool.map(work, shards))
    per_time = [functools.reduce(EnsembleStats.merge, group) for group in zip(*results)]
    return dataclasses.replace(per_time[-1], history=tuple(per_time[:-1]))


# -- closure comparison ------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class QuantityComparison:
    name: str
    rel_error: float
    """Relative L2 distance between the ensemble estimate and the closure field."""
    rel_stderr: float
    """L2 norm of the standard-error field relative to the closure field."""
    tolerance: float
    """Discretisation tolerance floor."""

    @property
    def threshold(self) -> float:
        return max(3.0 * self.rel_stderr, self.tolerance)

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.threshold

    def as_dict(self) -> dict[str, Any]:
        return {
            **dataclasses.asdict(self),
            "threshold": self.threshold,
            "passed": self.passed,
        }


@dataclasses.dataclass(frozen=True)
class ClosureReport:
    """Per-quantity comparison of ensemble statistics with the closed equations."""

    t: float
    members: int
    quantities: tuple[QuantityComparison, ...]

    @property
    def passed(self) -> bool:
        return all(q.passed for q in self.quantities)

    def __getitem__(self, name: str) -> QuantityComparison:
        for q in self.quantities:
            if q.name == name:
                return q
        raise KeyError(name)

    def as_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "members": self.members,
            "passed": self.passed,
            "quantities": {q.name: q.as_dict() for q in self.quantities},
        }

    def rows(self) -> list[dict[str, Any]]:
        return [{"t": self.t, **q.as_dict()} for q in self.quantities]


REPORT_COLUMNS = (
    "t", "name", "rel_error", "rel_stderr", "tolerance", "threshold", "passed"
)


def _norm(values: np.ndarray, grid: TorusGrid) -> float:
    return float(np.sqrt(np.sum(values**2) * grid.cell_area))


def closure_compare(
    stats: EnsembleStats,
    solution: MomentState,
    *,
    tolerance: float = 0.05,
    names: Sequence[str] | None = None,
) -> ClosureReport:
    """Compare ensemble estimates with a closure solution at the same time.

    Args:
        stats: Ensemble statistics
        solution: Moment fields at ``stats.t``
        tolerance: Discretisation floor of every verdict
        names: Quantities to compare (default: all tracked by both)

    Raises:
        TimeMisalignedError: If the two objects are at different times.
        GridMismatchError: If they live on different grids.
    """
    if not math.isclose(stats.t, solution.t, rel_tol=1e-9, abs_tol=TIME_ATOL):
        msg = f"Ensemble at t={stats.t} vs closure at t={solution.t}"
        raise TimeMisalignedError(msg)
    if solution.theta2.grid != stats.grid:
        msg = f"Ensemble on {stats.grid!r}, closure on {solution.theta2.grid!r}"
        raise GridMismatchError(msg)
    reference = {
        _order_name(p): solution.central(p) for p in range(2, solution.max_order + 1)
    } | {name: getattr(solution, name) for name in TENSOR_NAMES}
    wanted = names or [n for n in stats.names if n in reference]
    out = []
    for name in wanted:
        ref = reference[name]
        est = stats.estimate(name)
        ref_norm = ref.l2_norm()
        diff = gridmod.l2_norm(est - ref)
        se = _norm(stats.stderr(name), stats.grid)
        scale = ref_norm if ref_norm > 0 else 1.0
        out.append(QuantityComparison(name, diff / scale, se / scale, tolerance))
        logger.debug("closure %s: %s", name, out[-1].as_dict())
    report = ClosureReport(stats.t, stats.count, tuple(out))
    logger.info(
        "Closure comparison at t=%.4f: %s",
        stats.t,
        ", ".join(f"{q.name}={q.rel_error:.3e}" for q in out),
    )
    return report


def mean_consistency(stats: EnsembleStats, theta: ScalarField) -> float:
    """Fraction of nodes where ``|mean - Theta| <= 3 stderr``."""
    diff = np.abs(stats.mean_theta().values - theta.values)
    bound = 3.0 * stats.mean_stderr().values
    return float(np.mean(diff <= bound + 1e-300))


def write_report(
    report: ClosureReport | Sequence[ClosureReport],
    directory: str | os.PathLike[str],
) -> None:
    """Write ``closure.json`` (last report) and ``closure.csv`` (every report)."""
    reports = [report] if isinstance(report, ClosureReport) else list(report)
    root = upath.UPath(directory)
    root.mkdir(parents=True, exist_ok=True)
    payload = reports[-1].as_dict() | {"series": [r.as_dict() for r in reports]}
    serialization.dump_file(payload, root / "closure.json")
    rows = [row for r in reports for row in r.rows()]
    snapshots.write_csv(root / "closure.csv", rows, REPORT_COLUMNS)
