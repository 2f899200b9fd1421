from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from lasalt import montecarlo, spde
from lasalt.errors import (
    ConfigMismatchError,
    HashMismatchError,
    InstabilityError,
    MemberFailedError,
    TimeMisalignedError,
    TrajectoryExhaustedError,
)
from lasalt.fields import ScalarField
from lasalt.montecarlo import CentralMoments, CoMoments
from lasalt.noise import build_noise_basis, sample_path
from lasalt.runconfig import RunConfig
from lasalt.verify import ensemble_fingerprint

from .conftest import small_config_dict


@pytest.fixture(scope="module")
def samples() -> np.ndarray:
    rng = np.random.default_rng(2024)
    return rng.gamma(2.0, size=(37, 3, 4))


@pytest.mark.parametrize("split", [1, 10, 36])
def test_central_moments_merge_is_exact(samples: np.ndarray, split: int):
    """Merging two batches equals accumulating the pooled samples."""
    pooled = CentralMoments.from_samples(samples, 6)
    merged = CentralMoments.from_samples(samples[:split], 6).merge(
        CentralMoments.from_samples(samples[split:], 6)
    )
    assert merged.count == pooled.count
    np.testing.assert_allclose(merged.mean, pooled.mean, rtol=1e-12)
    for p in range(2, 7):
        np.testing.assert_allclose(merged.m(p), pooled.m(p), rtol=1e-9, atol=1e-9)


def test_central_moments_match_numpy(samples: np.ndarray):
    """Central moments agree with direct sample formulas."""
    acc = CentralMoments.from_samples(samples[:20], 4).merge(
        CentralMoments.from_samples(samples[20:], 4)
    )
    dev = samples - samples.mean(axis=0)
    np.testing.assert_allclose(acc.variance(), samples.var(axis=0, ddof=1))
    np.testing.assert_allclose(acc.central(3), np.mean(dev**3, axis=0))
    np.testing.assert_allclose(acc.central(4), np.mean(dev**4, axis=0))


def test_empty_batches_are_neutral(samples: np.ndarray):
    """Merging with an empty accumulator changes nothing."""
    acc = CentralMoments.from_samples(samples, 3)
    assert acc.merge(CentralMoments(3)) is acc
    assert CentralMoments(3).merge(acc) is acc


def test_order_mismatch(samples: np.ndarray):
    """Accumulators of different order cannot be merged."""
    with pytest.raises(ConfigMismatchError):
        CentralMoments.from_samples(samples, 3).merge(
            CentralMoments.from_samples(samples, 4)
        )


def test_comoments_merge_is_exact():
    """Pairwise co-moment merging equals the pooled covariance."""
    rng = np.random.default_rng(7)
    x = rng.standard_normal((25, 4, 2, 2))
    merged = CoMoments.from_samples(x[:9]).merge(CoMoments.from_samples(x[9:]))
    flat = x.reshape(25, 4, -1)
    for node in range(flat.shape[-1]):
        expected = np.cov(flat[:, :, node], rowvar=False)
        np.testing.assert_allclose(
            merged.covariance().reshape(4, 4, -1)[..., node], expected, rtol=1e-12
        )


def test_comoments_shape_mismatch():
    """Co-moments over different component counts cannot be merged."""
    a = CoMoments.from_samples(np.ones((2, 2, 2, 2)))
    b = CoMoments.from_samples(np.ones((2, 4, 2, 2)))
    with pytest.raises(ConfigMismatchError):
        a.merge(b)


@pytest.fixture(scope="module")
def ensemble(trajectory):
    config = RunConfig.from_dict(small_config_dict())
    return config, montecarlo.run_ensemble(config, trajectory)


def test_ensemble_statistics_match_members(ensemble, trajectory):
    """Streaming statistics equal those of the individually run members."""
    config, stats = ensemble
    basis = build_noise_basis(config.noise, trajectory.grid)
    finals = np.stack([
        spde.run_member(
            spde.initial_state(trajectory),
            trajectory,
            basis,
            trajectory.g,
            sample_path(config.ensemble.seed, m, 10, trajectory.dt, basis).increments,
        ).theta.values
        for m in range(config.ensemble.members)
    ])
    assert stats.count == 8
    assert stats.n_shards == 2
    assert stats.names == ["theta2", "A3", "A4", "dtheta2"]
    np.testing.assert_allclose(stats.mean_theta().values, finals.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(
        stats.estimate("theta2").values, finals.var(axis=0, ddof=1), atol=1e-12
    )


def test_shard_size_and_threads_do_not_matter(ensemble, trajectory):
    """Statistics are independent of sharding and of the worker count."""
    config, stats = ensemble
    resharded = montecarlo.run_ensemble(
        config.with_ensemble(shard_size=3), trajectory, threads=3
    )
    for name in stats.names:
        np.testing.assert_allclose(
            resharded.estimate(name).values, stats.estimate(name).values, atol=1e-12
        )
    threaded = montecarlo.run_ensemble(config, trajectory, threads=2)
    assert ensemble_fingerprint(threaded) == ensemble_fingerprint(stats)


def test_report_history(ensemble, trajectory):
    """report_every adds statistics at intermediate times."""
    config, _ = ensemble
    stats = montecarlo.run_ensemble(config.with_ensemble(report_every=4), trajectory)
    assert montecarlo.report_steps(10, 4) == [4, 8, 10]
    assert [s.step for s in stats.history] == [4, 8]
    assert stats.step == 10


def test_u_equation_tracks_tensors(ensemble, trajectory):
    """With the u-equation every covariance tensor is estimated."""
    config, _ = ensemble
    config = dataclasses.replace(
        config.with_solver(enable_u_equation=True),
        ensemble=dataclasses.replace(config.ensemble, members=4),
    )
    traj = dataclasses.replace(trajectory, config_hash=config.config_hash)
    stats = montecarlo.run_ensemble(config, traj)
    assert stats.names[-3:] == ["dtheta2", "cross", "u2"]
    assert stats.estimate("u2").symmetric


def test_hash_mismatch(ensemble, trajectory):
    """Trajectories of another config are refused."""
    config, _ = ensemble
    with pytest.raises(HashMismatchError):
        montecarlo.run_ensemble(config.with_solver(dt=0.0025), trajectory)


def test_merge_refuses_foreign_statistics(ensemble):
    """Statistics of another config cannot be merged."""
    _, stats = ensemble
    other = dataclasses.replace(stats, config_hash="other")
    with pytest.raises(ConfigMismatchError):
        stats.merge(other)


def test_closure_compare_with_itself(ensemble):
    """Estimates compared with themselves have zero error."""
    _, stats = ensemble
    report = montecarlo.closure_compare(stats, stats.as_moment_state())
    assert report.passed
    assert report["theta2"].rel_error == 0.0
    assert report.members == 8
    assert [q.name for q in report.quantities] == stats.names


def test_closure_compare_time_check(ensemble):
    """A closure solution at another time is refused."""
    _, stats = ensemble
    solution = dataclasses.replace(stats.as_moment_state(), t=stats.t + 0.01)
    with pytest.raises(TimeMisalignedError):
        montecarlo.closure_compare(stats, solution)


def test_mean_consistency(ensemble, trajectory):
    """The mean of the members lies within three standard errors of E[theta]."""
    _, stats = ensemble
    fraction = montecarlo.mean_consistency(stats, trajectory.theta_at(stats.t))
    assert 0.0 < fraction <= 1.0


def test_save_and_report(tmp_path, ensemble):
    """Statistics and closure reports are written to disk."""
    _, stats = ensemble
    stats.save(tmp_path / "ensemble")
    report = montecarlo.closure_compare(stats, stats.as_moment_state())
    montecarlo.write_report([report, report], tmp_path / "ensemble")
    names = {p.name for p in (tmp_path / "ensemble").iterdir()}
    assert {"stats.json", "closure.json", "closure.csv", "theta2_000000.lsf1"} <= names
    lines = (tmp_path / "ensemble" / "closure.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * len(report.quantities)



def test_blow_up_names_the_member(ensemble, trajectory):
    """A diverging member surfaces as MemberFailedError carrying its id."""
    config, _ = ensemble
    traj = dataclasses.replace(trajectory, g=1e12)
    with pytest.raises(MemberFailedError) as exc:
        montecarlo.run_ensemble(config, traj)
    assert exc.value.shard == (0, 1, 2, 3)
    assert exc.value.member_id in exc.value.shard
    assert isinstance(exc.value.__cause__, InstabilityError)


@pytest.mark.parametrize(
    ("error", "member"),
    [
        (InstabilityError("blew up", member_index=1), 5),
        (TrajectoryExhaustedError("no data"), 4),
    ],
)
def test_step_failure_is_pinned_on_a_member(
    monkeypatch, ensemble, trajectory, error: Exception, member: int
):
    """Any numerical error in a batched step is reported with a member id."""
    config, _ = ensemble
    real_step = spde.step

    def failing(scheme, state, *args, **kwargs):
        if 5 in state.member_ids and state.step_index == 3:  # noqa: PLR2004
            raise error
        return real_step(scheme, state, *args, **kwargs)

    monkeypatch.setattr(spde, "step", failing)
    with pytest.raises(MemberFailedError) as exc:
        montecarlo.run_ensemble(config, trajectory)
    assert exc.value.member_id == member
    assert exc.value.shard == (4, 5, 6, 7)
    assert exc.value.__cause__ is error
    assert "step 3" in str(exc.value)


@pytest.fixture(scope="module")
def large(trajectory):
    config = RunConfig.from_dict(small_config_dict())
    runs = {}
    for members, shard_size in [(200, 25), (200, 50), (200, 200), (800, 25)]:
        cfg = config.with_ensemble(members=members, shard_size=shard_size)
        runs[members, shard_size] = montecarlo.run_ensemble(cfg, trajectory)
    return runs


def _stderr_norm(stats: montecarlo.EnsembleStats, name: str) -> float:
    return ScalarField(stats.stderr(name), stats.grid).l2_norm()


def test_closure_compare_flags_a_wrong_closure(large):
    """A closure variance off by half is rejected."""
    stats = large[800, 25]
    solution = stats.as_moment_state()
    corrupted = dataclasses.replace(solution, theta2=solution.theta2 * 1.5)
    report = montecarlo.closure_compare(stats, corrupted, names=["theta2"])
    assert report["theta2"].rel_error == pytest.approx(1 / 3, rel=1e-9)
    assert report["theta2"].passed is False
    assert not report.passed


def test_stderr_shrinks_with_members(large):
    """Quadrupling the members halves the standard errors."""
    small, big = large[200, 25], large[800, 25]
    assert (small.n_shards, big.n_shards) == (8, 32)
    mean_ratio = small.mean_stderr().l2_norm() / big.mean_stderr().l2_norm()
    theta2_ratio = _stderr_norm(small, "theta2") / _stderr_norm(big, "theta2")
    assert 1.6 <= mean_ratio <= 2.4
    assert 1.6 <= theta2_ratio <= 2.4


def test_shard_merge_matches_single_pass(large):
    """Four merged shards of M/4 reproduce the single-shard statistics."""
    merged, single = large[200, 50], large[200, 200]
    assert (merged.n_shards, single.n_shards) == (4, 1)
    assert merged.count == single.count == 200
    np.testing.assert_allclose(
        merged.mean_theta().values, single.mean_theta().values, rtol=0, atol=1e-10
    )
    for name in single.names:
        np.testing.assert_allclose(
            merged.estimate(name).values,
            single.estimate(name).values,
            rtol=0,
            atol=1e-10,
        )


def test_single_shard_stderr_is_analytic(large):
    """Without batch means the standard error comes from the pooled samples."""
    single, batched = large[200, 200], large[200, 25]
    theta = single.theta
    expected = np.sqrt(
        np.maximum(theta.central(4) - theta.central(2) ** 2, 0.0) / single.count
    )
    np.testing.assert_allclose(single.stderr("theta2"), expected, rtol=1e-12)
    ratio = _stderr_norm(single, "theta2") / _stderr_norm(batched, "theta2")
    assert 0.5 <= ratio <= 2.0
    for name in single.names:
        se = single.stderr(name)
        assert se.shape == np.shape(single.estimate(name).values)
        assert np.all(np.isfinite(se))
        assert se.max() > 0.0


if __name__ == "__main__":
    pytest.main([__file__])
