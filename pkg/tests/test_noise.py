from __future__ import annotations

import numpy as np
import pytest

from lasalt import noise
from lasalt.errors import ConfigError, EllipticityViolationError
from lasalt.grid import TorusGrid
from lasalt.noise import (
    build_noise_basis,
    canonical,
    parse_noise_spec,
    sample_path,
    sample_paths,
)


SHEAR = [
    {"const": [0.2, 0.0]},
    {"const": [0.0, 0.2]},
    {"modes": [{"component": 1, "kx": 0, "ky": 1, "amp_sin": 0.1}]},
]


def test_canonical_preset_round_trips():
    """The preset string survives parsing and serialisation."""
    spec = parse_noise_spec("canonical(0.25)")
    assert len(spec) == 2
    assert spec.as_config() == "canonical(0.25)"
    assert spec == canonical(0.25)


@pytest.mark.parametrize(
    "raw",
    [
        "gaussian(0.1)",
        [],
        [{"const": [1.0]}],
        [{"modes": [{"component": 3, "kx": 0, "ky": 1}]}],
        [{"modes": [{"component": 1, "kx": 0}]}],
        [{"const": [1.0, 0.0], "scale": 2}],
    ],
)
def test_invalid_noise_specs(raw):
    """Malformed noise sections are configuration errors."""
    with pytest.raises(ConfigError):
        parse_noise_spec(raw)


def test_canonical_basis_properties(grid: TorusGrid):
    """The canonical pair is constant, divergence-free with lambda_min = eps^2."""
    basis = build_noise_basis("canonical(0.3)", grid)
    assert basis.constant
    assert basis.divergence_free
    assert basis.lambda_min == pytest.approx(0.09, rel=1e-12)
    assert basis.ito_drift.l2_norm() == 0.0


def test_sheared_basis(grid32: TorusGrid):
    """A sin(y) x-field is divergence-free and has no Itô drift of its own."""
    basis = build_noise_basis(SHEAR, grid32, require_elliptic=True)
    assert not basis.constant
    assert basis.divergence_free
    assert basis.ito_drift.l2_norm() < 1e-12
    assert basis.lambda_min > 0


def test_degenerate_basis_is_refused(grid: TorusGrid):
    """A single constant field leaves one direction without diffusion."""
    basis = build_noise_basis([{"const": [1.0, 0.0]}], grid)
    assert basis.lambda_min == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(EllipticityViolationError) as info:
        basis.require_elliptic()
    assert info.value.lambda_min == basis.lambda_min
    with pytest.raises(EllipticityViolationError):
        build_noise_basis([{"const": [0.0, 1.0]}], grid, require_elliptic=True)


def test_basis_is_cached(grid: TorusGrid):
    """Equivalent specs share one materialised basis."""
    first = build_noise_basis("canonical(0.4)", grid)
    second = build_noise_basis(canonical(0.4), grid)
    assert first is second


def test_combine(grid: TorusGrid):
    """Weights combine the fields linearly."""
    basis = build_noise_basis("canonical(0.5)", grid)
    v = basis.combine(np.array([2.0, -1.0]))
    np.testing.assert_allclose(v.x, 1.0)
    np.testing.assert_allclose(v.y, -0.5)


def test_paths_are_reproducible():
    """The same (seed, member) gives the same increments."""
    a = sample_path(42, 3, 50, 0.01, 2)
    b = sample_path(42, 3, 50, 0.01, 2)
    c = sample_path(42, 4, 50, 0.01, 2)
    np.testing.assert_array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, c.increments)


def test_paths_share_their_prefix():
    """A longer path extends a shorter one of the same member."""
    short = sample_path(9, 1, 20, 0.01, 2)
    long = sample_path(9, 1, 80, 0.01, 2)
    np.testing.assert_array_equal(long.increments[:, :20], short.increments)


def test_path_statistics():
    """Increments are centred with variance dt."""
    dt = 0.01
    stacked = sample_paths(1, range(200), 100, dt, 2)
    assert stacked.shape == (200, 2, 100)
    assert abs(stacked.mean()) < 5 * np.sqrt(dt / stacked.size)
    assert stacked.var() == pytest.approx(dt, rel=0.05)


def test_coarsen_sums_increments():
    """Coarsening keeps the endpoint values of the Brownian path."""
    path = sample_path(5, 0, 12, 0.01, 2)
    coarse = path.coarsen(4)
    assert coarse.n_steps == 3
    assert coarse.dt == pytest.approx(0.04)
    np.testing.assert_allclose(coarse.cumulative()[:, -1], path.cumulative()[:, -1])
    with pytest.raises(ValueError, match="coarsen"):
        path.coarsen(5)


def test_seed_range_is_checked():
    """Seeds must fit into 64 bits."""
    with pytest.raises(ConfigError):
        sample_path(2**64, 0, 4, 0.1, 2)


def test_normals_are_addressed_by_counter():
    """Normal e of a member is Box-Muller of raw Philox words 2e and 2e+1."""
    key = (3 << 64) | 11
    z = noise._standard_normals(11, 3, 6)
    raw = np.random.Philox(key=key).random_raw(12).reshape(6, 2)
    uniform = ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    expected = np.sqrt(-2.0 * np.log(uniform[:, 0])) * np.cos(2.0 * np.pi * uniform[:, 1])
    np.testing.assert_allclose(z, expected, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(noise._standard_normals(11, 3, 2), z[:2])
    ziggurat = np.random.Generator(np.random.Philox(key=key)).standard_normal(6)
    assert not np.allclose(z, ziggurat)


if __name__ == "__main__":
    pytest.main([__file__])
