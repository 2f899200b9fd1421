from __future__ import annotations

import numpy as np
import pytest

from lasalt import grid as gridmod
from lasalt.errors import ConfigError, GridMismatchError, NonZeroMeanError
from lasalt.fields import ScalarField, VectorField
from lasalt.grid import TorusGrid
from lasalt.verify import band_limited_field


@pytest.mark.parametrize("n", [7, 6, 15])
def test_grid_rejects_bad_sizes(n: int):
    """Odd sizes and sizes below 8 are configuration errors."""
    with pytest.raises(ConfigError):
        TorusGrid(n)


def test_spectral_round_trip(grid: TorusGrid):
    """Transforming to spectral space and back returns the nodal values."""
    values = np.random.default_rng(0).standard_normal(grid.shape)
    back = gridmod.to_physical(gridmod.to_spectral(values), grid)
    np.testing.assert_allclose(back, values, atol=1e-12)


def test_biot_savart_of_a_single_mode(grid32: TorusGrid):
    """omega = sin x gives the velocity (0, -cos x)."""
    x, _ = grid32.mesh
    velocity = gridmod.biot_savart(ScalarField(np.sin(x), grid32))
    np.testing.assert_allclose(velocity.x, 0.0, atol=1e-12)
    np.testing.assert_allclose(velocity.y, -np.cos(x), atol=1e-12)


def test_biot_savart_inverts_curl(grid32: TorusGrid):
    """The reconstructed velocity is divergence-free and has the given curl."""
    omega = band_limited_field(grid32, seed=3)
    omega = omega - omega.mean()
    velocity = gridmod.biot_savart(omega)
    assert gridmod.relative_l2(gridmod.curl2d(velocity), omega) < 1e-10
    assert gridmod.divergence(velocity).l2_norm() < 1e-10


def test_biot_savart_rejects_nonzero_mean(grid: TorusGrid):
    """A vorticity with spatial mean has no periodic velocity."""
    with pytest.raises(NonZeroMeanError):
        gridmod.biot_savart(ScalarField(np.ones(grid.shape), grid))


def test_poisson_solve(grid32: TorusGrid):
    """-Laplace(p) reproduces the mean-free source."""
    src = band_limited_field(grid32, seed=5)
    src = src - src.mean()
    p = gridmod.poisson_solve(src)
    assert gridmod.relative_l2(-gridmod.laplacian(p), src) < 1e-10


def test_integral_and_norms(grid32: TorusGrid):
    """Quadrature is exact on trigonometric polynomials."""
    x, y = grid32.mesh
    f = ScalarField(1.0 + np.cos(x) * np.sin(2 * y), grid32)
    assert gridmod.integral(f) == pytest.approx(grid32.area)
    assert gridmod.l2_norm(f) == pytest.approx(np.sqrt(grid32.area * 1.25))
    assert gridmod.tail_energy(f) == pytest.approx(0.0, abs=1e-20)


def test_mismatched_grids_are_refused(grid: TorusGrid, grid32: TorusGrid):
    """Fields on different grids cannot be combined."""
    a = ScalarField.zeros(grid)
    b = ScalarField.zeros(grid32)
    with pytest.raises(GridMismatchError):
        gridmod.relative_l2(a, b)


def test_field_shape_is_checked(grid: TorusGrid):
    """A vector field needs two components of the grid's shape."""
    with pytest.raises(GridMismatchError):
        VectorField(np.zeros(grid.shape), grid)


def test_seam_band(grid32: TorusGrid):
    """The seam band holds the rows next to y = 0 and y = L."""
    band = grid32.seam_band()
    assert band[0].all()
    assert band[-1].all()
    assert not band[grid32.n // 2].any()



def _resample(coeffs: np.ndarray, n: int, m: int) -> np.ndarray:
    """Move real-transform coefficients between grids of size n and m (|k| < n/2)."""
    h = min(n, m) // 2
    out = np.zeros((m, m // 2 + 1), dtype=np.complex128)
    out[:h, :h] = coeffs[:h, :h]
    out[m - h + 1 :, :h] = coeffs[n - h + 1 :, :h]
    return out * (m / n) ** 2


def test_dealias_mask_is_radial(grid32: TorusGrid):
    """Corner modes beyond 2/3 of the Nyquist radius are dropped, axis modes kept."""
    mask = grid32.dealias_mask
    assert mask[0, 10]
    assert mask[10, 0]
    assert mask[-8, 7]
    assert not mask[10, 10]
    assert not mask[-10, 10]
    assert not mask[0, 11]


def test_dealias_product_removes_aliasing(grid: TorusGrid):
    """sin(7x)^2 keeps only its mean, where the nodal product aliases onto k = 2."""
    x, _ = grid.mesh
    f = ScalarField(np.sin(7 * x), grid)
    product = gridmod.dealias_product(f, f)
    np.testing.assert_allclose(product.values, 0.5, atol=1e-12)
    naive = gridmod.to_spectral(f.values**2)
    assert np.abs(naive[0, 2]) > 0.1 * grid.n**2


def test_dealias_product_matches_fine_grid(grid: TorusGrid):
    """The padded product equals the product on a doubled grid, masked back."""
    f = band_limited_field(grid, seed=1, kmax=5)
    g = band_limited_field(grid, seed=2, kmax=5)
    fine_n = 2 * grid.n
    fine_f = gridmod.to_physical(_resample(f.spectral, grid.n, fine_n), TorusGrid(fine_n))
    fine_g = gridmod.to_physical(_resample(g.spectral, grid.n, fine_n), TorusGrid(fine_n))
    coarse = _resample(gridmod.to_spectral(fine_f * fine_g), fine_n, grid.n)
    expected = gridmod.to_physical(coarse * grid.dealias_mask, grid)
    product = gridmod.dealias_product(f, g)
    np.testing.assert_allclose(product.values, expected, atol=1e-12)


if __name__ == "__main__":
    pytest.main([__file__])
