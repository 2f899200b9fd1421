"""Periodic square torus discretisation and its pseudo-spectral operators.

Arrays follow the LSF1 layout: the last two axes are ``(y, x)`` so that
``values[..., j, i]`` is the node ``(x_i, y_j)``. Any number of leading axes
(components, ensemble members) is carried along by every kernel.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
from typing import TYPE_CHECKING

import numpy as np
from scipy import fft as sfft

from lasalt import utils
from lasalt.errors import ConfigError, GridMismatchError, NonZeroMeanError


if TYPE_CHECKING:
    from lasalt.fields import GridField, OneFormField, ScalarField, VectorField


logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
DEFAULT_DEALIAS = 2.0 / 3.0
MEAN_FREE_RTOL = 1e-10


@dataclasses.dataclass(frozen=True)
class TorusGrid:
    """Uniform ``n x n`` grid on the torus ``[0, L)^2``."""

    n: int
    """Nodes per axis (even, at least 8)."""
    length: float = TWO_PI
    """Domain period L."""
    dealias_fraction: float = DEFAULT_DEALIAS
    """Wavenumbers with ``|k_x|`` or ``|k_y|`` above ``fraction * n / 2`` are dropped."""

    def __post_init__(self) -> None:
        if self.n < 8 or self.n % 2:  # noqa: PLR2004
            msg = f"Grid size must be even and >= 8, got {self.n}"
            raise ConfigError(msg)
        if not self.length > 0:
            msg = f"Domain length must be positive, got {self.length}"
            raise ConfigError(msg)
        if not 0 < self.dealias_fraction <= 1:
            msg = f"Dealias fraction must be in (0, 1], got {self.dealias_fraction}"
            raise ConfigError(msg)

    def __repr__(self) -> str:
        return utils.get_repr(self, self.n, length=self.length)

    @property
    def spacing(self) -> float:
        return self.length / self.n

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def cell_area(self) -> float:
        return self.spacing**2

    @property
    def area(self) -> float:
        return self.length**2

    @functools.cached_property
    def coordinates(self) -> np.ndarray:
        """1D node coordinates ``i * L / n``."""
        return np.arange(self.n) * self.spacing

    @functools.cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """``(X, Y)`` node coordinate arrays in ``(y, x)`` layout."""
        x, y = np.meshgrid(self.coordinates, self.coordinates, indexing="xy")
        return x, y

    @functools.cached_property
    def padded_n(self) -> int:
        """Size of the 3/2-padded grid used for products."""
        m = (3 * self.n) // 2
        return m + m % 2

    @functools.cached_property
    def index_x(self) -> np.ndarray:
        """Integer wavenumbers along x for the real transform, shape (1, n//2+1)."""
        return np.rint(sfft.rfftfreq(self.n, 1.0 / self.n))[None, :]

    @functools.cached_property
    def index_y(self) -> np.ndarray:
        """Integer wavenumbers along y, shape (n, 1)."""
        return np.rint(sfft.fftfreq(self.n, 1.0 / self.n))[:, None]

    @functools.cached_property
    def kx(self) -> np.ndarray:
        return self.index_x * (TWO_PI / self.length)

    @functools.cached_property
    def ky(self) -> np.ndarray:
        return self.index_y * (TWO_PI / self.length)

    @functools.cached_property
    def derivative_symbols(self) -> tuple[np.ndarray, np.ndarray]:
        """``i k_x`` and ``i k_y`` with the Nyquist modes removed."""
        nyq = self.n // 2
        kx = np.where(np.abs(self.index_x) == nyq, 0.0, self.kx)
        ky = np.where(np.abs(self.index_y) == nyq, 0.0, self.ky)
        return 1j * kx, 1j * ky

    @functools.cached_property
    def k_squared(self) -> np.ndarray:
        return self.kx**2 + self.ky**2

    @functools.cached_property
    def inverse_k_squared(self) -> np.ndarray:
        """``1/|k|^2`` with the zero mode set to zero."""
        k2 = self.k_squared.copy()
        k2[0, 0] = 1.0
        inv = 1.0 / k2
        inv[0, 0] = 0.0
        return inv

    @functools.cached_property
    def dealias_mask(self) -> np.ndarray:
        """Keeps the modes with ``|k| <= dealias_fraction * n / 2`` (integer units)."""
        cutoff = self.dealias_fraction * (self.n / 2)
        return self.index_x**2 + self.index_y**2 <= cutoff**2

    @functools.cached_property
    def rfft_weights(self) -> np.ndarray:
        """Multiplicity of each half-spectrum column in the full spectrum."""
        w = np.full((1, self.n // 2 + 1), 2.0)
        w[0, 0] = 1.0
        w[0, -1] = 1.0
        return w

    def sawtooth_y(self) -> np.ndarray:
        """The coordinate function y in ``[0, L)`` with its seam at y = 0."""
        return self.mesh[1]

    def seam_band(self, width: float | None = None) -> np.ndarray:
        """Boolean mask of nodes closer than ``width`` (default L/8) to the y-seam."""
        width = self.length / 8 if width is None else width
        y = self.sawtooth_y()
        return (y < width) | (y > self.length - width)


@dataclasses.dataclass(frozen=True, eq=False)
class SpectralField:
    """Half-spectrum coefficients of a real field (Hermitian symmetry implied)."""

    grid: TorusGrid
    coeffs: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray, grid: TorusGrid) -> SpectralField:
        return cls(grid, to_spectral(values))

    def to_values(self) -> np.ndarray:
        return to_physical(self.coeffs, self.grid)

    def l2_norm(self) -> np.ndarray | float:
        """L2 norm computed from the coefficients (Parseval)."""
        w = self.grid.rfft_weights
        total = np.sum(w * np.abs(self.coeffs) ** 2, axis=(-2, -1))
        return np.sqrt(total) / self.grid.n * self.grid.spacing


# -- array kernels ---------------------------------------------------------------


def to_spectral(values: np.ndarray) -> np.ndarray:
    return sfft.rfft2(values, axes=(-2, -1))


def to_physical(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return sfft.irfft2(coeffs, s=grid.shape, axes=(-2, -1))


def spectral_jacobian(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Coefficients of ``(d/dx, d/dy)`` stacked on a new axis before the grid axes."""
    ikx, iky = grid.derivative_symbols
    return np.stack([coeffs * ikx, coeffs * iky], axis=-3)


def jacobian_values(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return to_physical(spectral_jacobian(to_spectral(values), grid), grid)


def dealias_values(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return to_physical(to_spectral(values) * grid.dealias_mask, grid)


def pad_coefficients(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Embed half-spectrum coefficients into the 3/2-padded grid (Nyquist dropped)."""
    n, m, h = grid.n, grid.padded_n, grid.n // 2
    out = np.zeros((*coeffs.shape[:-2], m, m // 2 + 1), dtype=np.complex128)
    out[..., :h, :h] = coeffs[..., :h, :h]
    out[..., m - h + 1 :, :h] = coeffs[..., n - h + 1 :, :h]
    return out * (m / n) ** 2


def truncate_coefficients(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Inverse of `pad_coefficients`, followed by the dealias mask."""
    n, m, h = grid.n, grid.padded_n, grid.n // 2
    out = np.zeros((*coeffs.shape[:-2], n, h + 1), dtype=np.complex128)
    out[..., :h, :h] = coeffs[..., :h, :h]
    out[..., n - h + 1 :, :h] = coeffs[..., m - h + 1 :, :h]
    return out * (n / m) ** 2 * grid.dealias_mask


def padded_values(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    m = grid.padded_n
    return sfft.irfft2(pad_coefficients(coeffs, grid), s=(m, m), axes=(-2, -1))


def from_padded(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Bring a product evaluated on the padded grid back, dealiased."""
    coeffs = truncate_coefficients(sfft.rfft2(values, axes=(-2, -1)), grid)
    return to_physical(coeffs, grid)


def product_values(a: np.ndarray, b: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Dealiased pointwise product of two arrays (3/2 padding, then 2/3 truncation)."""
    pa = padded_values(to_spectral(a), grid)
    pb = padded_values(to_spectral(b), grid)
    return from_padded(pa * pb, grid)


def grid_l2(values: np.ndarray, grid: TorusGrid) -> np.ndarray | float:
    return np.sqrt(np.sum(values**2, axis=(-2, -1)) * grid.cell_area)


def grid_mean(values: np.ndarray) -> np.ndarray | float:
    return np.mean(values, axis=(-2, -1))


def _check_mean_free(values: np.ndarray, grid: TorusGrid, what: str) -> None:
    mean = np.abs(grid_mean(values))
    norm = grid_l2(values, grid)
    bad = mean > MEAN_FREE_RTOL * norm
    if np.any(bad):
        worst = float(np.max(mean))
        msg = f"{what} requires a mean-free field, spatial mean is {worst:.3e}"
        raise NonZeroMeanError(msg, mean=worst)


# -- typed operators ---------------------------------------------------------------


def check_same_grid(*fields: GridField) -> TorusGrid:
    """Return the shared grid of all fields or raise GridMismatchError."""
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            msg = f"Grid mismatch: {grid!r} vs {f.grid!r}"
            raise GridMismatchError(msg)
    return grid


def gradient(f: ScalarField) -> OneFormField:
    """Spectral gradient ``(d_x f, d_y f)``."""
    from lasalt.fields import OneFormField

    return OneFormField(to_physical(f.spectral_jacobian, f.grid), f.grid)


def divergence(v: VectorField) -> ScalarField:
    from lasalt.fields import ScalarField

    ikx, iky = v.grid.derivative_symbols
    coeffs = v.spectral
    div_hat = ikx * coeffs[..., 0, :, :] + iky * coeffs[..., 1, :, :]
    return ScalarField(to_physical(div_hat, v.grid), v.grid)


def curl2d(v: VectorField) -> ScalarField:
    """Scalar curl ``d_x v^2 - d_y v^1``."""
    from lasalt.fields import ScalarField

    ikx, iky = v.grid.derivative_symbols
    coeffs = v.spectral
    curl_hat = ikx * coeffs[..., 1, :, :] - iky * coeffs[..., 0, :, :]
    return ScalarField(to_physical(curl_hat, v.grid), v.grid)


def laplacian(f: ScalarField) -> ScalarField:
    from lasalt.fields import ScalarField

    return ScalarField(to_physical(-f.grid.k_squared * f.spectral, f.grid), f.grid)


def perp_gradient(psi: ScalarField) -> VectorField:
    """``(-d_y psi, d_x psi)``."""
    from lasalt.fields import VectorField

    ikx, iky = psi.grid.derivative_symbols
    coeffs = np.stack([-iky * psi.spectral, ikx * psi.spectral], axis=-3)
    return VectorField(to_physical(coeffs, psi.grid), psi.grid)


def biot_savart(omega: ScalarField) -> VectorField:
    """Mean-free, divergence-free velocity whose curl is ``omega``.

    The stream function solves ``Laplace(psi) = omega`` and the velocity is its
    perpendicular gradient, so that ``curl2d(biot_savart(w)) == w``.

    Raises:
        NonZeroMeanError: If omega has a nonzero spatial mean.
    """
    from lasalt.fields import ScalarField

    _check_mean_free(omega.values, omega.grid, "biot_savart")
    psi_hat = -omega.spectral * omega.grid.inverse_k_squared
    return perp_gradient(ScalarField(to_physical(psi_hat, omega.grid), omega.grid))


def poisson_solve(src: ScalarField) -> ScalarField:
    """Mean-free ``p`` with ``-Laplace(p) = src``.

    Raises:
        NonZeroMeanError: If src has a nonzero spatial mean.
    """
    from lasalt.fields import ScalarField

    _check_mean_free(src.values, src.grid, "poisson_solve")
    p_hat = src.spectral * src.grid.inverse_k_squared
    return ScalarField(to_physical(p_hat, src.grid), src.grid)


def dealias_product(f: ScalarField, g: ScalarField) -> ScalarField:
    from lasalt.fields import ScalarField

    grid = check_same_grid(f, g)
    values = from_padded(f.padded * g.padded, grid)
    return ScalarField(values, grid)


# -- norms -------------------------------------------------------------------------


def l2_norm(f: GridField) -> float:
    """Grid L2 norm over all components (ensemble axes are summed too)."""
    return float(np.sqrt(np.sum(f.values**2) * f.grid.cell_area))


def relative_l2(a: GridField, b: GridField) -> float:
    """``|a - b| / |b|``; returns the absolute error when ``b`` vanishes."""
    check_same_grid(a, b)
    diff = float(np.sqrt(np.sum((a.values - b.values) ** 2)))
    ref = float(np.sqrt(np.sum(b.values**2)))
    return diff / ref if ref > 0 else diff


def sobolev_norm(f: GridField, order: int) -> float:
    """Spectral ``H^order`` norm with weight ``(1 + |k|^2)^order``."""
    grid = f.grid
    weight = grid.rfft_weights * (1.0 + grid.k_squared) ** order
    total = np.sum(weight * np.abs(f.spectral) ** 2)
    return float(np.sqrt(total) / grid.n * grid.spacing)


def integral(f: ScalarField) -> np.ndarray | float:
    """Quadrature of ``f`` over the torus (exact for trigonometric polynomials)."""
    return np.sum(f.values, axis=(-2, -1)) * f.grid.cell_area


def tail_energy(f: ScalarField, fraction: float = 2.0 / 3.0) -> float:
    """Spectral energy in modes with ``|k| > fraction * n / 2`` (integer units)."""
    grid = f.grid
    kmag = np.sqrt(grid.index_x**2 + grid.index_y**2)
    tail = kmag > fraction * grid.n / 2
    energy = grid.rfft_weights * np.abs(f.spectral) ** 2 * tail
    return float(np.sum(energy) / grid.n**2 * grid.cell_area)


if __name__ == "__main__":
    from lasalt.fields import ScalarField

    g = TorusGrid(32)
    x, _ = g.mesh
    v = biot_savart(ScalarField(np.sin(x), g))
    print(np.max(np.abs(v.values[1] + np.cos(x))))
