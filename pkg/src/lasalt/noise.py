"""Noise vector fields, their ellipticity certificate and reproducible Brownian paths."""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
from typing import TYPE_CHECKING, Any

import numpy as np

from lasalt import grid as gridmod, utils
from lasalt.decorators import cache_with_transforms
from lasalt.errors import ConfigError, EllipticityViolationError
from lasalt.fields import VectorField


if TYPE_CHECKING:
    from collections.abc import Sequence

    from lasalt.grid import TorusGrid


logger = logging.getLogger(__name__)

DIVERGENCE_TOL = 1e-8
ELLIPTICITY_RTOL = 1e-12
_UNIT_53 = 2.0**-53


@dataclasses.dataclass(frozen=True)
class ModeSpec:
    """One Fourier term of a noise field component."""

    component: int
    """1 for the x-component, 2 for the y-component."""
    kx: int
    ky: int
    amp_cos: float = 0.0
    amp_sin: float = 0.0

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class XiSpec:
    """A single noise vector field: a constant plus a truncated Fourier series."""

    const: tuple[float, float] = (0.0, 0.0)
    modes: tuple[ModeSpec, ...] = ()

    def as_dict(self) -> dict[str, Any]:
        return {"const": list(self.const), "modes": [m.as_dict() for m in self.modes]}

    @property
    def is_constant(self) -> bool:
        return all(m.amp_cos == 0 and m.amp_sin == 0 for m in self.modes)


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    """Declarative description of the noise basis ``{xi_k}``."""

    xis: tuple[XiSpec, ...]
    preset: str | None = None
    """Preset expression this spec was expanded from, kept for serialisation."""

    def __len__(self) -> int:
        return len(self.xis)

    def as_config(self) -> str | list[dict[str, Any]]:
        """Config representation (the preset string if there is one)."""
        if self.preset is not None:
            return self.preset
        return [xi.as_dict() for xi in self.xis]

    @property
    def key(self) -> str:
        return utils.get_hash([xi.as_dict() for xi in self.xis])


def canonical(eps: float) -> NoiseSpec:
    """``{(eps, 0), (0, eps)}``: noise whose Itô drift is ``eps^2/2`` Laplace."""
    return NoiseSpec(
        (XiSpec(const=(eps, 0.0)), XiSpec(const=(0.0, eps))),
        preset=f"canonical({eps!r})",
    )


def _parse_mode(raw: Any) -> ModeSpec:
    if not isinstance(raw, dict):
        msg = f"Noise mode must be a mapping, got {raw!r}"
        raise ConfigError(msg)
    unknown = set(raw) - {"component", "kx", "ky", "amp_cos", "amp_sin"}
    if unknown:
        msg = f"Unknown noise mode keys: {sorted(unknown)}"
        raise ConfigError(msg)
    try:
        mode = ModeSpec(
            component=int(raw["component"]),
            kx=int(raw["kx"]),
            ky=int(raw["ky"]),
            amp_cos=float(raw.get("amp_cos", 0.0)),
            amp_sin=float(raw.get("amp_sin", 0.0)),
        )
    except KeyError as e:
        msg = f"Noise mode is missing key {e}"
        raise ConfigError(msg) from e
    if mode.component not in (1, 2):
        msg = f"Noise mode component must be 1 or 2, got {mode.component}"
        raise ConfigError(msg)
    return mode


def _parse_xi(raw: Any) -> XiSpec:
    if not isinstance(raw, dict):
        msg = f"Noise field entry must be a mapping, got {raw!r}"
        raise ConfigError(msg)
    unknown = set(raw) - {"const", "modes"}
    if unknown:
        msg = f"Unknown noise field keys: {sorted(unknown)}"
        raise ConfigError(msg)
    const = raw.get("const", [0.0, 0.0])
    if len(const) != 2:  # noqa: PLR2004
        msg = f"Noise 'const' needs two entries, got {const!r}"
        raise ConfigError(msg)
    modes = tuple(_parse_mode(m) for m in raw.get("modes", []))
    return XiSpec(const=(float(const[0]), float(const[1])), modes=modes)


def parse_noise_spec(raw: str | Sequence[Any] | NoiseSpec) -> NoiseSpec:
    """Parse the ``noise`` section of a run config.

    Accepts ``"canonical(eps)"`` or a list of ``{"const": [a, b], "modes": [...]}``.
    """
    match raw:
        case NoiseSpec():
            return raw
        case str():
            call = utils.parse_call(raw)
            if call is None or call[0] != "canonical" or len(call[1]) != 1:
                msg = f"Unknown noise preset {raw!r}, expected 'canonical(eps)'"
                raise ConfigError(msg)
            return canonical(call[1][0])
        case list() | tuple() if raw:
            return NoiseSpec(tuple(_parse_xi(entry) for entry in raw))
        case _:
            msg = f"Noise spec must be a preset string or a non-empty list, got {raw!r}"
            raise ConfigError(msg)


def materialize(xi: XiSpec, grid: TorusGrid) -> VectorField:
    """Evaluate a noise field on the grid nodes."""
    x, y = grid.mesh
    scale = gridmod.TWO_PI / grid.length
    values = np.empty((2, grid.n, grid.n))
    values[0] = xi.const[0]
    values[1] = xi.const[1]
    for mode in xi.modes:
        phase = scale * (mode.kx * x + mode.ky * y)
        c = mode.component - 1
        if mode.amp_cos:
            values[c] += mode.amp_cos * np.cos(phase)
        if mode.amp_sin:
            values[c] += mode.amp_sin * np.sin(phase)
    return VectorField(values, grid)


def diffusion_tensor(xis: Sequence[VectorField]) -> np.ndarray:
    """``a(x) = sum_k xi_k (x) xi_k``, shape (2, 2, n, n)."""
    stacked = np.stack([xi.values for xi in xis])
    return np.einsum("kiyx,kjyx->ijyx", stacked, stacked)


def eigenvalue_bounds(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form smallest and largest eigenvalue of a symmetric 2x2 field."""
    a11, a12, a22 = a[0, 0], a[0, 1], a[1, 1]
    trace = a11 + a22
    root = np.sqrt((a11 - a22) ** 2 + 4.0 * a12**2)
    return (trace - root) / 2.0, (trace + root) / 2.0


def _advect_vector(xi: VectorField) -> VectorField:
    """Dealiased ``(xi . grad) xi``."""
    prod = np.einsum("jyx,ijyx->iyx", xi.padded, xi.padded_jacobian)
    return VectorField(gridmod.from_padded(prod, xi.grid), xi.grid)


@dataclasses.dataclass(frozen=True, eq=False)
class NoiseBasis:
    """Noise fields materialised on a grid with derived coefficients."""

    spec: NoiseSpec
    grid: TorusGrid
    xis: tuple[VectorField, ...]
    ito_drift: VectorField
    """``1/2 sum_k (xi_k . grad) xi_k``."""
    lambda_min: float
    """Minimum over nodes of the smallest eigenvalue of ``sum_k xi_k (x) xi_k``."""
    lambda_max: float
    """Maximum over nodes of the largest eigenvalue (used for the stability bound)."""
    divergence_free: bool
    constant: bool
    """All fields are spatially constant (integrating-factor fast path applies)."""

    def __repr__(self) -> str:
        return utils.get_repr(
            self,
            n_fields=len(self.xis),
            lambda_min=self.lambda_min,
            divergence_free=self.divergence_free,
        )

    def __len__(self) -> int:
        return len(self.xis)

    @property
    def is_elliptic(self) -> bool:
        return self.lambda_min > ELLIPTICITY_RTOL * max(self.lambda_max, 1.0)

    @property
    def spec_hash(self) -> str:
        return self.spec.key

    def require_elliptic(self) -> None:
        """Raise if the expectation system would not be parabolic."""
        if not self.is_elliptic:
            msg = (
                "Noise basis is not uniformly elliptic "
                f"(lambda_min={self.lambda_min:.3e}); "
                "a parabolic solve needs lambda_min > 0"
            )
            raise EllipticityViolationError(msg, lambda_min=self.lambda_min)

    @functools.cached_property
    def constant_vectors(self) -> np.ndarray:
        """Node-independent values of the fields, shape (N, 2); only if `constant`."""
        return np.stack([xi.values[:, 0, 0] for xi in self.xis])

    def diffusion_symbol(self) -> np.ndarray:
        """Spectral symbol of ``1/2 sum_k (xi_k . grad)^2`` for constant fields."""
        grid = self.grid
        total = np.zeros_like(grid.k_squared)
        for cx, cy in self.constant_vectors:
            total -= 0.5 * (cx * grid.kx + cy * grid.ky) ** 2
        return total

    def combine(self, weights: np.ndarray) -> VectorField:
        """``sum_k w_k xi_k``; ``weights`` has shape (..., N)."""
        stacked = np.stack([xi.values for xi in self.xis])
        w = np.asarray(weights, dtype=np.float64)
        values = np.tensordot(w, stacked, axes=(-1, 0))
        return VectorField(values, self.grid)


def _spec_key(spec: Any) -> NoiseSpec:
    return parse_noise_spec(spec)


@cache_with_transforms(arg_transformers={0: _spec_key})
def build_noise_basis(
    spec: NoiseSpec | str | Sequence[Any],
    grid: TorusGrid,
    *,
    require_elliptic: bool = False,
) -> NoiseBasis:
    """Materialise the noise fields and certify their ellipticity.

    Args:
        spec: Parsed spec, preset string or raw config list
        grid: Grid to evaluate the fields on
        require_elliptic: Raise if the basis is degenerate (parabolic solve requested)

    Raises:
        EllipticityViolationError: If ``require_elliptic`` and ``lambda_min <= 0``.
    """
    spec = parse_noise_spec(spec)
    xis = tuple(materialize(xi, grid) for xi in spec.xis)
    lo, hi = eigenvalue_bounds(diffusion_tensor(xis))
    constant = all(xi.is_constant for xi in spec.xis)
    if constant:
        drift = VectorField.zeros(grid)
    else:
        drift = VectorField.zeros(grid)
        for xi in xis:
            drift = drift + _advect_vector(xi)
        drift = drift * 0.5
    div_max = max(float(np.max(np.abs(gridmod.divergence(xi).values))) for xi in xis)
    basis = NoiseBasis(
        spec=spec,
        grid=grid,
        xis=xis,
        ito_drift=drift,
        lambda_min=float(np.min(lo)),
        lambda_max=float(np.max(hi)),
        divergence_free=div_max < DIVERGENCE_TOL,
        constant=constant,
    )
    logger.debug("Built %r", basis)
    if require_elliptic:
        basis.require_elliptic()
    return basis


def ito_correction_vector(basis: NoiseBasis) -> VectorField:
    """``1/2 sum_k (xi_k . grad) xi_k``, the drift added to the Itô characteristics."""
    return basis.ito_drift


@dataclasses.dataclass(frozen=True, eq=False)
class BrownianPath:
    """Increments ``dW^k_step`` of one ensemble member, shape (N, n_steps)."""

    seed: int
    member_id: int
    n_steps: int
    dt: float
    increments: np.ndarray

    def __repr__(self) -> str:
        return utils.get_repr(
            self,
            seed=self.seed,
            member_id=self.member_id,
            n_steps=self.n_steps,
            dt=self.dt,
        )

    @property
    def n_noise(self) -> int:
        return self.increments.shape[0]

    def row(self, step: int) -> np.ndarray:
        """Increments of all noise fields for one step, shape (N,)."""
        return self.increments[:, step]

    def cumulative(self) -> np.ndarray:
        """``W^k`` at the step ends, shape (N, n_steps + 1), starting at 0."""
        w = np.zeros((self.n_noise, self.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w

    def coarsen(self, factor: int) -> BrownianPath:
        """The same path seen with a step ``factor`` times larger."""
        if factor < 1 or self.n_steps % factor:
            msg = f"Cannot coarsen {self.n_steps} steps by {factor}"
            raise ValueError(msg)
        summed = self.increments.reshape(self.n_noise, -1, factor).sum(axis=2)
        return BrownianPath(
            self.seed, self.member_id, self.n_steps // factor, self.dt * factor, summed
        )


def _standard_normals(seed: int, member_id: int, count: int) -> np.ndarray:
    """Box-Muller normals from a Philox stream keyed by ``(seed, member_id)``.

    Entry ``e`` depends only on the key and on ``e`` (raw draws ``2e`` and ``2e+1``).
    ``Generator(Philox(key)).standard_normal`` is not used here: its ziggurat
    sampler rejects and redraws, so the number of raw words behind each normal
    varies and an increment cannot be located from its ``(step, k)`` offset.
    The output would also change whenever numpy changes that sampler.
    """
    if not 0 <= seed < 2**64 or not 0 <= member_id < 2**64:
        msg = f"seed and member_id must fit in 64 bits, got {seed}, {member_id}"
        raise ConfigError(msg)
    bitgen = np.random.Philox(key=(member_id << 64) | seed)
    raw = bitgen.random_raw(2 * count).reshape(count, 2)
    uniform = ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * _UNIT_53
    radius = np.sqrt(-2.0 * np.log(uniform[:, 0]))
    return radius * np.cos(2.0 * math.pi * uniform[:, 1])


def sample_path(
    seed: int,
    member_id: int,
    n_steps: int,
    dt: float,
    basis: NoiseBasis | int,
) -> BrownianPath:
    """Generate the increment table of one member.

    The entry for noise field ``k`` at step ``s`` is drawn from counter position
    ``s * N + k`` of the member's stream, so paths of different length agree on
    their common prefix.
    """
    if n_steps < 1 or not dt > 0:
        msg = f"Need n_steps >= 1 and dt > 0, got {n_steps}, {dt}"
        raise ValueError(msg)
    n_noise = basis if isinstance(basis, int) else len(basis)
    z = _standard_normals(seed, member_id, n_steps * n_noise)
    increments = z.reshape(n_steps, n_noise).T * math.sqrt(dt)
    return BrownianPath(seed, member_id, n_steps, dt, np.ascontiguousarray(increments))


def sample_paths(
    seed: int,
    member_ids: Sequence[int],
    n_steps: int,
    dt: float,
    basis: NoiseBasis | int,
) -> np.ndarray:
    """Increments of several members stacked, shape (members, N, n_steps)."""
    return np.stack([
        sample_path(seed, m, n_steps, dt, basis).increments for m in member_ids
    ])


if __name__ == "__main__":
    from lasalt.grid import TorusGrid

    basis = build_noise_basis("canonical(0.1)", TorusGrid(32))
    print(basis, sample_path(0, 1, 4, 1e-3, basis).increments)
