"""Grid field containers and the Lie-derivative calculus on the torus.

All containers carry an arbitrary number of leading batch axes (ensemble members)
in front of their component axes, so one call advances a whole shard of
realisations. Operations never mutate their inputs.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
from typing import TYPE_CHECKING, Any, ClassVar, Self, TypeVar

import numpy as np

from lasalt import grid as gridmod, utils
from lasalt.errors import GridMismatchError


if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from lasalt.grid import SpectralField, TorusGrid
    from lasalt.noise import NoiseBasis


logger = logging.getLogger(__name__)

F = TypeVar("F", bound="GridField")


class GridField:
    """Real values on a `TorusGrid` with a fixed component layout."""

    component_shape: ClassVar[tuple[int, ...]] = ()
    kind: ClassVar[str] = "field"

    def __init__(self, values: Any, grid: TorusGrid) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.grid = grid
        expected = (*self.component_shape, grid.n, grid.n)
        if self.values.shape[self.values.ndim - len(expected) :] != expected:
            msg = f"{type(self).__name__} expects trailing shape {expected}, "
            msg += f"got {self.values.shape}"
            raise GridMismatchError(msg)

    def __repr__(self) -> str:
        return utils.get_repr(self, grid=self.grid, shape=self.values.shape)

    @classmethod
    def zeros(cls, grid: TorusGrid, batch: tuple[int, ...] = ()) -> Self:
        return cls(np.zeros((*batch, *cls.component_shape, grid.n, grid.n)), grid)

    @classmethod
    def stack(cls, fields: Sequence[Self]) -> Self:
        """Stack fields along a new leading batch axis."""
        grid = gridmod.check_same_grid(*fields)
        return cls(np.stack([f.values for f in fields]), grid)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.values.shape[: self.values.ndim - len(self.component_shape) - 2]

    def member(self, index: int) -> Self:
        """Select one realisation along the first batch axis."""
        return self._new(self.values[index])

    def _new(self, values: np.ndarray) -> Self:
        return type(self)(values, self.grid)

    def _coerce(self, other: Any) -> np.ndarray:
        if isinstance(other, GridField):
            if type(other) is not type(self):
                msg = f"Cannot combine {type(self).__name__} with {type(other).__name__}"
                raise TypeError(msg)
            gridmod.check_same_grid(self, other)
            return other.values
        return np.asarray(other, dtype=np.float64)

    def batch_coefficients(self, coeffs: Any) -> np.ndarray:
        """Reshape per-member coefficients so they broadcast against ``values``."""
        arr = np.asarray(coeffs, dtype=np.float64)
        return arr.reshape(arr.shape + (1,) * (len(self.component_shape) + 2))

    def __add__(self, other: Any) -> Self:
        return self._new(self.values + self._coerce(other))

    def __radd__(self, other: Any) -> Self:
        return self.__add__(other)

    def __sub__(self, other: Any) -> Self:
        return self._new(self.values - self._coerce(other))

    def __rsub__(self, other: Any) -> Self:
        return self._new(self._coerce(other) - self.values)

    def __neg__(self) -> Self:
        return self._new(-self.values)

    def __mul__(self, other: Any) -> Self:
        if isinstance(other, GridField):
            return NotImplemented
        return self._new(self.values * np.asarray(other, dtype=np.float64))

    def __rmul__(self, other: Any) -> Self:
        return self.__mul__(other)

    def __truediv__(self, other: Any) -> Self:
        return self._new(self.values / np.asarray(other, dtype=np.float64))

    @functools.cached_property
    def spectral(self) -> np.ndarray:
        """Half-spectrum coefficients (cached, fields are never mutated in place)."""
        return gridmod.to_spectral(self.values)

    @functools.cached_property
    def spectral_jacobian(self) -> np.ndarray:
        """Coefficients of all first derivatives, derivative axis appended last."""
        return gridmod.spectral_jacobian(self.spectral, self.grid)

    @functools.cached_property
    def jacobian(self) -> np.ndarray:
        """``jacobian[..., c, j, :, :] = d_j values[..., c, :, :]``."""
        return gridmod.to_physical(self.spectral_jacobian, self.grid)

    @functools.cached_property
    def padded(self) -> np.ndarray:
        """Values resampled on the 3/2-padded grid for dealiased products."""
        return gridmod.padded_values(self.spectral, self.grid)

    @functools.cached_property
    def padded_jacobian(self) -> np.ndarray:
        return gridmod.padded_values(self.spectral_jacobian, self.grid)

    def to_spectral_field(self) -> SpectralField:
        return gridmod.SpectralField(self.grid, self.spectral)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def l2_norm(self) -> float:
        return gridmod.l2_norm(self)

    def member_l2(self) -> np.ndarray:
        """L2 norm per batch entry (components folded in)."""
        axes = tuple(range(len(self.batch_shape), self.values.ndim))
        return np.sqrt(np.sum(self.values**2, axis=axes) * self.grid.cell_area)


class ScalarField(GridField):
    kind = "scalar"

    def mean(self) -> np.ndarray | float:
        return gridmod.grid_mean(self.values)


class VectorField(GridField):
    component_shape = (2,)
    kind = "vector"

    @property
    def x(self) -> np.ndarray:
        return self.values[..., 0, :, :]

    @property
    def y(self) -> np.ndarray:
        return self.values[..., 1, :, :]

    def as_oneform(self) -> OneFormField:
        """Flat (index lowering with the Euclidean metric)."""
        return OneFormField(self.values, self.grid)

    def max_speed(self) -> float:
        return float(np.max(np.sqrt(np.sum(self.values**2, axis=-3))))


class OneFormField(GridField):
    """Coefficients of ``dx`` and ``dy``."""

    component_shape = (2,)
    kind = "oneform"

    def as_vector(self) -> VectorField:
        """Sharp (index raising with the Euclidean metric)."""
        return VectorField(self.values, self.grid)


class Tensor2Field(GridField):
    """Covariant rank-2 tensor, ``values[..., i, j, :, :] = T_ij``."""

    component_shape = (2, 2)
    kind = "tensor2"

    def __init__(self, values: Any, grid: TorusGrid, *, symmetric: bool = False) -> None:
        super().__init__(values, grid)
        self.symmetric = symmetric

    def _new(self, values: np.ndarray) -> Self:
        return type(self)(values, self.grid, symmetric=self.symmetric)

    def __add__(self, other: Any) -> Self:
        result = super().__add__(other)
        if isinstance(other, Tensor2Field):
            result.symmetric = self.symmetric and other.symmetric
        return result

    def __sub__(self, other: Any) -> Self:
        result = super().__sub__(other)
        if isinstance(other, Tensor2Field):
            result.symmetric = self.symmetric and other.symmetric
        return result

    @classmethod
    def stack(cls, fields: Sequence[Self]) -> Self:
        result = super().stack(fields)
        result.symmetric = all(f.symmetric for f in fields)
        return result

    def transpose(self) -> Tensor2Field:
        values = np.swapaxes(self.values, -4, -3)
        return Tensor2Field(values, self.grid, symmetric=self.symmetric)

    def asymmetry(self) -> float:
        """Max ``|T_12 - T_21|``."""
        upper, lower = self.values[..., 0, 1, :, :], self.values[..., 1, 0, :, :]
        return float(np.max(np.abs(upper - lower)))


@dataclasses.dataclass(frozen=True)
class ConstantVector:
    """A spatially constant vector, such as the mean velocity."""

    x: float = 0.0
    y: float = 0.0

    def __repr__(self) -> str:
        return utils.get_repr(self, self.x, self.y)

    @classmethod
    def from_array(cls, arr: Iterable[float]) -> ConstantVector:
        x, y = (float(v) for v in arr)
        return cls(x, y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_list(self) -> list[float]:
        return [self.x, self.y]

    def to_field(self, grid: TorusGrid) -> VectorField:
        values = np.broadcast_to(self.as_array()[:, None, None], (2, grid.n, grid.n))
        return VectorField(values, grid)

    def __add__(self, other: ConstantVector) -> ConstantVector:
        return ConstantVector(self.x + other.x, self.y + other.y)

    def __sub__(self, other: ConstantVector) -> ConstantVector:
        return ConstantVector(self.x - other.x, self.y - other.y)

    def __mul__(self, factor: float) -> ConstantVector:
        return ConstantVector(self.x * factor, self.y * factor)

    __rmul__ = __mul__


# -- Lie derivatives ----------------------------------------------------------------


def _finish(padded_values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return gridmod.from_padded(padded_values, grid)


def lie_scalar(xi: VectorField, f: ScalarField) -> ScalarField:
    """``xi . grad f`` with the product evaluated dealiased."""
    grid = gridmod.check_same_grid(xi, f)
    pxi, pdf = xi.padded, f.padded_jacobian
    prod = pxi[..., 0, :, :] * pdf[..., 0, :, :] + pxi[..., 1, :, :] * pdf[..., 1, :, :]
    return ScalarField(_finish(prod, grid), grid)


def lie_oneform(xi: VectorField, alpha: OneFormField) -> OneFormField:
    """``(L_xi alpha)_i = xi . grad alpha_i + sum_j alpha_j d_i xi^j``."""
    grid = gridmod.check_same_grid(xi, alpha)
    pxi, pdxi = xi.padded, xi.padded_jacobian
    pa, pda = alpha.padded, alpha.padded_jacobian
    transport = np.einsum("...jyx,...ijyx->...iyx", pxi, pda)
    stretch = np.einsum("...jyx,...jiyx->...iyx", pa, pdxi)
    return OneFormField(_finish(transport + stretch, grid), grid)


def lie_vector(xi: VectorField, v: VectorField) -> VectorField:
    """Vector-field bracket ``xi . grad v - v . grad xi``."""
    grid = gridmod.check_same_grid(xi, v)
    transport = np.einsum("...jyx,...ijyx->...iyx", xi.padded, v.padded_jacobian)
    stretch = np.einsum("...jyx,...ijyx->...iyx", v.padded, xi.padded_jacobian)
    return VectorField(_finish(transport - stretch, grid), grid)


def lie_tensor2(xi: VectorField, tensor: Tensor2Field) -> Tensor2Field:
    """``(L_xi T)_ij = xi . grad T_ij + T_kj d_i xi^k + T_ik d_j xi^k``."""
    grid = gridmod.check_same_grid(xi, tensor)
    pxi, pdxi = xi.padded, xi.padded_jacobian
    pt, pdt = tensor.padded, tensor.padded_jacobian
    transport = np.einsum("...kyx,...ijkyx->...ijyx", pxi, pdt)
    left = np.einsum("...kjyx,...kiyx->...ijyx", pt, pdxi)
    right = np.einsum("...ikyx,...kjyx->...ijyx", pt, pdxi)
    values = _finish(transport + left + right, grid)
    return Tensor2Field(values, grid, symmetric=tensor.symmetric)


def lie(xi: VectorField, field: F) -> F:
    """Lie derivative of any supported field kind along ``xi``."""
    match field:
        case Tensor2Field():
            return lie_tensor2(xi, field)  # type: ignore[return-value]
        case OneFormField():
            return lie_oneform(xi, field)  # type: ignore[return-value]
        case VectorField():
            return lie_vector(xi, field)  # type: ignore[return-value]
        case ScalarField():
            return lie_scalar(xi, field)  # type: ignore[return-value]
        case _:
            msg = f"No Lie derivative for {type(field).__name__}"
            raise TypeError(msg)


def _xis(basis: NoiseBasis | Sequence[VectorField]) -> Sequence[VectorField]:
    return getattr(basis, "xis", basis)  # type: ignore[return-value]


def double_lie(basis: NoiseBasis | Sequence[VectorField], field: F) -> F:
    """``sum_k L_{xi_k} L_{xi_k} field`` for the field's kind."""
    xis = _xis(basis)
    if not xis:
        return field._new(np.zeros_like(field.values))
    total = field._new(np.zeros_like(field.values))
    for xi in xis:
        total = total + lie(xi, lie(xi, field))
    return total


def exterior_d(f: ScalarField) -> OneFormField:
    """``df = (d_x f) dx + (d_y f) dy``."""
    return gridmod.gradient(f)


def product(f: ScalarField, g: ScalarField) -> ScalarField:
    """Dealiased pointwise product, batch axes broadcast."""
    grid = gridmod.check_same_grid(f, g)
    return ScalarField(_finish(f.padded * g.padded, grid), grid)


def scale(f: ScalarField, alpha: OneFormField) -> OneFormField:
    """Dealiased product of a scalar with a one-form."""
    grid = gridmod.check_same_grid(f, alpha)
    return OneFormField(_finish(f.padded[..., None, :, :] * alpha.padded, grid), grid)


def outer(a: GridField, b: GridField) -> Tensor2Field:
    """Dealiased ``a (x) b`` for two one-forms (or vectors)."""
    grid = gridmod.check_same_grid(a, b)
    pa, pb = a.padded, b.padded
    values = _finish(pa[..., :, None, :, :] * pb[..., None, :, :, :], grid)
    return Tensor2Field(values, grid, symmetric=a is b)


def symmetric_outer(a: GridField, b: GridField) -> Tensor2Field:
    """``a (x) b + b (x) a``."""
    t = outer(a, b)
    return Tensor2Field(t.values + np.swapaxes(t.values, -4, -3), t.grid, symmetric=True)


def coordinate_scale(weight: np.ndarray, field: GridField) -> GridField:
    """Multiply by a (possibly discontinuous) coordinate function without dealiasing."""
    return field._new(weight * field.values)


if __name__ == "__main__":
    from lasalt.grid import TorusGrid

    g = TorusGrid(32)
    x, y = g.mesh
    xi = VectorField(np.stack([np.ones_like(x), np.zeros_like(x)]), g)
    print(np.max(np.abs(lie_scalar(xi, ScalarField(np.sin(x), g)).values - np.cos(x))))
