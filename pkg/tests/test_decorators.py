# mypy: disable-error-code="attr-defined"
from __future__ import annotations

import pytest

from lasalt.decorators import cache_with_transforms
from lasalt.grid import TorusGrid
from lasalt.noise import parse_noise_spec


def test_equivalent_specs_share_a_key() -> None:
    """Raw noise configs that parse to the same spec hit the same entry."""
    calls = 0

    @cache_with_transforms(arg_transformers={0: parse_noise_spec})
    def n_fields(spec) -> int:
        nonlocal calls
        calls += 1
        return len(parse_noise_spec(spec))

    assert n_fields("canonical(0.1)") == 2
    assert n_fields(parse_noise_spec("canonical(0.1)")) == 2
    assert calls == 1
    assert n_fields.cache_info()["cache_size"] == 1


def test_unhashable_config_lists() -> None:
    """List-valued noise sections are cached through their parsed form."""

    @cache_with_transforms(arg_transformers={0: parse_noise_spec})
    def consts(spec) -> list[tuple[float, float]]:
        return [xi.const for xi in parse_noise_spec(spec).xis]

    raw = [{"const": [1.0, 0.0]}, {"const": [0.0, 1.0]}]
    assert consts(raw) == [(1.0, 0.0), (0.0, 1.0)]
    assert consts([dict(entry) for entry in raw]) == [(1.0, 0.0), (0.0, 1.0)]
    assert consts.cache_info()["cache_size"] == 1


def test_kwarg_transformer() -> None:
    """Grids given as sizes or as objects map to one key."""

    def as_grid(value) -> TorusGrid:
        return value if isinstance(value, TorusGrid) else TorusGrid(value)

    @cache_with_transforms(kwarg_transformers={"grid": as_grid})
    def area(*, grid) -> float:
        return as_grid(grid).area

    area(grid=16)
    area(grid=TorusGrid(16))
    assert area.cache_info()["cache_size"] == 1


def test_different_kwarg_orders() -> None:
    """Keyword order does not change the cache key."""

    @cache_with_transforms()
    def step_count(*, t_end: float, dt: float) -> int:
        return round(t_end / dt)

    assert step_count(t_end=1.0, dt=0.1) == 10
    assert step_count(dt=0.1, t_end=1.0) == 10
    assert step_count.cache_info()["cache_size"] == 1


def test_cache_clear() -> None:
    """Clearing drops every entry."""

    @cache_with_transforms()
    def square(x: int) -> int:
        return x**2

    square(2)
    square(3)
    assert square.cache_info()["cache_size"] == 2
    square.cache_clear()
    assert square.cache_info()["cache_size"] == 0


def test_error_handling() -> None:
    """Failed calls are not cached."""

    @cache_with_transforms()
    def build(n: int) -> TorusGrid:
        return TorusGrid(n)

    with pytest.raises(ValueError, match="even"):
        build(7)
    assert build.cache_info()["cache_size"] == 0


if __name__ == "__main__":
    pytest.main([__file__])
