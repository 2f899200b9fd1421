from __future__ import annotations

from functools import wraps
import threading
from typing import TYPE_CHECKING, Any, ParamSpec, TypeVar


if TYPE_CHECKING:
    from collections.abc import Callable


P = ParamSpec("P")
R = TypeVar("R")


def _identity(x: Any) -> Any:
    return x


def cache_with_transforms(
    *,
    arg_transformers: dict[int, Callable[[Any], Any]] | None = None,
    kwarg_transformers: dict[str, Callable[[Any], Any]] | None = None,
) -> Callable[[Callable[P, R]], Callable[P, R]]:
    """Thread-safe memoisation keyed on transformed arguments.

    Transformers turn unhashable or equivalent inputs (raw config snippets,
    grids given as sizes) into a canonical hashable key. Failed calls are not
    cached. Adds ``cache_info()`` and ``cache_clear()`` to the wrapped function.

    Args:
        arg_transformers: Dict mapping positional args indices to transformer functions
        kwarg_transformers: Dict mapping kwargs names to transformer functions
    """
    arg_transformers = arg_transformers or {}
    kwarg_transformers = kwarg_transformers or {}

    def decorator(func: Callable[P, R]) -> Callable[P, R]:
        cache: dict[tuple[Any, ...], R] = {}
        lock = threading.RLock()

        def make_key(args: tuple[Any, ...], kwargs: dict[str, Any]) -> tuple[Any, ...]:
            key_args = tuple(
                arg_transformers.get(i, _identity)(arg) for i, arg in enumerate(args)
            )
            key_kwargs = tuple(
                (k, kwarg_transformers.get(k, _identity)(v))
                for k, v in sorted(kwargs.items())
            )
            return key_args, key_kwargs

        @wraps(func)
        def wrapper(*args: P.args, **kwargs: P.kwargs) -> R:
            key = make_key(args, kwargs)
            with lock:
                if key in cache:
                    return cache[key]
                result = func(*args, **kwargs)
                cache[key] = result
                return result

        def cache_info() -> dict[str, int]:
            return {"cache_size": len(cache)}

        def cache_clear() -> None:
            with lock:
                cache.clear()

        wrapper.cache_info = cache_info  # type: ignore[attr-defined]
        wrapper.cache_clear = cache_clear  # type: ignore[attr-defined]
        wrapper.cache = cache  # type: ignore[attr-defined]
        return wrapper

    return decorator
