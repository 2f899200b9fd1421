from __future__ import annotations

import contextlib
import functools
import hashlib
import importlib
import json
import logging
import re
import time
from typing import TYPE_CHECKING, Any


if TYPE_CHECKING:
    from collections.abc import Callable, Iterator


logger = logging.getLogger(__name__)

_CALL_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def get_repr(_obj: Any, *args: Any, **kwargs: Any) -> str:
    """Get a suitable __repr__ string for an object.

    Args:
        _obj: The object to get a repr for.
        args: Arguments for the repr
        kwargs: Keyword arguments for the repr
    """
    classname = type(_obj).__name__
    parts = [repr(v) for v in args]
    kw_parts = [f"{k}={v!r}" for k, v in kwargs.items()]
    sig = ", ".join(parts + kw_parts)
    return f"{classname}({sig})"


def canonical_json(obj: Any) -> str:
    """Dump a json-like object with sorted keys and no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def get_hash(obj: Any, hash_length: int | None = 12) -> str:
    """Get a Md5 hash for given object.

    Mappings and lists are hashed via their canonical JSON dump so that key
    order does not matter, bytes are hashed as they are.

    Args:
        obj: The object to get a hash for
        hash_length: Optional cut-off value to limit length
    """
    match obj:
        case bytes() | bytearray():
            data = bytes(obj)
        case dict() | list() | tuple():
            data = canonical_json(obj).encode("utf-8")
        case _:
            data = str(obj).encode("utf-8")
    return hashlib.md5(data).hexdigest()[:hash_length]


def parse_call(text: str) -> tuple[str, tuple[float, ...]] | None:
    """Split a preset expression like ``"theta_blob(3.1, 3.1, 0.6, 1)"``.

    Returns None if the text is not of the form ``name`` or ``name(args)``.
    """
    match = _CALL_RE.match(text)
    if match is None:
        return None
    name, raw_args = match.groups()
    if not raw_args or not raw_args.strip():
        return name, ()
    try:
        args = tuple(float(a) for a in raw_args.split(","))
    except ValueError:
        return None
    return name, args


@functools.cache
def resolve(name: str) -> Any:
    """Resolve a dotted path like ``"lasalt.runconfig.taylor_green"`` to an object.

    Imports the longest importable module prefix and walks the remaining
    attributes. Propagates ImportError / AttributeError if nothing is found.
    """
    parts = name.split(".")
    for split in range(len(parts), 0, -1):
        try:
            found = importlib.import_module(".".join(parts[:split]))
        except ModuleNotFoundError:
            continue
        for attr in parts[split:]:
            found = getattr(found, attr)
        return found
    msg = f"Could not import {name!r}"
    raise ImportError(msg)


def as_callable(name: str) -> Callable[..., Any]:
    obj = resolve(name)
    if not callable(obj):
        msg = f"{name!r} does not resolve to a callable"
        raise TypeError(msg)
    return obj


@contextlib.contextmanager
def log_duration(what: str, level: int = logging.INFO) -> Iterator[None]:
    """Log the wall time a block took."""
    start = time.perf_counter()
    try:
        yield
    finally:
        logger.log(level, "%s took %.2f s", what, time.perf_counter() - start)


if __name__ == "__main__":
    print(get_hash({"b": 1, "a": [1, 2]}))
