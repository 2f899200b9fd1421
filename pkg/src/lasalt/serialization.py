from __future__ import annotations

import json
import logging
from typing import TYPE_CHECKING, Any, Literal

import upath

from lasalt.errors import ConfigError


if TYPE_CHECKING:
    import os


logger = logging.getLogger(__name__)

SerializeFormatStr = Literal["json", "toml"]


def serialize(data: Any, fmt: SerializeFormatStr, **kwargs: Any) -> str:
    """Serialize given json-like object to given format.

    Args:
        data: The data to serialize
        fmt: The serialization format
        kwargs: Keyword arguments passed to the dumper function
    """
    match fmt:
        case "json":
            return json.dumps(data, indent=2, sort_keys=True, **kwargs) + "\n"
        case "toml" if isinstance(data, dict):
            import tomli_w

            return tomli_w.dumps(data, **kwargs)
        case _:
            raise TypeError(fmt)


def deserialize(data: str, fmt: SerializeFormatStr, **kwargs: Any) -> Any:
    """Deserialize given string from given format.

    Args:
        data: The data to deserialize
        fmt: The serialization format
        kwargs: Keyword arguments passed to the loader function
    """
    match fmt:
        case "json":
            return json.loads(data, **kwargs)
        case "toml":
            import tomllib

            return tomllib.loads(data, **kwargs)
        case _:
            raise TypeError(fmt)


def format_for(path: str | os.PathLike[str]) -> SerializeFormatStr:
    """Pick the format from the file suffix."""
    match upath.UPath(path).suffix.lower():
        case ".json":
            return "json"
        case ".toml":
            return "toml"
        case suffix:
            msg = f"Unsupported config format {suffix!r} for {path}"
            raise ConfigError(msg)


def load_file(path: str | os.PathLike[str]) -> Any:
    """Read and parse a JSON or TOML file from any fsspec location."""
    p = upath.UPath(path)
    fmt = format_for(p)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        msg = f"Config file not found: {path}"
        raise ConfigError(msg) from e
    try:
        return deserialize(text, fmt)
    except ValueError as e:  # JSONDecodeError and TOMLDecodeError are ValueErrors
        msg = f"Could not parse {path}: {e}"
        raise ConfigError(msg) from e


def dump_file(data: Any, path: str | os.PathLike[str]) -> None:
    p = upath.UPath(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(serialize(data, format_for(p)), encoding="utf-8")
    logger.debug("Wrote %s", p)


if __name__ == "__main__":
    print(serialize({"grid": {"n": 32}}, "json"))
