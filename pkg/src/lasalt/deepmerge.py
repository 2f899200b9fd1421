"""Schema-aware deep merging of a user document over documented defaults."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

from lasalt.errors import ConfigError


if TYPE_CHECKING:
    from collections.abc import Callable, Mapping


def merge_dict(merger: StrictMerger, source: Mapping, target: Mapping, path: str) -> dict:
    """Merge two mappings recursively, rejecting keys the target does not know.

    Args:
        merger: The StrictMerger instance handling the merge operation
        source: The user mapping whose values take precedence
        target: The defaults mapping; its keys define the allowed schema
        path: Dotted location of the mappings, used in error messages

    Example:
        ```python
        merger = StrictMerger()
        merger.merge({"grid": {"n": 32}}, {"grid": {"n": None, "length": 6.28}})
        # {'grid': {'n': 32, 'length': 6.28}}
        ```
    """
    result = dict(target)
    for key, source_value in source.items():
        key_path = f"{path}.{key}" if path else str(key)
        if key not in result:
            msg = f"Unknown config key {key_path!r}"
            raise ConfigError(msg)
        target_value = result[key]
        if isinstance(target_value, dict):
            result[key] = merger.merge(source_value, target_value, key_path)
        else:
            # lists and scalars replace the default
            result[key] = source_value
    return result


class StrictMerger:
    """Deep merge that treats the target as a closed schema.

    Mappings recurse, every other value replaces the default.
    """

    def __init__(self, merge_mapping: Callable[..., dict] = merge_dict) -> None:
        self.merge_mapping = merge_mapping

    def merge(self, source: Mapping, target: Mapping, path: str = "") -> dict:
        """Merge ``source`` over ``target``.

        Args:
            source: The user document
            target: The defaults document
            path: Dotted prefix for error messages

        Raises:
            ConfigError: On unknown keys or a scalar given where a table is expected
        """
        if not isinstance(source, dict):
            msg = f"Config section {path or '<root>'!r} must be a table, got {source!r}"
            raise ConfigError(msg)
        return self.merge_mapping(self, source, target, path)


def missing_keys(document: Mapping[str, Any], path: str = "") -> list[str]:
    """Dotted paths of all entries still holding the ``None`` placeholder."""
    missing = []
    for key, value in document.items():
        key_path = f"{path}.{key}" if path else str(key)
        if value is None:
            missing.append(key_path)
        elif isinstance(value, dict):
            missing.extend(missing_keys(value, key_path))
    return missing


if __name__ == "__main__":
    merger = StrictMerger()
    result = merger.merge({"grid": {"n": 32}}, {"grid": {"n": None, "length": 6.28}})
    print(result)
