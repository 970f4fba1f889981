"""Strict dataclass <-> dict conversion used by checkpoints and the CLI."""

from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigError


def dataclass_to_dict(obj) -> dict:
    """Recursive asdict; tuples become lists (JSON-friendly)."""
    return dataclasses.asdict(obj)


def dataclass_from_dict(cls, data: dict, context: str = ""):
    """Build ``cls`` from ``data``, rejecting unknown keys.

    JSON has no tuples, so lists are coerced back for tuple-annotated fields.
    Nested dataclass fields recurse.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{context or cls.__name__}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{context or cls.__name__}: unknown keys {unknown}")
    try:
        hints = typing.get_type_hints(cls)
    except Exception:
        hints = {}
    kwargs = {}
    for key, value in data.items():
        hint = hints.get(key, names[key].type)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = dataclass_from_dict(hint, value, context=f"{context}.{key}" if context else key)
        elif isinstance(value, list) and "tuple" in str(hint).lower():
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)
