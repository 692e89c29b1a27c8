"""Strict JSON <-> dataclass conversion; unknown keys are errors."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path


class ConfigKeyError(ValueError):
    pass


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def from_dict(cls, data, where: str = ""):
    where = where or cls.__name__
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigKeyError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigKeyError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = hints.get(key)
        if _is_dataclass_type(tp):
            kwargs[key] = from_dict(tp, value, f"{where}.{key}")
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigKeyError(f"{where}: {exc}") from None


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def load_json(cls, path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigKeyError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return from_dict(cls, data, str(path))


def config_hash(obj) -> bytes:
    """32-byte sha256 of the canonical JSON form."""
    payload = json.dumps(to_dict(obj) if dataclasses.is_dataclass(obj) else obj,
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).digest()
