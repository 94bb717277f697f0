"""Plain ``key=value`` config files mapped onto dataclasses.

Unknown keys are errors.  Values are parsed according to the field's
default: tuples are comma-separated, bools accept true/false/1/0.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping, TypeVar

C = TypeVar("C")


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_file(path: str | Path) -> dict[str, str]:
    return parse_text(Path(path).read_text(encoding="utf-8"))


def _coerce(value: str, default: Any, key: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(v) for v in items)
            if default and isinstance(default[0], float):
                return tuple(float(v) for v in items)
            return tuple(items)
        if default is None:
            return None if value in ("", "none", "None") else value
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} like {default!r}") from None


def from_mapping(cls: type[C], values: Mapping[str, Any], base: C | None = None) -> C:
    """Build ``cls`` from string (or already typed) values layered on ``base``."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    current = dataclasses.asdict(base) if base is not None else {}
    for f in fields.values():
        if f.name not in current:
            if f.default is not dataclasses.MISSING:
                current[f.name] = f.default
            elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
                current[f.name] = f.default_factory()  # type: ignore[misc]
    for key, value in values.items():
        name = key.replace("-", "_")
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        if isinstance(value, str):
            value = _coerce(value, current.get(name), key)
        current[name] = value
    for name, val in current.items():
        if isinstance(val, list):
            current[name] = tuple(val)
    return cls(**current)


def to_text(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif v is None:
            v = "none"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
