"""UTF-8 ``key=value`` config files.

Lists are comma separated; detection paths are written ``3x1,5x1``
(kernel x dilation). Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Dict, get_type_hints


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> Dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"), str(path))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ",".join("x".join(str(v) for v in item) for item in value)
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_kv(values: Dict[str, Any]) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in values.items())


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def coerce(value: str, annotation: Any, default: Any) -> Any:
    """Parse ``value`` into the type of ``default`` (or ``annotation``)."""
    kind = type(default) if default is not None else annotation
    if kind is bool:
        return _parse_bool(value)
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    if kind is str:
        return value
    if kind in (tuple, list) or isinstance(default, (tuple, list)):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if default and isinstance(default[0], (tuple, list)):
            return tuple(tuple(int(x) for x in p.split("x")) for p in parts)
        elem = type(default[0]) if default else float
        return tuple(elem(p) for p in parts)
    return value


def dataclass_from_kv(cls, values: Dict[str, str], strict: bool = True):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = get_type_hints(cls)
    unknown = sorted(set(values) - set(fields))
    if unknown and strict:
        raise ConfigError(f"unknown key(s) {unknown}; valid keys: {sorted(fields)}")
    kwargs = {}
    for name, raw in values.items():
        if name not in fields:
            continue
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        try:
            kwargs[name] = coerce(raw, hints.get(name), default)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from exc
    return cls(**kwargs)


def dataclass_to_kv(obj) -> Dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
