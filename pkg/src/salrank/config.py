"""Flat ``key=value`` configuration text, typed by a dataclass's field annotations."""
from __future__ import annotations

import dataclasses


def parse_key_values(text: str, cls) -> dict:
    """Parse flat ``key=value`` lines (``#`` comments) into typed kwargs for dataclass ``cls``."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = coerce(value, types[key], key)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def coerce(value: str, typ, key: str = "value"):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {value!r} as {typ}") from None
    return value
