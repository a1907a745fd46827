"""``key=value`` text codec shared by model files and CLI run configs.

Values are typed from the dataclass field annotations of the target class:
``int``, ``float``, ``str``, ``bool``, flat int tuples (``45,50``), tuples of
int triples (``2250:1000:16,3:1:32``) and name lists (``AS,MR,MS``).
"""
from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigError


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def format_kv_text(items: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _kind(annotation) -> str:
    if isinstance(annotation, type) and typing.get_origin(annotation) is None:
        text = annotation.__name__
    else:
        text = annotation if isinstance(annotation, str) else repr(annotation)
    text = text.replace("typing.", "").replace(" ", "")
    if "tuple[tuple[int,int,int]" in text:
        return "triples"
    if "tuple[str" in text:
        return "names"
    if "tuple[int" in text:
        return "ints"
    for kind in ("bool", "int", "float", "str"):
        if text.startswith(kind):
            return kind
    raise TypeError(f"unsupported config annotation {annotation!r}")


def encode_value(value, kind: str) -> str:
    if value is None:
        return ""
    if kind == "triples":
        return ",".join(":".join(str(v) for v in t) for t in value)
    if kind in ("ints", "names"):
        return ",".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    return str(value)


def decode_value(text: str, kind: str, key: str = "?"):
    try:
        if kind == "triples":
            triples = tuple(tuple(int(v) for v in t.split(":")) for t in text.split(",") if t)
            if any(len(t) != 3 for t in triples):
                raise ValueError("expected a:b:c items")
            return triples
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v)
        if kind == "names":
            return tuple(v.strip() for v in text.split(",") if v.strip()) or None
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def field_kinds(cls) -> dict[str, str]:
    hints = typing.get_type_hints(cls)
    return {f.name: _kind(hints[f.name]) for f in dataclasses.fields(cls)}


def to_kv(obj) -> dict[str, str]:
    kinds = field_kinds(type(obj))
    return {name: encode_value(getattr(obj, name), kind) for name, kind in kinds.items()}


def from_kv(cls, items: dict[str, str], base=None, strict: bool = True):
    """Build ``cls`` from string items, starting from ``base`` (or defaults)."""
    kinds = field_kinds(cls)
    unknown = sorted(set(items) - set(kinds))
    if strict and unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    values = {k: decode_value(v, kinds[k], k) for k, v in items.items() if k in kinds}
    base = base if base is not None else cls()
    return dataclasses.replace(base, **values)
