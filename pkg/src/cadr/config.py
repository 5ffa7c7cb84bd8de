"""Flat key=value config files and typed coercion into dataclass configs.

Grammar: one `key = value` pair per line, `#` starts a comment, blank lines
ignored. Values are untyped text until coerced against a target dataclass.
"""

from __future__ import annotations

import dataclasses
import typing

import numpy as np

from .errors import ConfigError

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_kv_text(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse key=value lines into an ordered dict of raw strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def load_kv_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), source=str(path))


def _coerce_value(raw: str, typ, key: str):
    # Optional[T] unwraps to T; "none" names the None value explicitly.
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.lower() == "none":
            return None
        typ = args[0]
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"key {key}: expected a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key}: expected an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key}: expected a number, got {raw!r}") from None
    if typ is str:
        return raw
    if typ is np.ndarray:
        if raw == "":
            raise ConfigError(f"key {key}: empty vector")
        try:
            return np.array([float(tok) for tok in raw.split(",")], dtype=np.float64)
        except ValueError:
            raise ConfigError(f"key {key}: expected comma-separated numbers, got {raw!r}") from None
    raise ConfigError(f"key {key}: unsupported config field type {typ!r}")


def coerce_config(values: dict[str, str], cls, *, ignore_unknown: bool = False):
    """Build dataclass `cls` from raw string values, type-checking each field.

    Unknown keys raise ConfigError unless ignore_unknown is set (used when one
    file feeds several configs). Missing keys fall back to field defaults;
    fields without defaults must be present.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            if ignore_unknown:
                continue
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce_value(raw, hints[key], key)
    for name, field in fields.items():
        if name in kwargs:
            continue
        if (
            field.default is dataclasses.MISSING
            and field.default_factory is dataclasses.MISSING
        ):
            raise ConfigError(f"missing required config key {name!r} for {cls.__name__}")
    return cls(**kwargs)


def parse_overrides(args: list[str]) -> dict[str, str]:
    """Collect --key=value tokens; anything else is rejected."""
    out: dict[str, str] = {}
    for tok in args:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigError(f"unrecognized argument {tok!r} (expected --key=value)")
        key, value = tok[2:].split("=", 1)
        if not key:
            raise ConfigError(f"unrecognized argument {tok!r} (empty key)")
        out[key] = value
    return out
