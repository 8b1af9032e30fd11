"""Flat ``key.path = value`` run configuration.

One assignment per line, ``#`` starts a comment.  Values are read as JSON
when they parse (numbers, ``true``/``false``, ``null``, quoted strings,
lists) and kept as bare strings otherwise::

    model.d_model = 64
    train.lr = 3e-3
    cl.strategies = VANILLA, ADAPTERCL
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict:
    out: dict = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"{source}:{n}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


def parse_overrides(items: Iterable[str]) -> dict:
    return parse_lines(items, "--set")


def resolve(defaults: Mapping, *layers: Mapping) -> dict:
    """Later layers win; every key must already exist in ``defaults``."""
    out = dict(defaults)
    for layer in layers:
        for key, value in layer.items():
            if key not in defaults:
                known = ", ".join(sorted(defaults))
                raise ConfigError(f"unknown config key {key!r}; known keys: {known}")
            out[key] = value
    return out


def section(cfg: Mapping, prefix: str) -> dict:
    """Sub-dict of ``prefix.*`` keys with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def as_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, list):
        return value
    if isinstance(value, str):
        return [parse_value(v) for v in value.split(",") if v.strip()]
    return [value]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(canonical_json(dict(cfg)).encode("utf-8")).hexdigest()


def dump_config(cfg: Mapping) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(cfg.items()))
