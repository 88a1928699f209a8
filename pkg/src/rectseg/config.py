"""Flat key=value experiment configs.

One assignment per line, '#' starts a comment, tuples are comma separated.
Keys are the ExperimentConfig field names; anything else is rejected.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Dict, Optional

from .train import ExperimentConfig


class ConfigError(ValueError):
    pass


def _field_kinds() -> Dict[str, type]:
    default = ExperimentConfig()
    return {f.name: type(getattr(default, f.name)) for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str, kind: type):
    try:
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_overrides(text: str, source: str = "<config>") -> Dict[str, object]:
    kinds = _field_kinds()
    out: Dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        if key not in kinds:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = _coerce(key, value, kinds[key])
    return out


def load_config(path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Defaults, then the file (if any), then explicit overrides that are not None."""
    values = parse_overrides(Path(path).read_text(), str(path)) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}=" + (",".join(map(str, v)) if isinstance(v, tuple) else repr(v) if isinstance(v, float) else str(v)))
    return "\n".join(lines) + "\n"
