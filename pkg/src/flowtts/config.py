"""Flat key=value run configuration.

One file configures the whole pipeline. Keys are "<section>.<field>"
where each section maps onto one config dataclass; unknown keys fail
fast with the list of valid keys so typos never silently fall back to
defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

from .ar_model import ArConfig
from .flowmatch import FlowConfig
from .preference import DpoConfig
from .toytask import ToyWorldConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs, bundled; sections share the flat namespace."""

    world: ToyWorldConfig = field(default_factory=ToyWorldConfig)
    am: ArConfig = field(default_factory=ArConfig)
    fm: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def valid_keys() -> list[str]:
    out = []
    for section, factory in _SECTIONS.items():
        out.extend(f"{section}.{f.name}" for f in fields(factory()))
    return sorted(out)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        elem = float if any(isinstance(x, float) for x in default) else int
        return tuple(elem(part) for part in raw.split(",") if part.strip() != "")
    return raw


def parse_kv(text: str) -> dict[str, str]:
    """'key = value' lines; '#' comments and blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = body.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def build_run_config(kv: dict[str, str]) -> RunConfig:
    """Apply flat overrides onto defaults; unknown keys fail with the full list."""
    per_section: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, raw in kv.items():
        section, _, fname = key.partition(".")
        factory = _SECTIONS.get(section)
        known = {f.name: f for f in fields(factory())} if factory else {}
        if factory is None or fname not in known:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}"
            )
        default = getattr(factory(), fname)
        per_section[section][fname] = _parse_value(raw, default)
    return RunConfig(**{
        name: replace(factory(), **per_section[name])
        for name, factory in _SECTIONS.items()
    })


def load_run_config(path: str) -> RunConfig:
    with open(path) as f:
        return build_run_config(parse_kv(f.read()))


def echo_config(rc: RunConfig) -> str:
    """Resolved flat key=value text; parsing it back reproduces ``rc``."""
    lines = []
    for section in _SECTIONS:
        cfg = getattr(rc, section)
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
