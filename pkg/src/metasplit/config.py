"""Experiment configuration: INI-style files with [section] headers and CLI overrides."""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .channel import ChannelConfig
from .conformal import CPConfig
from .data import GlyphGenConfig
from .meta import MetaConfig
from .nncore import ConfigError

MODES = ("dnn", "sl", "msl")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "msl"
    cut: int = 3
    seed: int = 0
    zeta: float = 0.0
    data: str = "synth"
    meta_test_fraction: float = 0.2
    test_tasks: int = 10
    meta: MetaConfig = field(default_factory=MetaConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    cp: CPConfig = field(default_factory=CPConfig)
    synth: GlyphGenConfig = field(default_factory=GlyphGenConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cut not in (1, 2, 3):
            raise ConfigError(f"cut must be 1, 2 or 3, got {self.cut}")
        if self.test_tasks < 1:
            raise ConfigError("test_tasks must be >= 1")


# config-file spellings that differ from field names
ALIASES = {
    "meta": {"T": "tasks", "Y": "ways", "K": "shots", "Q": "queries", "M": "images_per_class",
             "E": "epochs"},
    "channel": {"channel_seed": "seed", "p": "power"},
    "experiment": {},
    "cp": {},
    "synth": {},
}
SECTIONS = {"meta": "meta", "channel": "channel", "cp": "cp", "synth": "synth"}


def _coerce(value: str, default):
    v = value.strip()
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    if isinstance(default, tuple):
        return tuple(int(p) for p in v.split(","))
    if default is None:
        if v.lower() in ("", "none", "off"):
            return None
        return int(v)
    return v


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _apply(obj, section: str, items: Iterable[Tuple[str, str]]):
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in items:
        name = ALIASES.get(section, {}).get(key, key)
        if name not in names or name in SECTIONS:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        changes[name] = _coerce(raw, getattr(obj, name))
    return dataclasses.replace(obj, **changes) if changes else obj


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, Dict[str, str]]) -> ExperimentConfig:
    """``overrides`` maps section -> {key: raw string}."""
    top = dict(overrides.get("experiment", {}))
    subs = {name: getattr(cfg, name) for name in SECTIONS}
    for section, items in overrides.items():
        if section == "experiment":
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        subs[section] = _apply(subs[section], section, items.items())
    cfg = dataclasses.replace(cfg, **subs)
    cfg = _apply(cfg, "experiment", top.items())
    # one seed drives model init, task sampling and pool split
    if cfg.meta.seed != cfg.seed:
        cfg = dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, seed=cfg.seed))
    return cfg


def parse_text(text: str) -> Dict[str, Dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                   inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    cp.read_string(text)
    return {s: dict(cp.items(s)) for s in cp.sections()}


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None,
                base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Defaults, then the file, then ``section.key=value`` overrides."""
    cfg = base or ExperimentConfig()
    if path:
        with open(path, encoding="utf-8") as f:
            cfg = apply_overrides(cfg, parse_text(f.read()))
    if overrides:
        cfg = apply_overrides(cfg, parse_assignments(overrides))
    return cfg


def parse_assignments(assignments: Iterable[str]) -> Dict[str, Dict[str, str]]:
    out: Dict[str, Dict[str, str]] = {}
    for a in assignments:
        if "=" not in a:
            raise ConfigError(f"override {a!r} is not key=value")
        key, value = a.split("=", 1)
        section, _, name = key.strip().rpartition(".")
        out.setdefault(section or "experiment", {})[name] = value
    return out


def flatten(cfg: ExperimentConfig) -> List[Tuple[str, str]]:
    """Every setting as ``(section.key, text)``; feeding these back reproduces ``cfg``."""
    rows = []
    for f in dataclasses.fields(cfg):
        if f.name in SECTIONS:
            continue
        rows.append((f"experiment.{f.name}", _fmt(getattr(cfg, f.name))))
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            rows.append((f"{section}.{f.name}", _fmt(getattr(sub, f.name))))
    return rows


def to_ini(cfg: ExperimentConfig) -> str:
    lines: List[str] = []
    current = None
    for key, value in flatten(cfg):
        section, name = key.split(".", 1)
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def from_flat(rows: Iterable[Tuple[str, str]]) -> ExperimentConfig:
    overrides: Dict[str, Dict[str, str]] = {}
    for key, value in rows:
        section, name = key.split(".", 1)
        overrides.setdefault(section, {})[name] = value
    return apply_overrides(ExperimentConfig(), overrides)
