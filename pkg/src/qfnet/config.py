"""Pipeline configuration: sectioned ``key = value`` files plus overrides.

Precedence, lowest to highest: built-in defaults, config file, explicit
overrides (the CLI's ``--set section.key=value`` and dedicated flags).
Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .ir import ArchSpec
from .synth import GenSpec
from .trainer import TrainConfig

OUT_ROOT_ENV = "QFNET_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class CalibSpec:
    per_class: int = 1


@dataclass
class QuantSpec:
    requant_mode: str = "float_multiplier"
    dead_layer: int = 1
    dead_channels: tuple = (0,)


@dataclass
class BenchSpec:
    budget_ms: float = 30.0
    warmup: int = 10
    images: int = 200


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = ""
    data: GenSpec = field(default_factory=GenSpec)
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    calib: CalibSpec = field(default_factory=CalibSpec)
    quant: QuantSpec = field(default_factory=QuantSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "out_dir": self.out_dir}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: _plain(getattr(sec, f.name)) for f in fields(sec)}
        return out


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


SECTIONS = ("data", "arch", "train", "calib", "quant", "bench")
# seeds of sub-specs are driven by the top-level seed, not set per section
_DERIVED = {("data", "seed"), ("train", "seed")}


def _convert(section: str, key: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(p) for p in raw.replace(" ", "").split(",") if p != "")
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(current).__name__}") from None


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line number, for error messages."""
    lines = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = n
            continue
        m = re.match(r"^([^=#;\s][^=]*?)\s*=", s)
        if m:
            lines.setdefault((section, m.group(1).strip().lower()), n)
    return lines


def apply_overrides(cfg: PipelineConfig, values: dict, where: dict = None) -> PipelineConfig:
    """Apply ``{(section, key): raw_string}``; section ``pipeline`` holds seed/out_dir."""
    where = where or {}
    sections = {name: {} for name in SECTIONS}
    top = {}
    for (section, key), raw in values.items():
        loc = f" (line {where[(section, key)]})" if (section, key) in where else ""
        if section == "pipeline":
            if key not in ("seed", "out_dir"):
                raise ConfigError(f"unknown key {key!r} in [pipeline]{loc}")
            top[key] = _convert(section, key, raw, getattr(cfg, key))
            continue
        if section not in sections:
            if (section, None) in where:
                loc = f" (line {where[(section, None)]})"
            raise ConfigError(f"unknown section [{section}]{loc}")
        sec = getattr(cfg, section)
        names = {f.name for f in fields(sec)}
        if key not in names or (section, key) in _DERIVED:
            raise ConfigError(f"unknown key {key!r} in [{section}]{loc}")
        sections[section][key] = _convert(section, key, raw, getattr(sec, key))
    try:
        cfg = replace(cfg, **top)
        for name, kv in sections.items():
            if kv:
                cfg = replace(cfg, **{name: replace(getattr(cfg, name), **kv)})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return _sync_seed(cfg)


def _sync_seed(cfg: PipelineConfig) -> PipelineConfig:
    return replace(cfg, data=replace(cfg.data, seed=cfg.seed), train=replace(cfg.train, seed=cfg.seed))


def parse_config_text(text: str, cfg: Optional[PipelineConfig] = None) -> PipelineConfig:
    cfg = cfg or PipelineConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e).splitlines()[0]) from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[(section, key)] = raw
    return apply_overrides(cfg, values, _key_lines(text))


def validate_config(path=None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        cfg = parse_config_text(p.read_text(), cfg)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg = _sync_seed(cfg)
    if not cfg.out_dir:
        cfg = replace(cfg, out_dir=str(Path(os.environ.get(OUT_ROOT_ENV, "runs")) / f"seed{cfg.seed}"))
    parent = Path(cfg.out_dir).resolve().parent
    while not parent.exists():
        parent = parent.parent
    if not os.access(parent, os.W_OK):
        raise ConfigError(f"output directory {cfg.out_dir} is not writable")
    if cfg.calib.per_class < 1:
        raise ConfigError("[calib] per_class must be >= 1")
    if cfg.quant.requant_mode not in ("float_multiplier", "fixed_multiplier"):
        raise ConfigError("[quant] requant_mode must be float_multiplier or fixed_multiplier")
    if cfg.bench.images < 1 or cfg.bench.budget_ms <= 0:
        raise ConfigError("[bench] images must be >= 1 and budget_ms > 0")
    return cfg
