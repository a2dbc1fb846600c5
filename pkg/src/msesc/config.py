"""Run configuration files.

A run configuration is an INI file.  Recognised sections::

    [run]          RunConfig fields (seed, epochs, batch_size, lr0, ...)
    [model]        ModelConfig fields (num_classes, streams, widths, ...)
    [synth]        seed, duration_s, background, classes, count
    [synth.<kind>] per-class overrides: count, and "<param> = low, high" ranges

Sequences are comma-separated; booleans accept true/false/yes/no/1/0.
Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .audio import DEFAULT_RANGES, ClassSpec, SynthSpec
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    epochs: int = 150
    batch_size: int = 16
    lr0: float = 1e-3
    lr_decay_every: int = 100
    lr_decay_factor: float = 10.0
    noise_fraction: float = 1.0 / 16
    epoch_size: int = 0  # 0: one sample per training clip
    augmentation: bool = True
    fusion: bool = True
    uncertainty: bool = True
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalization)")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ConfigError("noise_fraction must lie in [0, 1)")

    @property
    def effective_noise_fraction(self) -> float:
        return self.noise_fraction if self.uncertainty else 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        return cls(**d)

    def hash(self) -> str:
        """Digest of every setting that influences results (``out_dir`` excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        raw = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(raw).hexdigest()[:16]

    def replace(self, **changes) -> RunConfig:
        model_changes = changes.pop("model", None)
        out = dataclasses.replace(self, **changes)
        if model_changes:
            out.model = dataclasses.replace(self.model, **model_changes)
        return out


def _coerce(raw: str, default, name: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _apply_section(cls, section: configparser.SectionProxy, skip=()):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kwargs = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        kwargs[key] = _coerce(raw, getattr(defaults, key), f"{section.name}.{key}")
    return kwargs


def load_run_config(path: str | Path) -> RunConfig:
    cp = _read(path)
    model_kwargs = _apply_section(ModelConfig, cp["model"]) if cp.has_section("model") else {}
    run_kwargs = _apply_section(RunConfig, cp["run"], skip=("model",)) if cp.has_section("run") else {}
    try:
        return RunConfig(model=ModelConfig(**model_kwargs), **run_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_synth_spec(path: str | Path) -> SynthSpec:
    cp = _read(path)
    if not cp.has_section("synth"):
        raise ConfigError(f"{path}: no [synth] section")
    sec = cp["synth"]
    allowed = {"seed", "duration_s", "background", "classes", "count"}
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"[synth] unknown key {key!r}")
    kinds = [s.strip() for s in sec.get("classes", "tone, chirp, click-train, noise-band").split(",") if s.strip()]
    default_count = sec.getint("count", 40)
    classes = []
    for kind in kinds:
        if kind not in DEFAULT_RANGES:
            raise ConfigError(f"unknown class kind {kind!r}")
        count = default_count
        ranges = {}
        name = f"synth.{kind}"
        if cp.has_section(name):
            for key, raw in cp[name].items():
                if key == "count":
                    count = int(raw)
                    continue
                if key not in DEFAULT_RANGES[kind]:
                    raise ConfigError(f"[{name}] unknown parameter {key!r}")
                lo_hi = tuple(float(v) for v in raw.split(","))
                if len(lo_hi) == 1:
                    lo_hi = (lo_hi[0], lo_hi[0])
                ranges[key] = lo_hi
        classes.append(ClassSpec(kind, count, ranges))
    return SynthSpec(
        classes=classes,
        seed=sec.getint("seed", 0),
        duration_s=sec.getfloat("duration_s", 5.0),
        background=sec.getfloat("background", 0.01),
    )


def _read(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    return cp


def dump_run_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to INI text (round-trips through ``load_run_config``)."""
    lines = ["[run]"]
    for f in dataclasses.fields(RunConfig):
        if f.name == "model":
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    lines.append("")
    lines.append("[model]")
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.model, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
