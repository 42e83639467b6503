"""Run configuration: nested sections with defaults, YAML files and ``--set`` overrides.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
``--set section.key=value`` pairs, then dedicated command-line flags. The
resolved configuration is written next to every output so a run can be
repeated from it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class ScheduleSection:
    T: int = 50
    kind: str = "linear"
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class BackboneSection:
    widths: list = field(default_factory=lambda: [8, 16, 32])
    mid_blocks: int = 3
    emb_dim: int = 64
    epochs: int = 50
    batch_size: int = 32
    lr: float = 2e-3
    condition_drop_rate: float = 0.1


@dataclass
class LEPSection:
    arch: str = "unet"
    p_max: int = 9
    normalize_t: bool = False
    unet_widths: list = field(default_factory=lambda: [64, 128, 256, 512])
    unet_bottleneck: int = 1024
    mlp_hidden: list = field(default_factory=lambda: [512, 256, 128, 64])


@dataclass
class TrainingSection:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    holdout_fraction: float = 0.0
    patience: int | None = None


@dataclass
class GuidanceSection:
    T: int = 50
    S: int | None = None
    beta: float = 1.6
    cfg_scale: float = 8.0
    grad_eps: float = 1e-8
    clip_denoised: list | None = field(default_factory=lambda: [0.0, 1.0])
    simplify: bool = False
    simplifier: str = "morphological"


@dataclass
class DataSection:
    n: int = 300
    dims: list = field(default_factory=lambda: [32, 32])


@dataclass
class EvaluationSection:
    extractor: str = "sobel"
    threshold: float = 0.5
    erode: bool = True


@dataclass
class RunConfig:
    seed: int | None = None
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    lep: LEPSection = field(default_factory=LEPSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    data: DataSection = field(default_factory=DataSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def write(self, path) -> Path:
        from .data import atomic_write

        atomic_write(path, self.dump().encode())
        return Path(path)

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required (pass --seed or set 'seed' in the config file)")
        return int(self.seed)


def _section_classes():
    return {f.name: f.default_factory().__class__ for f in dataclasses.fields(RunConfig) if f.name != "seed"}


def _coerce(value, current, where):
    """Match the type of a YAML/flag value to the default's type where that is unambiguous."""
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def from_dict(d: dict | None) -> RunConfig:
    """Build a config from nested mappings, rejecting unknown keys."""
    cfg = RunConfig()
    d = dict(d or {})
    classes = _section_classes()
    for key, value in d.items():
        if key == "seed":
            cfg.seed = None if value is None else _coerce(value, 0, "seed")
            continue
        if key not in classes:
            raise ConfigError(f"unknown config section {key!r}; known: ['seed', {', '.join(map(repr, classes))}]")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be a mapping")
        section = getattr(cfg, key)
        names = {f.name for f in dataclasses.fields(section)}
        for k, v in value.items():
            if k not in names:
                raise ConfigError(f"unknown key {key}.{k}; known: {sorted(names)}")
            setattr(section, k, _coerce(v, getattr(section, k), f"{key}.{k}"))
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping at top level")
    return from_dict(data)


def apply_override(cfg: RunConfig, assignment: str) -> RunConfig:
    """Apply one ``section.key=value`` (or ``seed=value``) override; value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    dotted, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    parts = dotted.strip().split(".")
    if parts == ["seed"]:
        patch = {"seed": value}
    elif len(parts) == 2:
        patch = {parts[0]: {parts[1]: value}}
    else:
        raise ConfigError(f"override key {dotted!r} must be 'seed' or 'section.key'")
    merged = cfg.to_dict()
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k].update(v)
        else:
            merged[k] = v
    return from_dict(merged)
