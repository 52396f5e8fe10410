"""Run configuration: one JSON document merging every module's settings."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SplitSpec
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .guidance import GuidanceWeights
from .model import ModelConfig
from .synthetic import SyntheticSpec
from .training import TrainConfig

SECTIONS = ("data", "model", "diffusion", "guidance", "training", "eval", "synthetic")


@dataclass(frozen=True)
class DataConfig:
    series: str | None = None
    reports: str | None = None
    text_embeddings: str | None = None
    lookback: int = 36
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(*self.split)


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("full",)
    horizons: tuple[int, ...] = ()
    denormalized: bool = False
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    guidance: GuidanceWeights = field(default_factory=GuidanceWeights)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_model(self, **kw) -> "RunConfig":
        return replace(self, model=replace(self.model, **kw))


_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "diffusion": DiffusionConfig,
    "guidance": GuidanceWeights,
    "training": TrainConfig,
    "eval": EvalConfig,
    "synthetic": SyntheticSpec,
}


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**vals)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(**{s: _build(_TYPES[s], s, d.get(s, {})) for s in SECTIONS})


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply ``section.key`` overrides."""
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    d = copy.deepcopy(d)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"bad override {dotted!r}")
        d.setdefault(section, {})[key] = value
    return config_from_dict(d)
