"""Run configuration: one file-loadable object covering every knob.

A run config is a JSON object with optional sections; every field has a
default, so an empty file (or no file) is a valid configuration. Unknown
top-level keys and unknown fields inside a section are hard errors rather
than silent no-ops. The command line applies on top via override_config,
giving the precedence flag > config file > default.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import DetectorModel
from .errors import ConfigError
from .metrics import EvalConfig
from .tracker import PipelineConfig
from .training import TrainConfig


@dataclass(frozen=True)
class EncoderConfig:
    stride: int = 8
    position_weight: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if int(self.stride) != self.stride or self.stride < 1:
            raise ConfigError(f"stride must be a positive int, got {self.stride!r}")
        object.__setattr__(self, "stride", int(self.stride))
        if self.position_weight < 0:
            raise ConfigError(
                f"position_weight must be >= 0, got {self.position_weight}"
            )
        object.__setattr__(self, "normalize", bool(self.normalize))


@dataclass(frozen=True)
class SceneConfig:
    """Shape of the generated benchmark: per-video scene geometry plus how
    many videos and instances the suite draws."""

    width: int = 128
    height: int = 128
    frame_count: int = 24
    background: str = "flat"
    n_videos: int = 20
    min_instances: int = 2
    max_instances: int = 4

    def __post_init__(self):
        for name in ("width", "height", "frame_count", "n_videos",
                     "min_instances", "max_instances"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.background not in ("flat", "gradient"):
            raise ConfigError(f"unknown background {self.background!r}")
        if self.min_instances > self.max_instances:
            raise ConfigError(
                f"min_instances {self.min_instances} exceeds "
                f"max_instances {self.max_instances}"
            )


@dataclass(frozen=True)
class PathConfig:
    """Default file locations; commands take explicit flags that win."""

    dataset: str = "dataset"
    params: str = "head_params.bin"
    predictions: str = "predictions.json"
    curve: str = "loss_curve.csv"
    report: str = ""  # empty = stdout

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, str):
                raise ConfigError(f"path field {f.name} must be a string")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    detector: DetectorModel = field(default_factory=DetectorModel)
    scene: SceneConfig = field(default_factory=SceneConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def __post_init__(self):
        if isinstance(self.seed, bool) or int(self.seed) != self.seed:
            raise ConfigError(f"seed must be an int, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))


_SECTION_TYPES = {
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "pipeline": PipelineConfig,
    "eval": EvalConfig,
    "detector": DetectorModel,
    "scene": SceneConfig,
    "paths": PathConfig,
}


def _build_section(name, cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in config section {name!r}: {', '.join(unknown)}"
        )
    return cls(**data)


def load_run_config(path=None):
    """Load a RunConfig from a JSON file; path=None gives all defaults."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    unknown = sorted(set(data) - set(_SECTION_TYPES) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    if "seed" in data:
        kwargs["seed"] = data["seed"]
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            kwargs[name] = _build_section(name, cls, data[name])
    return RunConfig(**kwargs)


def override_config(cfg: RunConfig, section: str, **updates) -> RunConfig:
    """Replace fields of one section, skipping None values (unset flags)."""
    live = {k: v for k, v in updates.items() if v is not None}
    if not live:
        return cfg
    if section == "seed":
        raise ConfigError("seed is a top-level field, not a section")
    new_section = dataclasses.replace(getattr(cfg, section), **live)
    return dataclasses.replace(cfg, **{section: new_section})


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-JSON view of a RunConfig, mostly for debugging and tests."""
    out = {"seed": cfg.seed}
    for name in _SECTION_TYPES:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    for section in out.values():
        if isinstance(section, dict):
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
    return out
