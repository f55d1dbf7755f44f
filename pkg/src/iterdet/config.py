"""Run configuration: one JSON document covering data, model, training and inference."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .detector import DetectorConfig
from .iterative import IterConfig
from .synthetic import SceneSpec
from .train import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_scenes: int = 2000
    val_scenes: int = 200
    jobs: int = 1  # worker processes for scene generation only

    def __post_init__(self):
        if self.train_scenes < 1 or self.val_scenes < 1 or self.jobs < 1:
            raise ValueError(f"invalid data config {self}")


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: IterConfig = field(default_factory=IterConfig)

    _SECTIONS = {"scene": SceneSpec, "data": DataConfig, "detector": DetectorConfig,
                 "train": TrainConfig, "infer": IterConfig}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config 'version' must be {CONFIG_VERSION}, got {d.get('version')!r}")
        unknown = set(d) - set(cls._SECTIONS) - {"version"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _section(c, d[k], k) for k, c in cls._SECTIONS.items() if k in d})

    def to_dict(self) -> dict:
        out = {"version": CONFIG_VERSION}
        for name in self._SECTIONS:
            sec = getattr(self, name)
            out[name] = sec.to_dict() if hasattr(sec, "to_dict") else asdict(sec)
        return out

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with ``values`` replaced in ``section``; ``None`` values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        try:
            return replace(self, **{section: replace(getattr(self, section), **values)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section} override: {exc}") from exc


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)
