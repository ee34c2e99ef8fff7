"""Run configuration files: one JSON object with per-subsystem sections.

Sections mirror the library dataclasses (backbone, model, train,
augmentation, metrics).  Unknown sections or keys are rejected with the
offending key path, so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import AugmentationConfig
from .errors import ConfigError
from .metrics import MetricConfig
from .net import ModelConfig
from .train import TrainConfig

_SECTIONS = {
    "backbone": BackboneConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "augmentation": AugmentationConfig,
    "metrics": MetricConfig,
}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    use_augmentation: bool = False

    def model_config(self) -> ModelConfig:
        """The model section with the backbone section wired in."""
        return dataclasses.replace(self.model, backbone=self.backbone)

    def to_dict(self) -> dict:
        payload = {
            name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS
        }
        payload["model"].pop("backbone", None)
        payload["use_augmentation"] = self.use_augmentation
        return payload


def _build_section(name: str, cls, payload: dict):
    if not isinstance(payload, dict):
        raise ConfigError(f"{name}: expected an object, got {type(payload).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name == "model":
        fields.pop("backbone", None)  # wired from its own section
    kwargs = {}
    for key, value in payload.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}: unknown key")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_run_config(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be an object, got {type(payload).__name__}")
    known = set(_SECTIONS) | {"use_augmentation"}
    for key in payload:
        if key not in known:
            raise ConfigError(f"{key}: unknown section (expected {sorted(known)})")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(name, cls, payload.get(name, {}))
    use_augmentation = payload.get("use_augmentation", False)
    if not isinstance(use_augmentation, bool):
        raise ConfigError("use_augmentation: expected true/false")
    return RunConfig(use_augmentation=use_augmentation, **sections)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(payload)


def write_run_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
