"""YAML run configuration: ``synth``, ``train`` and ``evaluate`` sections.

Keys mirror the dataclass fields exactly; unknown keys are errors so a typo
never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .pipeline import TrainConfig
from .synthdata import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    patient_threshold: float = 0.5
    score_floor: float = 0.05
    ap_mode: str = "all_point"  # or "11_point"


@dataclass
class RunConfig:
    synth: SynthConfig | None = None
    train: TrainConfig | None = None
    evaluate: EvalConfig = field(default_factory=EvalConfig)


def _dataclass_type(tp):
    """The dataclass inside ``tp`` (plain or Optional), else None."""
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = _dataclass_type(hints[f.name])
        if sub is not None and value is not None:
            value = from_dict(sub, value, f"{where}.{f.name}")
        elif isinstance(value, list) and "tuple" in str(hints[f.name]):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(obj) -> dict:
    return _plain(dataclasses.asdict(obj))


def train_config_from_dict(data: dict) -> TrainConfig:
    return from_dict(TrainConfig, data, "train")


def load_config(path, require: tuple[str, ...] = ()) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for key in require:
        if raw.get(key) is None:
            raise ConfigError(f"{path}: missing config key {key!r}")
    cfg = from_dict(RunConfig, raw, path.name)
    if cfg.train is not None and cfg.train.anchors.stride != cfg.train.backbone.output_stride:
        raise ConfigError(f"{path}: train.anchors.stride must equal train.backbone.output_stride")
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    data = {k: v for k, v in config_to_dict(cfg).items() if v is not None}
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))
