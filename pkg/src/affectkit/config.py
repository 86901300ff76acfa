"""Experiment configuration: one YAML file drives every CLI stage."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

from .datamodel import (
    DEFAULT_GAUSSIAN_SIGMA, DEFAULT_WINDOW, SMOOTHING_KINDS, SmoothingSpec, Task,
)
from .mae import MAEConfig

CONFIG_VERSION = 1

_MISSING = object()


class ConfigError(ValueError):
    """The configuration file is malformed or inconsistent."""


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return dict(value)


def _take(section: dict, key: str, kind, default=_MISSING, where: str = ""):
    if key in section:
        value = section.pop(key)
    elif default is _MISSING:
        raise ConfigError(f"missing required key {where}{key!r}")
    else:
        return default
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(
            f"key {where}{key!r} must be {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


def _reject_unknown(section: dict, where: str) -> None:
    if section:
        raise ConfigError(f"unknown keys in {where}: {sorted(section)}")


@dataclass(frozen=True)
class PretrainSection:
    lr: float = 2e-3
    batch_size: int = 16
    steps: int = 60
    log_every: int = 10
    max_frames: int = 2048


@dataclass(frozen=True)
class FinetuneSection:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 2
    freeze_encoder: bool = False
    val_fraction: float = 0.25


@dataclass(frozen=True)
class FeatureSection:
    audio: str = "label_correlated"
    audio_dim: int = 16
    audio_noise_scale: float = 0.3
    audio_rate: float = 50.0
    video_rate: float = 25.0


@dataclass(frozen=True)
class FusionSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    clip_length: int = 25
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 5
    val_fraction: float = 0.25


@dataclass(frozen=True)
class CrossvalSection:
    n_folds: int = 3


@dataclass
class ExperimentConfig:
    seed: int
    data_dir: Path
    out_dir: Path
    mae: MAEConfig
    pretrain: PretrainSection = PretrainSection()
    finetune: FinetuneSection = FinetuneSection()
    features: FeatureSection = FeatureSection()
    fusion: FusionSection = FusionSection()
    crossval: CrossvalSection = CrossvalSection()
    smoothing: dict = field(default_factory=dict)

    def smoothing_for(self, task: Task) -> SmoothingSpec:
        return self.smoothing.get(
            task, SmoothingSpec(kind="gaussian",
                                window=DEFAULT_WINDOW[task],
                                sigma=DEFAULT_GAUSSIAN_SIGMA[task]))


def _parse_smoothing(raw: dict) -> dict:
    out = {}
    for task in Task:
        sub = raw.pop(task.value, None)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"smoothing.{task.value} must be a mapping")
        sub = dict(sub)
        kind = _take(sub, "kind", str, default="gaussian",
                     where=f"smoothing.{task.value}.")
        if kind not in SMOOTHING_KINDS:
            raise ConfigError(
                f"smoothing.{task.value}.kind must be one of {SMOOTHING_KINDS}")
        window = _take(sub, "window", int, default=DEFAULT_WINDOW[task],
                       where=f"smoothing.{task.value}.")
        sigma = _take(sub, "sigma", float,
                      default=DEFAULT_GAUSSIAN_SIGMA[task],
                      where=f"smoothing.{task.value}.")
        _reject_unknown(sub, f"smoothing.{task.value}")
        try:
            out[task] = SmoothingSpec(kind=kind, window=window, sigma=sigma)
        except ValueError as exc:
            raise ConfigError(f"smoothing.{task.value}: {exc}") from None
    _reject_unknown(raw, "smoothing")
    return out


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Parse and validate a config file; paths resolve against its directory."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw = dict(raw)
    version = _take(raw, "version", int)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} "
                          f"(this build reads {CONFIG_VERSION})")
    seed = _take(raw, "seed", int, default=0)
    base = path.parent
    data_dir = base / _take(raw, "data_dir", str)
    out_dir = base / _take(raw, "out_dir", str, default="out")

    mae_raw = _section(raw, "mae")
    raw.pop("mae", None)
    known_mae = {f for f in MAEConfig.__dataclass_fields__}
    bad = set(mae_raw) - known_mae
    if bad:
        raise ConfigError(f"unknown keys in mae: {sorted(bad)}")
    try:
        mae_cfg = MAEConfig(**mae_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"mae: {exc}") from None

    def build(section_name: str, cls):
        sec = _section(raw, section_name)
        raw.pop(section_name, None)
        out = {}
        for fname, fdef in cls.__dataclass_fields__.items():
            kind = type(fdef.default)
            out[fname] = _take(sec, fname, kind, default=fdef.default,
                               where=f"{section_name}.")
        _reject_unknown(sec, section_name)
        try:
            return cls(**out)
        except ValueError as exc:
            raise ConfigError(f"{section_name}: {exc}") from None

    pretrain = build("pretrain", PretrainSection)
    finetune = build("finetune", FinetuneSection)
    features = build("features", FeatureSection)
    fusion = build("fusion", FusionSection)
    crossval = build("crossval", CrossvalSection)

    smoothing_raw = _section(raw, "smoothing")
    raw.pop("smoothing", None)
    smoothing = _parse_smoothing(smoothing_raw)

    _reject_unknown(raw, "config")

    if features.audio not in ("none", "noise", "label_correlated"):
        raise ConfigError("features.audio must be none, noise or "
                          "label_correlated")
    if not (0.0 <= finetune.val_fraction < 1.0
            and 0.0 <= fusion.val_fraction < 1.0):
        raise ConfigError("val_fraction must lie in [0, 1)")
    if crossval.n_folds < 2:
        raise ConfigError("crossval.n_folds must be >= 2")

    return ExperimentConfig(seed=seed, data_dir=data_dir, out_dir=out_dir,
                            mae=mae_cfg, pretrain=pretrain, finetune=finetune,
                            features=features, fusion=fusion,
                            crossval=crossval, smoothing=smoothing)


def write_config(path: Union[str, Path], config: dict) -> None:
    """Dump a config mapping as YAML (used by the dataset generator)."""
    Path(path).write_text(yaml.safe_dump(config, sort_keys=False),
                          encoding="utf-8")
