"""Experiment configuration: nested YAML blocks parsed strictly into dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from casdm.losses import LossWeights
from casdm.model import ModelConfig
from casdm.sampler import SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    T: int = 1000

    def __post_init__(self):
        if self.kind not in ("cosine", "linear"):
            raise ValueError(f"schedule.kind must be 'cosine' or 'linear', got {self.kind!r}")
        if self.T < 2:
            raise ValueError(f"schedule.T must be >= 2, got {self.T}")


@dataclass(frozen=True)
class MetricConfig:
    backbone: str = "lpips_avgpool"
    resolution: int = 32
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 2000
    ckpt_every: int = 500
    eval_every: int = 0
    eval_samples: int = 256
    ema: bool = False
    ema_decay: float = 0.9999
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("train.steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("train.ema_decay must be in [0, 1]")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic_patterns"
    path: str = ""
    n: int = 2048
    image_size: int = 8
    channels: int = 1
    seed: int = 0
    mean: float = 0.0
    std: float = 0.5
    jitter: float = 0.05

    def __post_init__(self):
        if self.kind not in ("synthetic_gaussian", "synthetic_patterns", "folder", "tensor_file"):
            raise ValueError(f"unknown data.kind {self.kind!r}")
        if self.kind in ("folder", "tensor_file") and not self.path:
            raise ValueError(f"data.kind {self.kind!r} needs data.path")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    metric: MetricConfig = field(default_factory=MetricConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.model.image_size != self.data.image_size:
            raise ValueError(
                f"model.image_size ({self.model.image_size}) != data.image_size ({self.data.image_size})"
            )
        if self.model.image_channels != self.data.channels:
            raise ValueError(
                f"model.image_channels ({self.model.image_channels}) != data.channels ({self.data.channels})"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["attention"] = list(d["model"]["attention"])
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **blocks: dict) -> "ExperimentConfig":
        """Copy with selected fields of selected blocks overridden: replace(loss={"lambda_lpips": 0})."""
        d = self.to_dict()
        for block, values in blocks.items():
            d[block].update(values)
        return from_dict(d)


_BLOCK_TYPES = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "loss": LossWeights,
    "metric": MetricConfig,
    "train": TrainConfig,
    "sample": SamplerConfig,
    "data": DataConfig,
}


def _coerce(block: str, key: str, value: Any, default: Any):
    where = f"{block}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of blocks")
    unknown = sorted(set(raw) - set(_BLOCK_TYPES))
    if unknown:
        raise ConfigError(f"unknown config block(s): {unknown}; expected {sorted(_BLOCK_TYPES)}")
    blocks = {}
    for name, cls in _BLOCK_TYPES.items():
        values = raw.get(name)
        values = {} if values is None else values
        if not isinstance(values, dict):
            raise ConfigError(f"block {name!r} must be a mapping")
        defaults = cls()
        known = {f.name for f in fields(cls)}
        bad = sorted(set(values) - known)
        if bad:
            raise ConfigError(f"unknown key(s) in {name}: {bad}; allowed: {sorted(known)}")
        kw = {k: _coerce(name, k, v, getattr(defaults, k)) for k, v in values.items()}
        try:
            blocks[name] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    try:
        return ExperimentConfig(**blocks)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def desk_preset() -> ExperimentConfig:
    return ExperimentConfig()


def full_preset() -> ExperimentConfig:
    """Long-chain profile: T = 4000 and 100 sampling steps, at desk image size."""
    return from_dict(
        {
            "schedule": {"kind": "cosine", "T": 4000},
            "sample": {"steps": 100},
            "loss": {"lambda_eps": 1.0, "lambda_x0": 1.0, "lambda_mu": 1.0, "lambda_lpips": 0.1},
            "train": {"lr": 1e-4},
        }
    )


PRESETS = {"desk": desk_preset, "full": full_preset}
