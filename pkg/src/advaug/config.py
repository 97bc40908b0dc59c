"""Run configuration: strict-schema JSON in, dataclasses out.

Unknown keys are rejected (naming the offending key) so typos never silently
fall back to defaults. ``RunConfig.validate`` re-checks value-level
constraints before any compute starts.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .generators import KINDS

DATASET_KINDS = ("synthetic-cls", "synthetic-seg", "folder")


@dataclass
class DatasetConfig:
    kind: str = "synthetic-cls"
    resolution: int = 32
    channels: int = 3
    num_classes: int = 4
    size: int = 700
    train_fraction: float = 0.8
    seed: int = 0
    path: Optional[str] = None      # folder datasets only
    task: Optional[str] = None      # folder datasets only; synthetic kinds imply it

    def resolved_task(self) -> str:
        if self.kind == "synthetic-cls":
            return "classification"
        if self.kind == "synthetic-seg":
            return "segmentation"
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"folder datasets need task=classification|segmentation, got {self.task!r}")
        return self.task


@dataclass
class ModelConfig:
    noise_dim: int = 128
    base_width: int = 32
    flow_scale: float = 0.1
    mask_scale: float = 0.5


@dataclass
class LossConfig:
    lambda_gan: float = 1.0
    gamma_reg: float = 0.1
    gan_variant: str = "minimax"
    grad_reverse_scale: float = 1.0


@dataclass
class OptimConfig:
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    lr_target: float = 1e-3
    betas_gan: tuple = (0.5, 0.999)
    betas_target: tuple = (0.9, 0.999)


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    enabled_generators: tuple = tuple(KINDS)
    checkpoint_every: int = 500
    out_dir: str = "runs/default"


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "train": TrainConfig,
}


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config key: {sorted(unknown)[0]!r}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            sections[name] = _parse_section(section_cls, raw.get(name, {}), name)
        cfg = cls(**sections)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        d, m, l, t = self.dataset, self.model, self.loss, self.train
        if d.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {d.kind!r}")
        if d.kind == "folder" and not d.path:
            raise ConfigError("dataset.path is required for folder datasets")
        if d.kind != "folder" and d.resolution < 16:
            raise ConfigError(f"synthetic datasets need resolution >= 16, got {d.resolution}")
        if not 0 < d.train_fraction < 1:
            raise ConfigError(f"dataset.train_fraction must be in (0, 1), got {d.train_fraction}")
        if d.size < 2 or d.num_classes < 2 or d.channels < 1:
            raise ConfigError("dataset size/num_classes/channels out of range")
        d.resolved_task()

        for key in ("lambda_gan", "gamma_reg"):
            v = getattr(l, key)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"loss.{key} must be finite and >= 0, got {v}")
        if l.gan_variant not in ("minimax", "nonsaturating"):
            raise ConfigError(f"loss.gan_variant must be minimax|nonsaturating, got {l.gan_variant!r}")
        if not l.grad_reverse_scale > 0:
            raise ConfigError("loss.grad_reverse_scale must be > 0")

        bad = [g for g in t.enabled_generators if g not in KINDS]
        if bad:
            raise ConfigError(f"unknown generator kind in train.enabled_generators: {bad[0]!r}")
        if len(set(t.enabled_generators)) != len(t.enabled_generators):
            raise ConfigError("train.enabled_generators contains duplicates")
        if t.epochs < 0 or t.batch_size < 1 or t.checkpoint_every < 1:
            raise ConfigError("train.epochs/batch_size/checkpoint_every out of range")
        n_parts = 1 + len(t.enabled_generators)
        if n_parts > 1 and t.batch_size < 4:
            raise ConfigError(f"batch_size must be >= 4 to split into parts, got {t.batch_size}")
        if t.batch_size // n_parts < 2:
            raise ConfigError(
                f"batch_size {t.batch_size} leaves batch-norm parts smaller than 2 "
                f"({n_parts} parts); increase it"
            )
        if m.noise_dim < 1 or m.base_width < 2:
            raise ConfigError("model.noise_dim/base_width out of range")
        if not (0 < m.flow_scale and 0 < m.mask_scale):
            raise ConfigError("model.flow_scale/mask_scale must be positive")


def _parse_section(section_cls, raw: dict, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key: {name}.{sorted(unknown)[0]}")
    kwargs = {}
    for key, value in raw.items():
        if fields[key].type == "tuple" or isinstance(fields[key].default, tuple):
            value = tuple(value)
        kwargs[key] = value
    try:
        return section_cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad config section {name!r}: {e}")
