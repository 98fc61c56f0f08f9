"""Run configuration: one dataclass tree, JSON round-trip, dot-path overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import TransformSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .protoseg import Stage2Config
from .stage1 import Stage1Config
from .superpixel import FelzParams


@dataclass
class DataConfig:
    manifest: str = ""
    image_size: int = 32
    replicate_channels: int = 1
    setting: int = 2
    fold: int = 0
    test_classes: list[str] = field(default_factory=lambda: ["3", "4"])

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest, "image_size": self.image_size,
            "replicate_channels": self.replicate_channels,
            "setting": self.setting, "fold": self.fold,
            "test_classes": list(self.test_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        d["test_classes"] = [str(c) for c in d.get("test_classes", ["3", "4"])]
        return cls(**d)


@dataclass
class FinetuneConfig:
    iterations: int = 500
    lr: float = 0.02
    momentum: float = 0.9
    gt_mix: float = 0.5  # probability of a ground-truth episode vs a pseudo one
    unfreeze: str = "all"  # "all" or "backbone"

    def __post_init__(self):
        if not 0.0 <= self.gt_mix <= 1.0:
            raise ConfigError("gt_mix must lie in [0, 1]")
        if self.unfreeze not in ("all", "backbone"):
            raise ConfigError("unfreeze must be 'all' or 'backbone'")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations, "lr": self.lr,
            "momentum": self.momentum, "gt_mix": self.gt_mix,
            "unfreeze": self.unfreeze,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**d)


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    felz: FelzParams = field(default_factory=FelzParams)
    min_fg: int = 6
    view_transform: TransformSpec = field(default_factory=TransformSpec)
    episode_transform: TransformSpec = field(default_factory=TransformSpec)
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        for name in ("stage1", "stage2", "finetune"):
            if getattr(self, name).iterations < 0:
                raise ConfigError(f"{name}.iterations must be >= 0")
        if self.encoder.input_size != self.data.image_size:
            raise ConfigError("encoder.input_size must equal data.image_size")

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "encoder": self.encoder.to_dict(),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "finetune": self.finetune.to_dict(),
            "felz": {"k_scale": self.felz.k_scale, "sigma": self.felz.sigma,
                     "min_size": self.felz.min_size},
            "min_fg": self.min_fg,
            "view_transform": self.view_transform.to_dict(),
            "episode_transform": self.episode_transform.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        base = cls().to_dict()
        merged = _deep_merge(base, d)
        return cls(
            data=DataConfig.from_dict(merged["data"]),
            encoder=EncoderConfig.from_dict(merged["encoder"]),
            stage1=Stage1Config.from_dict(merged["stage1"]),
            stage2=Stage2Config.from_dict(merged["stage2"]),
            finetune=FinetuneConfig.from_dict(merged["finetune"]),
            felz=FelzParams(**merged["felz"]),
            min_fg=int(merged["min_fg"]),
            view_transform=TransformSpec.from_dict(merged["view_transform"]),
            episode_transform=TransformSpec.from_dict(merged["episode_transform"]),
            seed=int(merged["seed"]),
            out_dir=str(merged["out_dir"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def fingerprint(self) -> str:
        # identifies the experiment, not where its outputs land
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(config_dict: dict, dotted_key: str, raw_value: str) -> None:
    """In-place dot-path override; values parse as JSON, falling back to str."""
    parts = dotted_key.split(".")
    node = config_dict
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config path {dotted_key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    try:
        node[parts[-1]] = json.loads(raw_value)
    except json.JSONDecodeError:
        node[parts[-1]] = raw_value
