"""Convolutional feature extractor plus the projection / alignment heads."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

NORM_EPS = 1e-12

CHECKPOINT_MAGIC = b"FSCK"


@dataclass
class EncoderConfig:
    input_size: int = 32
    block_channels: list[int] = field(default_factory=lambda: [16, 32])
    feature_dim: int = 32
    projection_dim: int = 16
    grid_size: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if not self.block_channels:
            raise ConfigError("block_channels must be non-empty")
        if self.block_channels[-1] != self.feature_dim:
            raise ConfigError("feature_dim must equal the last block's channel count")
        if any(c <= 0 for c in self.block_channels):
            raise ConfigError("block channels must be positive")
        if self.projection_dim <= 0 or self.grid_size <= 0:
            raise ConfigError("projection_dim and grid_size must be positive")
        if self.feature_size < self.grid_size:
            raise ConfigError(
                f"feature resolution {self.feature_size} smaller than grid_size {self.grid_size}"
            )

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.block_channels)

    @property
    def feature_size(self) -> int:
        return self.input_size // self.downsample_factor

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "block_channels": list(self.block_channels),
            "feature_dim": self.feature_dim,
            "projection_dim": self.projection_dim,
            "grid_size": self.grid_size,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            input_size=int(d["input_size"]),
            block_channels=[int(c) for c in d["block_channels"]],
            feature_dim=int(d["feature_dim"]),
            projection_dim=int(d["projection_dim"]),
            grid_size=int(d["grid_size"]),
            in_channels=int(d.get("in_channels", 1)),
        )


def l2_normalize(x: torch.Tensor, dim: int) -> torch.Tensor:
    return x / (x.norm(dim=dim, keepdim=True) + NORM_EPS)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=3, padding=1)
        self.norm = nn.GroupNorm(1, c_out)
        self.act = nn.ReLU()
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        return self.pool(self.act(self.norm(self.conv(x))))


class Backbone(nn.Module):
    """Stack of conv blocks, each halving the spatial resolution."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        chans = [config.in_channels] + list(config.block_channels)
        self.blocks = nn.Sequential(
            *[ConvBlock(a, b) for a, b in zip(chans[:-1], chans[1:])]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[None]
        if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
            raise ConfigError(
                f"input is {tuple(x.shape[-2:])}, encoder expects "
                f"{self.config.input_size}x{self.config.input_size}"
            )
        if x.shape[1] != self.config.in_channels:
            if self.config.in_channels == 1:
                x = x[:, :1]  # replicated channels are identical by contract
            else:
                raise ConfigError(
                    f"input has {x.shape[1]} channels, encoder expects {self.config.in_channels}"
                )
        return self.blocks(x)


class PointwiseProjection(nn.Module):
    """Two-layer 1x1 projection applied per grid cell."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_in, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(c_in, c_out, kernel_size=1),
        )

    def forward(self, x):
        return self.net(x)


class GlobalProjection(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(c_in, c_in),
            nn.ReLU(),
            nn.Linear(c_in, c_out),
        )

    def forward(self, x):
        return self.net(x)


def adaptive_pool_align(feature_map: torch.Tensor, S: int) -> torch.Tensor:
    """Adaptive average pooling of backbone features to an SxS grid of
    L2-normalized alignment vectors.  Accepts (C,h,w) or (B,C,h,w)."""
    squeeze = feature_map.dim() == 3
    if squeeze:
        feature_map = feature_map[None]
    if feature_map.shape[-1] < S or feature_map.shape[-2] < S:
        raise ConfigError(f"feature resolution {tuple(feature_map.shape[-2:])} < grid {S}")
    pooled = F.adaptive_avg_pool2d(feature_map, S)
    pooled = l2_normalize(pooled, dim=1)
    return pooled[0] if squeeze else pooled


class FewsegModel(nn.Module):
    """Backbone plus the two contrastive projection heads."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.dense_head = PointwiseProjection(config.feature_dim, config.projection_dim)
        self.global_head = GlobalProjection(config.feature_dim, config.projection_dim)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def project_dense(self, feature_map: torch.Tensor) -> torch.Tensor:
        """SxS grid of unit-norm projected keys; (B,C',S,S) or (C',S,S)."""
        squeeze = feature_map.dim() == 3
        if squeeze:
            feature_map = feature_map[None]
        pooled = F.adaptive_avg_pool2d(feature_map, self.config.grid_size)
        keys = l2_normalize(self.dense_head(pooled), dim=1)
        return keys[0] if squeeze else keys

    def project_global(self, feature_map: torch.Tensor) -> torch.Tensor:
        squeeze = feature_map.dim() == 3
        if squeeze:
            feature_map = feature_map[None]
        pooled = feature_map.mean(dim=(2, 3))
        emb = l2_normalize(self.global_head(pooled), dim=1)
        return emb[0] if squeeze else emb

    def align_vectors(self, feature_map: torch.Tensor) -> torch.Tensor:
        return adaptive_pool_align(feature_map, self.config.grid_size)


# ---------------------------------------------------------------------------
# Checkpoint format: b"FSCK" | uint32 header length | JSON header | raw data.
# The header lists named float32 arrays with shapes, stored little-endian in
# listed order, so any implementation can reload the file.


def save_checkpoint(path: str | Path, model: FewsegModel,
                    extra: dict | None = None) -> None:
    arrays = {k: v.detach().cpu().numpy().astype("<f4")
              for k, v in model.state_dict().items()}
    header = {
        "config": model.config.to_dict(),
        "extra": extra or {},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in arrays:
            fh.write(arrays[k].tobytes())


def load_checkpoint(path: str | Path) -> tuple[FewsegModel, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length))
        state = {}
        for entry in header["arrays"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4")
            if data.size != n:
                raise ConfigError(f"{path}: truncated array {entry['name']}")
            state[entry["name"]] = torch.from_numpy(
                data.reshape(entry["shape"]).copy()
            )
    model = FewsegModel(EncoderConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model, header.get("extra", {})
