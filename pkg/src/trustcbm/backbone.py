"""Small convolutional feature extractor with a shallow and a deep tap."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
from torch import nn

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"silu": nn.SiLU, "softplus": nn.Softplus, "tanh": nn.Tanh, "gelu": nn.GELU}
# gain^2 used by the fan-in initializer for each nonlinearity
_GAIN2 = {"silu": 2.0, "softplus": 2.0, "gelu": 2.0, "tanh": 25.0 / 9.0}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureExtractorConfig:
    """Stage layout of the extractor.

    Each stage is ``convs_per_stage`` 3x3 convolutions; the first one carries the
    stage stride. ``shallow_stage`` (1-based) is tapped as the shallow map, the
    last stage as the deep map with ``widths[-1]`` channels.
    """

    widths: tuple[int, ...] = (32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2)
    convs_per_stage: int = 2
    shallow_stage: int = 1
    nonlinearity: str = "silu"
    final_activation: bool = False
    padding_mode: str = "zeros"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ConfigError("widths and strides must be non-empty and of equal length")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"stage widths must be positive, got {self.widths}")
        if any(s <= 0 for s in self.strides):
            raise ConfigError(f"strides must be positive, got {self.strides}")
        if self.convs_per_stage < 1:
            raise ConfigError("convs_per_stage must be >= 1")
        if not 1 <= self.shallow_stage <= len(self.widths):
            raise ConfigError("shallow_stage out of range")
        if self.nonlinearity not in _ACTIVATIONS:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.padding_mode not in ("zeros", "circular"):
            raise ConfigError(f"padding_mode must be 'zeros' or 'circular', got {self.padding_mode!r}")

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def shallow_ratio(self) -> int:
        """Spatial ratio between the shallow and the deep map."""
        return math.prod(self.strides[self.shallow_stage :])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FeatureExtractorConfig:
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["strides"] = tuple(d["strides"])
        return cls(**d)


class FeatureMaps(NamedTuple):
    shallow: torch.Tensor  # (B, D_s, H_s, W_s)
    deep: torch.Tensor  # (B, D, H_z, W_z)


class Backbone(nn.Module):
    def __init__(self, config: FeatureExtractorConfig = FeatureExtractorConfig()):
        super().__init__()
        self.config = config
        stages = []
        c_in = 3
        n_stages = len(config.widths)
        for s, (width, stride) in enumerate(zip(config.widths, config.strides)):
            layers: list[nn.Module] = []
            for i in range(config.convs_per_stage):
                layers.append(
                    nn.Conv2d(
                        c_in if i == 0 else width,
                        width,
                        kernel_size=3,
                        stride=stride if i == 0 else 1,
                        padding=1,
                        padding_mode=config.padding_mode,
                    )
                )
                last = s == n_stages - 1 and i == config.convs_per_stage - 1
                if not last or config.final_activation:
                    layers.append(_ACTIVATIONS[config.nonlinearity]())
            stages.append(nn.Sequential(*layers))
            c_in = width
        self.stages = nn.ModuleList(stages)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Fan-in scaled normal init: ``w ~ N(0, gain^2 / fan_in)``, zero biases.

        ``fan_in = in_channels * 9`` and ``gain^2`` is 2 for silu/softplus/gelu,
        25/9 for tanh. Seeded from ``config.seed`` independent of global RNG state.
        """
        gen = torch.Generator().manual_seed(self.config.seed)
        gain2 = _GAIN2[self.config.nonlinearity]
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.normal_(0.0, math.sqrt(gain2 / fan_in), generator=gen)
                    m.bias.zero_()

    @property
    def dim(self) -> int:
        return self.config.dim

    def forward(self, images: torch.Tensor) -> FeatureMaps:
        """``images`` is (B, 3, H, W) in [0, 1]; H and W must be divisible by the total stride."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got shape {tuple(images.shape)}")
        H, W = images.shape[-2:]
        r = self.config.total_stride
        if H % r or W % r:
            raise ValueError(f"input size {H}x{W} is not divisible by the total downsample factor {r}")
        x = images - 0.5
        shallow = None
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i == self.config.shallow_stage:
                shallow = x
        return FeatureMaps(shallow, x)


def init_params(config: FeatureExtractorConfig) -> Backbone:
    return Backbone(config)


def extract_features(backbone: Backbone, images: torch.Tensor) -> FeatureMaps:
    return backbone(images)


def to_tensor(images, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(B, H, W, 3) array in [0, 1] -> (B, 3, H, W) tensor."""
    t = torch.as_tensor(images, dtype=dtype)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def save_backbone(backbone: Backbone, path: str | Path) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": backbone.config.to_dict(),
            "seed": backbone.config.seed,
            "state_dict": backbone.state_dict(),
        },
        path,
    )


def load_backbone(path: str | Path) -> Backbone:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    backbone = Backbone(FeatureExtractorConfig.from_dict(blob["config"]))
    backbone.load_state_dict(blob["state_dict"])
    return backbone
