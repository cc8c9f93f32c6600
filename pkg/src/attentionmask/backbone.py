"""Split residual backbone and residual necks producing the multi-scale feature pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError

STREAM1_STRIDES = (8, 16, 32, 64, 128)
STREAM2_STRIDES = (24, 48, 96, 192)

VARIANTS = {
    "am8_128": (8, 16, 24, 32, 48, 64, 96, 128),
    "am8_192": (8, 16, 24, 32, 48, 64, 96, 128, 192),
    "am16_192": (16, 24, 32, 48, 64, 96, 128, 192),
}


@dataclass(frozen=True, order=True)
class ScaleSpec:
    stride: int
    window_size: int = 10

    def __post_init__(self):
        if self.stride not in STREAM1_STRIDES + STREAM2_STRIDES:
            raise ConfigError(f"unsupported stride {self.stride}")

    @property
    def name(self) -> str:
        return f"S{self.stride}"

    @property
    def stream(self) -> int:
        return 1 if self.stride in STREAM1_STRIDES else 2

    @property
    def window_px(self) -> int:
        return self.window_size * self.stride

    def __str__(self):
        return self.name


@dataclass
class BackboneConfig:
    variant: str = "am8_128"
    channels: tuple = (32, 64, 128)
    window_size: int = 10
    blocks: tuple = (1, 1, 1, 1)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError("channels must be three positive integers")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ConfigError("blocks must be four positive integers")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")

    @property
    def scales(self) -> list[ScaleSpec]:
        return [ScaleSpec(s, self.window_size) for s in VARIANTS[self.variant]]

    @property
    def feature_channels(self) -> int:
        return self.channels[2]


@dataclass
class FeatureMap:
    data: torch.Tensor  # C x h x w
    stride: int

    @property
    def h(self) -> int:
        return self.data.shape[-2]

    @property
    def w(self) -> int:
        return self.data.shape[-1]

    @property
    def channels(self) -> int:
        return self.data.shape[-3]


@dataclass
class FeaturePyramid:
    levels: dict  # ScaleSpec -> FeatureMap, ascending stride
    image_size: tuple  # original (H, W) before padding
    stage_a: FeatureMap | None = field(default=None, repr=False)

    def __getitem__(self, scale):
        return self.levels[scale]

    @property
    def scales(self) -> list[ScaleSpec]:
        return list(self.levels)


def _norm(c):
    # per-image statistics in both training and inference, so test-time features match training
    return nn.BatchNorm2d(c, track_running_stats=False)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = _norm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.shortcut(x))


def _stage(cin, cout, stride, n_blocks):
    layers = [ResidualBlock(cin, cout, stride)]
    layers += [ResidualBlock(cout, cout) for _ in range(n_blocks - 1)]
    return nn.Sequential(*layers)


def _pad_to_even(x):
    return F.pad(x, (0, x.shape[-1] % 2, 0, x.shape[-2] % 2), mode="replicate")


class ResidualNeck(nn.Module):
    """Halves resolution: 2x2 average-pooled shortcut plus a strided conv residual."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        if x.shape[-2] < 2 or x.shape[-1] < 2:
            raise ValueError(f"residual neck needs at least 2x2 input, got {tuple(x.shape[-2:])}")
        shortcut = F.avg_pool2d(_pad_to_even(x), 2)
        return shortcut + self.conv2(F.relu(self.conv1(x)))


def residual_neck(neck: ResidualNeck, f: FeatureMap) -> FeatureMap:
    return FeatureMap(neck(f.data.unsqueeze(0))[0], f.stride * 2)


class Backbone(nn.Module):
    """Toy split backbone.

    Stage a reaches stride 8 through three stride-2 residual stages. Stage b is
    duplicated per stream (stride 2 -> S16, stride 3 -> S24). Coarser levels
    come from chained residual necks.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c = cfg.channels
        nb = cfg.blocks
        self.stage_a = nn.Sequential(
            _stage(3, c0, 2, nb[0]), _stage(c0, c1, 2, nb[1]), _stage(c1, c1, 2, nb[2]))
        strides = set(VARIANTS[cfg.variant])
        self.lateral8 = nn.Conv2d(c1, c, 1) if 8 in strides else None
        self.stage_b = nn.ModuleDict()
        if 16 in strides:
            self.stage_b["1"] = _stage(c1, c, 2, nb[3])
        if 24 in strides:
            self.stage_b["2"] = _stage(c1, c, 3, nb[3])
        self.necks = nn.ModuleDict({
            f"S{s}": ResidualNeck(c) for s in sorted(strides) if s // 2 in strides and s not in (16, 24)
        })
        self.stage_a_calls = 0

    @property
    def scales(self) -> list[ScaleSpec]:
        return self.cfg.scales

    def forward_stage_a(self, image: torch.Tensor) -> FeatureMap:
        """``image`` is a padded 3 x H x W tensor; returns the stride-8 map."""
        self.stage_a_calls += 1
        return FeatureMap(self.stage_a(image.unsqueeze(0))[0], 8)

    def forward_stage_b(self, f8: FeatureMap, stream: int) -> FeatureMap:
        if f8.stride != 8:
            raise ValueError(f"stage b expects a stride-8 map, got stride {f8.stride}")
        if stream not in (1, 2):
            raise ConfigError(f"stream must be 1 or 2, got {stream!r}")
        key = str(stream)
        if key not in self.stage_b:
            raise ConfigError(f"stream {stream} is not active in variant {self.cfg.variant}")
        return FeatureMap(self.stage_b[key](f8.data.unsqueeze(0))[0], 16 if stream == 1 else 24)

    def forward(self, image: torch.Tensor, image_size=None) -> FeaturePyramid:
        if image_size is None:
            image_size = tuple(image.shape[-2:])
        f8 = self.forward_stage_a(image)
        maps = {}
        if self.lateral8 is not None:
            maps[8] = FeatureMap(self.lateral8(f8.data.unsqueeze(0))[0], 8)
        for stream in (1, 2):
            if str(stream) in self.stage_b:
                fb = self.forward_stage_b(f8, stream)
                maps[fb.stride] = fb
        for s in sorted(VARIANTS[self.cfg.variant]):
            if f"S{s}" in self.necks:
                src = maps[s // 2]
                if src.h < 2 or src.w < 2:
                    raise ValueError(
                        f"image {tuple(image_size)} too small for scale S{s}: "
                        f"S{s // 2} map is only {src.h}x{src.w}")
                maps[s] = residual_neck(self.necks[f"S{s}"], src)
        levels = {ScaleSpec(s, self.cfg.window_size): maps[s] for s in sorted(maps)}
        return FeaturePyramid(levels=levels, image_size=tuple(image_size), stage_a=f8)


def pad_image(image: np.ndarray, min_side: int) -> np.ndarray:
    """Reflect-pad bottom/right so both sides are at least ``min_side``."""
    h, w = image.shape[:2]
    ph, pw = max(0, min_side - h), max(0, min_side - w)
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="symmetric")


def image_tensor(image: np.ndarray, window_size: int = 10, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 array -> padded 3 x H' x W' tensor."""
    padded = pad_image(np.asarray(image), 8 * window_size)
    return torch.from_numpy(np.ascontiguousarray(padded.transpose(2, 0, 1))).to(dtype)


def build_pyramid(image: np.ndarray, backbone: Backbone) -> FeaturePyramid:
    dtype = next(backbone.parameters()).dtype
    x = image_tensor(image, backbone.cfg.window_size, dtype)
    return backbone(x, image_size=image.shape[:2])


def forward_backbone_stage_a(image: np.ndarray, backbone: Backbone) -> FeatureMap:
    """H x W x 3 image -> stride-8 map of the padded image."""
    x = image_tensor(image, backbone.cfg.window_size, next(backbone.parameters()).dtype)
    return backbone.forward_stage_a(x)


def forward_backbone_stage_b(f8: FeatureMap, stream: int, backbone: Backbone) -> FeatureMap:
    """Stream 1 -> stride 16, stream 2 -> stride 24, from shared stage-a features."""
    return backbone.forward_stage_b(f8, stream)


def level_size(size: int, stride: int, window_size: int = 10) -> int:
    """Spatial extent of a pyramid level for an image side of ``size`` pixels."""
    return math.ceil(max(size, 8 * window_size) / stride)
