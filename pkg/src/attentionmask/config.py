"""Run configuration: nested dataclasses loaded from JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .errors import ConfigError
from .soam import SOAM_DEPTHS


@dataclass
class DataConfig:
    count: int = 200
    val_count: int = 50
    image_size: tuple = (256, 256)
    size_range: tuple = (8, 96)
    objects_per_image: tuple = (2, 6)
    seed: int = 1


@dataclass
class SoamConfig:
    depth: str = "conv3_128+conv4"
    shared: bool = False  # one map for all scales (ablation)

    def __post_init__(self):
        if self.depth not in SOAM_DEPTHS:
            raise ConfigError(f"unknown soam depth {self.depth!r}")


@dataclass
class SamplerConfig:
    K: float = 1000
    threshold: float = 0.0
    per_scale: int = 0  # > 0 caps the windows taken from any one scale

    def __post_init__(self):
        if self.K is None:
            self.K = math.inf
        if self.K < 1:
            raise ConfigError("sampler.K must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("sampler.threshold must lie in [0, 1]")
        if self.per_scale < 0:
            raise ConfigError("sampler.per_scale must be >= 0")


@dataclass
class HeadsConfig:
    k: int = 1000
    M: int = 40
    bin_threshold: float = 0.5
    nms: bool = False
    nms_iou: float = 0.7
    hidden: int = 0  # 0 -> same as the pyramid channel count

    def __post_init__(self):
        if self.k < 1 or self.M < 1:
            raise ConfigError("heads.k and heads.M must be >= 1")


@dataclass
class LossWeights:
    w_objn: float = 0.5
    w_ah: float = 1.25
    w_seg: float = 1.25
    w_att: float = 0.25

    def __post_init__(self):
        if min(self.w_objn, self.w_ah, self.w_seg, self.w_att) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_images: int = 4
    windows_per_image: int = 64
    pos_fraction: float = 0.5
    learning_rate: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 10.0
    flip: bool = True
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ConfigError("pos_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch_images < 1 or self.windows_per_image < 1:
            raise ConfigError("epochs >= 0, batch_images >= 1, windows_per_image >= 1 required")


@dataclass
class EvalConfig:
    k: tuple = (10, 100, 1000)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    soam: SoamConfig = field(default_factory=SoamConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return from_dict(cls, doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


def from_dict(cls, doc):
    if not isinstance(doc, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = from_dict(hint, value)
        elif hint is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return None
    return obj
