"""Scale-specific objectness attention: per-level two-class maps, their ground truth and loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import FeatureMap, ScaleSpec
from .errors import ConfigError

IGNORE = -1
SOAM_DEPTHS = ("conv4", "conv3_128+conv4", "conv3_256+conv4")
FIT_LOW, FIT_HIGH = 0.4, 0.8
NEG_PER_POS = 3


@dataclass
class AttentionMap:
    probs: np.ndarray  # h x w, probability of "object"
    scale: ScaleSpec


@dataclass
class GtAttention:
    labels: np.ndarray  # h x w int8 in {0, 1, IGNORE}
    scale: ScaleSpec

    @property
    def positives(self) -> int:
        return int((self.labels == 1).sum())


class Soam(nn.Module):
    """Object / non-object logits per feature cell.

    The 4x4 layer is padded (1, 2) on each axis so that output cell (r, c) is
    centered on the corner shared with cell (r + 1, c + 1), i.e. on the center
    of the 10x10 window whose top-left feature cell is (r - 4, c - 4).
    """

    def __init__(self, channels: int, depth: str = "conv3_128+conv4"):
        super().__init__()
        if depth not in SOAM_DEPTHS:
            raise ConfigError(f"unknown soam depth {depth!r}; expected one of {SOAM_DEPTHS}")
        self.channels = channels
        self.depth = depth
        if depth == "conv4":
            self.conv1 = None
            hidden = channels
        else:
            hidden = 128 if depth == "conv3_128+conv4" else 256
            self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 2, 4)
        nn.init.normal_(self.conv2.weight, std=0.01)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: C x h x w  ->  2 x h x w logits (channel 0 non-object, 1 object)."""
        if x.shape[-3] != self.channels:
            raise ConfigError(f"SOAM expects {self.channels} channels, got {x.shape[-3]}")
        y = x.unsqueeze(0)
        if self.conv1 is not None:
            y = F.relu(self.conv1(y))
        y = F.pad(y, (1, 2, 1, 2))
        return self.conv2(y)[0]


def attention_probs(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=0)[1]


def compute_attention(f: FeatureMap, soam: Soam, scale: ScaleSpec | None = None) -> AttentionMap:
    if scale is None:
        scale = ScaleSpec(f.stride)
    with torch.no_grad():
        probs = attention_probs(soam(f.data))
    return AttentionMap(probs=probs.detach().cpu().numpy().astype(np.float64), scale=scale)


def fits_scale(obj, scale: ScaleSpec) -> bool:
    _, _, w, h = obj.bbox
    lo, hi = FIT_LOW * scale.window_px, FIT_HIGH * scale.window_px
    return lo <= w <= hi and lo <= h <= hi


def _max_pool_cells(mask: np.ndarray, stride: int, shape) -> np.ndarray:
    gh, gw = shape
    canvas = np.zeros((gh * stride, gw * stride), dtype=bool)
    h, w = min(mask.shape[0], canvas.shape[0]), min(mask.shape[1], canvas.shape[1])
    canvas[:h, :w] = mask[:h, :w]
    return canvas.reshape(gh, stride, gw, stride).any(axis=(1, 3))


def build_gt_attention(sample, scale: ScaleSpec, grid_shape=None, single_map=False) -> GtAttention:
    """Cell is positive iff some object fitting ``scale`` covers a pixel in its footprint.

    ``single_map=True`` drops the fit rule (one attention map for all scales).
    """
    if grid_shape is None:
        from .backbone import level_size
        h, w = sample.size
        grid_shape = (level_size(h, scale.stride, scale.window_size),
                      level_size(w, scale.stride, scale.window_size))
    union = np.zeros(sample.size, dtype=bool)
    for obj in sample.objects:
        if single_map or fits_scale(obj, scale):
            union |= obj.mask
    labels = _max_pool_cells(union, scale.stride, grid_shape).astype(np.int8)
    return GtAttention(labels=labels, scale=scale)


def sample_attention_cells(gt: GtAttention, rng: np.random.Generator) -> np.ndarray:
    """Flat indices of all positives plus 3 negatives per positive (uniform, no replacement)."""
    flat = gt.labels.ravel()
    pos = np.flatnonzero(flat == 1)
    if len(pos) == 0:
        return pos
    neg = np.flatnonzero(flat == 0)
    n_neg = min(len(neg), NEG_PER_POS * len(pos))
    chosen = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    return np.concatenate([pos, np.sort(chosen)])


def attention_loss(pred_logits: torch.Tensor, gt: GtAttention, rng: np.random.Generator) -> torch.Tensor:
    """Two-class cross-entropy averaged over the sampled cells; 0 when ``gt`` has no positives."""
    if tuple(pred_logits.shape[-2:]) != gt.labels.shape:
        raise ValueError(f"logit grid {tuple(pred_logits.shape[-2:])} != gt grid {gt.labels.shape}")
    cells = sample_attention_cells(gt, rng)
    if len(cells) == 0:
        return pred_logits.sum() * 0.0
    logits = pred_logits.reshape(2, -1)[:, torch.from_numpy(cells)].T
    target = torch.from_numpy(gt.labels.ravel()[cells].astype(np.int64))
    return F.cross_entropy(logits, target)
