"""Candidate windows: joint ranking across scales, extraction, GT-driven training sampling, pruning stats."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .backbone import FeatureMap, ScaleSpec
from .soam import build_gt_attention

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowRef:
    scale: ScaleSpec
    center: tuple  # (r, c) on the attention grid
    attention: float = 0.0

    @property
    def offset(self) -> int:
        return self.scale.window_size // 2 - 1

    @property
    def feature_rect(self) -> tuple:
        """(top, left, height, width) in unpadded feature coordinates."""
        r, c = self.center
        n = self.scale.window_size
        return (r - self.offset, c - self.offset, n, n)

    @property
    def image_rect(self) -> tuple:
        """(x, y, w, h) in original image pixels; may extend past the image."""
        top, left, n, _ = self.feature_rect
        s = self.scale.stride
        return (left * s, top * s, n * s, n * s)

    @property
    def image_center(self) -> tuple:
        x, y, w, h = self.image_rect
        return (x + w / 2.0, y + h / 2.0)

    def sort_key(self):
        """Tie-break order: coarser stride first, then row-major."""
        return (-self.scale.stride, self.center[0], self.center[1])


@dataclass
class RankedWindows:
    windows: list
    K: float

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def by_scale(self) -> dict:
        out: dict = {}
        for ref in self.windows:
            out.setdefault(ref.scale, []).append(ref)
        return out


def enumerate_window_count(f_h: int, f_w: int, window: int) -> int:
    """Number of fully in-bounds ``window x window`` placements on an ``f_h x f_w`` grid."""
    if window < 1:
        raise ValueError("window must be >= 1")
    return max(0, f_h - window + 1) * max(0, f_w - window + 1)


def _tie_ordered(maps):
    return sorted(maps, key=lambda m: -m.scale.stride)


def joint_rank(maps, K=math.inf, threshold: float = 0.0, per_scale: int = 0) -> RankedWindows:
    """Pool cells with attention >= threshold over all scales, sort descending, keep K.

    ``per_scale`` > 0 additionally caps the cells taken from any one scale
    (the best ``per_scale`` of each scale compete for the K slots).
    """
    if not maps:
        raise ValueError("joint_rank needs at least one attention map")
    if K < 1:
        raise ValueError("K must be >= 1")
    if per_scale < 0:
        raise ValueError("per_scale must be >= 0")
    ordered = _tie_ordered(maps)
    vals = np.concatenate([m.probs.ravel() for m in ordered])
    which = np.concatenate([np.full(m.probs.size, i) for i, m in enumerate(ordered)])
    flat = np.concatenate([np.arange(m.probs.size) for m in ordered])
    keep = np.flatnonzero(vals >= threshold)
    order = keep[np.argsort(-vals[keep], kind="stable")]
    if per_scale:
        seen = np.zeros(len(ordered), dtype=np.int64)
        quota = np.empty(len(order), dtype=bool)
        for j, w in enumerate(which[order]):
            quota[j] = seen[w] < per_scale
            seen[w] += 1
        order = order[quota]
    if K != math.inf:
        order = order[: int(K)]
    windows = []
    for i in order:
        m = ordered[which[i]]
        r, c = divmod(int(flat[i]), m.probs.shape[1])
        windows.append(WindowRef(m.scale, (r, c), float(vals[i])))
    return RankedWindows(windows=windows, K=K)


def exhaustive_windows(pyramid) -> RankedWindows:
    """Every cell of every level, in tie order (no attention)."""
    windows = []
    for scale in sorted(pyramid.scales, key=lambda s: -s.stride):
        f = pyramid[scale]
        windows += [WindowRef(scale, (r, c), 0.0) for r in range(f.h) for c in range(f.w)]
    return RankedWindows(windows=windows, K=math.inf)


def extract_windows(data: torch.Tensor, centers, window_size: int = 10) -> torch.Tensor:
    """Gather N windows from a C x h x w map; out-of-bounds cells are zero.

    ``centers`` is an N x 2 integer array of attention-grid cells.
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    off = window_size // 2 - 1
    lo, hi = off, window_size - off - 1
    padded = F.pad(data, (lo, hi, lo, hi))
    span = torch.arange(window_size)
    rows = torch.from_numpy(centers[:, 0])[:, None] + span  # padded coords: (r - off) + off
    cols = torch.from_numpy(centers[:, 1])[:, None] + span
    out = padded[:, rows[:, :, None], cols[:, None, :]]  # C x N x n x n
    return out.permute(1, 0, 2, 3)


def extract_window(f: FeatureMap, ref: WindowRef) -> torch.Tensor:
    if ref.scale.stride != f.stride:
        raise ValueError(f"window at {ref.scale} cannot be read from a stride-{f.stride} map")
    return extract_windows(f.data, [ref.center], ref.scale.window_size)[0]


def gt_attention_for(sample, pyramid, single_map=False) -> dict:
    return {
        scale: build_gt_attention(sample, scale, (pyramid[scale].h, pyramid[scale].w), single_map)
        for scale in pyramid.scales
    }


def sample_training_windows(sample, pyramid, per_image_budget: int, pos_fraction: float,
                            rng: np.random.Generator, gts=None) -> list:
    """Draw windows from ground-truth attention, never from predicted maps."""
    if per_image_budget < 1:
        raise ValueError("per_image_budget must be >= 1")
    if gts is None:
        gts = gt_attention_for(sample, pyramid)
    scales = sorted(gts, key=lambda s: -s.stride)
    pos_cells, neg_cells = [], []
    for i, scale in enumerate(scales):
        labels = gts[scale].labels
        for r, c in np.argwhere(labels == 1):
            pos_cells.append((i, r, c))
        for r, c in np.argwhere(labels == 0):
            neg_cells.append((i, r, c))
    n_pos = min(int(round(per_image_budget * pos_fraction)), len(pos_cells))
    if not pos_cells:
        log.debug("sample %s has no GT-positive cells; drawing negatives only", sample.id)
    n_neg = min(per_image_budget - n_pos, len(neg_cells))
    picked = []
    if n_pos:
        picked += [pos_cells[j] for j in np.sort(rng.choice(len(pos_cells), n_pos, replace=False))]
    if n_neg:
        picked += [neg_cells[j] for j in np.sort(rng.choice(len(neg_cells), n_neg, replace=False))]
    return [WindowRef(scales[i], (int(r), int(c)), float(gts[scales[i]].labels[r, c])) for i, r, c in picked]


@dataclass
class PruneRow:
    scale: str
    stride: int
    total_cells: int = 0
    selected: int = 0
    gt_positives: int = 0
    retained_positives: int = 0

    @property
    def recall(self) -> float:
        return self.retained_positives / self.gt_positives if self.gt_positives else float("nan")

    @property
    def pruned_fraction(self) -> float:
        return 1.0 - self.selected / self.total_cells if self.total_cells else float("nan")

    def add(self, other: "PruneRow") -> None:
        self.total_cells += other.total_cells
        self.selected += other.selected
        self.gt_positives += other.gt_positives
        self.retained_positives += other.retained_positives

    def as_dict(self) -> dict:
        return {"scale": self.scale, "stride": self.stride, "total_cells": self.total_cells,
                "selected": self.selected, "gt_positives": self.gt_positives,
                "retained_positives": self.retained_positives, "recall": self.recall,
                "pruned_fraction": self.pruned_fraction}


def pruning_stats(maps, gts, K=math.inf, threshold: float = 0.0, per_scale: int = 0) -> dict:
    """Per-scale and overall share of GT-positive cells kept and of cells pruned by joint_rank."""
    gt_by_scale = {g.scale: g for g in gts}
    ranked = joint_rank(maps, K, threshold, per_scale)
    selected = {m.scale: np.zeros(m.probs.shape, dtype=bool) for m in maps}
    for ref in ranked:
        selected[ref.scale][ref.center] = True
    rows = {}
    overall = PruneRow("overall", 0)
    for m in sorted(maps, key=lambda m: m.scale.stride):
        gt = gt_by_scale[m.scale]
        if gt.labels.shape != m.probs.shape:
            raise ValueError(f"{m.scale}: gt grid {gt.labels.shape} != attention grid {m.probs.shape}")
        pos = gt.labels == 1
        row = PruneRow(m.scale.name, m.scale.stride, int(m.probs.size), int(selected[m.scale].sum()),
                       int(pos.sum()), int((pos & selected[m.scale]).sum()))
        rows[m.scale.name] = row
        overall.add(row)
    rows["overall"] = overall
    return rows
