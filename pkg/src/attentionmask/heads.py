"""Per-window heads: objectness scoring, attentional gating, mask decoding and paste-back."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .masks import mask_bbox
from .sampler import WindowRef


class ObjectnessHead(nn.Module):
    """Two 3x3 convs, global average pooling, one linear layer. Returns logits."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.fc = nn.Linear(hidden, 1)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.conv1(windows))
        y = F.relu(self.conv2(y))
        return self.fc(y.mean(dim=(2, 3)))[:, 0]


class AttentionalHead(nn.Module):
    """1x1 conv to a spatial logit map; its sigmoid gates every channel."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, windows: torch.Tensor):
        logits = self.conv(windows)
        weighted = windows * torch.sigmoid(logits)
        return weighted, logits[:, 0]


class SegmentationHead(nn.Module):
    """3x3 conv then two stride-2 deconvolutions: n x n window -> 4n x 4n logits."""

    def __init__(self, channels: int, hidden: int | None = None, out_size: int = 40):
        super().__init__()
        hidden = hidden or channels
        self.out_size = out_size
        self.conv = nn.Conv2d(channels, hidden, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(hidden, 1, 4, stride=2, padding=1)

    def forward(self, weighted: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.conv(weighted))
        y = F.relu(self.up1(y))
        y = self.up2(y)
        if y.shape[-1] != self.out_size:
            y = F.interpolate(y, size=(self.out_size, self.out_size), mode="bilinear", align_corners=False)
        return y[:, 0]


def objectness_score(window: torch.Tensor, head: ObjectnessHead) -> float:
    with torch.no_grad():
        return float(torch.sigmoid(head(window.unsqueeze(0)))[0])


def attentional_head(window: torch.Tensor, head: AttentionalHead):
    """Returns the gated window and the 10x10 gate in [0, 1]."""
    weighted, logits = head(window.unsqueeze(0))
    return weighted[0], torch.sigmoid(logits[0])


def segment_window(weighted_window: torch.Tensor, head: SegmentationHead) -> torch.Tensor:
    return head(weighted_window.unsqueeze(0))[0]


# ---------------------------------------------------------------------------
# paste-back


@dataclass
class Proposal:
    mask: np.ndarray  # H x W bool
    score: float
    source: WindowRef | None = None

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def bilinear_matrix(out_len: int, in_len: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Rows ``start:stop`` of the 1-D bilinear resize operator ``in_len -> out_len``.

    Half-pixel centers with edge clamping (``align_corners=False`` semantics).
    """
    stop = out_len if stop is None else stop
    i = np.arange(start, stop, dtype=np.float64)
    src = np.maximum((i + 0.5) * in_len / out_len - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_len - 1)
    i1 = np.minimum(i0 + 1, in_len - 1)
    lam = src - i0
    m = np.zeros((len(i), in_len))
    rows = np.arange(len(i))
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def assemble_proposal(seg_logits, ref: WindowRef, score: float, image_size, bin_threshold: float = 0.5) -> Proposal:
    """Sigmoid, bilinear resize to the window's image rect, threshold, paste with clipping."""
    logits = seg_logits.detach().cpu().numpy() if torch.is_tensor(seg_logits) else np.asarray(seg_logits)
    probs = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    H, W = image_size
    x, y, w, h = ref.image_rect
    mask = np.zeros((H, W), dtype=bool)
    x0, x1 = max(x, 0), min(x + w, W)
    y0, y1 = max(y, 0), min(y + h, H)
    if x0 < x1 and y0 < y1:
        ry = bilinear_matrix(h, probs.shape[0], y0 - y, y1 - y)
        rx = bilinear_matrix(w, probs.shape[1], x0 - x, x1 - x)
        mask[y0:y1, x0:x1] = (ry @ probs @ rx.T) > bin_threshold
    return Proposal(mask=mask, score=float(score), source=ref)


def select_top_windows(scored, k: int) -> list:
    """Descending score; ties by attention, then coarser stride, then row-major."""
    if k < 1:
        raise ValueError("k must be >= 1")
    key = lambda item: (-item[1], -item[0].attention) + item[0].sort_key()  # noqa: E731
    return sorted(scored, key=key)[:k]


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union else 0.0


def box_nms(proposals, iou_threshold: float = 0.7) -> list:
    """Greedy NMS on mask bounding boxes; input must be sorted by score."""
    kept, boxes = [], []
    for p in proposals:
        box = mask_bbox(p.mask)
        if all(box_iou(box, b) <= iou_threshold for b in boxes):
            kept.append(p)
            boxes.append(box)
    return kept
