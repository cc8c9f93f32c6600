"""Window labelling, the weighted multi-task loss and the SGD training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .config import LossWeights, RunConfig, to_dict
from .data import AnnotatedObject, DatasetManifest, ImageSample, flip_sample
from .errors import TrainingDiverged
from .model import AttentionMaskNet, _gather, save_checkpoint
from .sampler import WindowRef, gt_attention_for, sample_training_windows
from .soam import attention_loss, fits_scale

log = logging.getLogger(__name__)

CENTER_TOLERANCE = 0.1  # half-width of the central 20% band, as a fraction of the window side
METRIC_FIELDS = ("epoch", "objn", "ah", "seg", "att_total", "total", "wall_seconds")


@dataclass
class WindowLabel:
    objectness: int
    target_object: AnnotatedObject | None = None
    ah_target: np.ndarray | None = None  # n x n
    seg_target: np.ndarray | None = None  # M x M


def _contained(bbox, rect) -> bool:
    x, y, w, h = bbox
    rx, ry, rw, rh = rect
    return x >= rx and y >= ry and x + w <= rx + rw and y + h <= ry + rh


def _centered(obj, ref: WindowRef) -> bool:
    cx, cy = obj.center
    wx, wy = ref.image_center
    side = ref.scale.window_px
    return abs(cx - wx) <= CENTER_TOLERANCE * side and abs(cy - wy) <= CENTER_TOLERANCE * side


def _crop(mask: np.ndarray, rect) -> np.ndarray:
    """Crop ``rect`` out of ``mask``; pixels outside the image are 0."""
    x, y, w, h = rect
    out = np.zeros((h, w), dtype=np.float32)
    H, W = mask.shape
    x0, x1, y0, y1 = max(x, 0), min(x + w, W), max(y, 0), min(y + h, H)
    if x0 < x1 and y0 < y1:
        out[y0 - y:y1 - y, x0 - x:x1 - x] = mask[y0:y1, x0:x1]
    return out


def _area_resize(a: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None, None]
    return F.adaptive_avg_pool2d(t, size)[0, 0].numpy()


def _bbox_footprint(bbox, rect, n: int) -> np.ndarray:
    """n x n cells of the window ``rect``; a cell is 1 if it overlaps ``bbox``."""
    x, y, w, h = bbox
    rx, ry, rw, _ = rect
    s = rw / n
    edges = np.arange(n) * s
    cols = (rx + edges < x + w) & (rx + edges + s > x)
    rows = (ry + edges < y + h) & (ry + edges + s > y)
    return (rows[:, None] & cols[None, :]).astype(np.float32)


def assign_window_label(ref: WindowRef, sample: ImageSample, M: int = 40) -> WindowLabel:
    """Objectness 1 iff some object fits the scale, lies inside the window and is centered in it."""
    rect = ref.image_rect
    wx, wy = ref.image_center
    best = None
    for obj in sample.objects:
        if not (fits_scale(obj, ref.scale) and _contained(obj.bbox, rect) and _centered(obj, ref)):
            continue
        cx, cy = obj.center
        key = ((cx - wx) ** 2 + (cy - wy) ** 2, obj.id)
        if best is None or key < best[0]:
            best = (key, obj)
    if best is None:
        return WindowLabel(objectness=0)
    obj = best[1]
    seg = _area_resize(_crop(obj.mask, rect), M) >= 0.5
    return WindowLabel(objectness=1, target_object=obj,
                       ah_target=_bbox_footprint(obj.bbox, rect, ref.scale.window_size),
                       seg_target=seg.astype(np.float32))


@dataclass
class LossBreakdown:
    objn: torch.Tensor
    ah: torch.Tensor
    seg: torch.Tensor
    att_per_scale: dict  # scale name -> tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def att_total(self) -> torch.Tensor:
        return _seq_sum(list(self.att_per_scale.values()), self.objn)

    def as_floats(self) -> dict:
        parts = {"objn": self.objn, "ah": self.ah, "seg": self.seg, "att_total": self.att_total, "total": self.total}
        return {k: float(v.detach()) for k, v in parts.items()}


def _seq_sum(tensors, like):
    out = torch.zeros((), dtype=like.dtype)
    for t in tensors:
        out = out + t
    return out


def weighted_total(objn, ah, seg, att_sum, weights: LossWeights):
    """w_objn*objn + w_ah*ah + w_seg*seg + w_att*att_sum, left to right, in the operands' dtype."""
    w = [torch.tensor(v, dtype=objn.dtype) for v in (weights.w_objn, weights.w_ah, weights.w_seg, weights.w_att)]
    return w[0] * objn + w[1] * ah + w[2] * seg + w[3] * att_sum


def identity_holds(b: LossBreakdown) -> bool:
    """Recompute the weighted sum in NumPy at the same precision and compare bitwise."""
    dt = b.total.detach().numpy().dtype.type
    w = b.weights
    att = dt(0)
    for t in b.att_per_scale.values():
        att = dt(att + dt(t.detach().numpy()))
    parts = [dt(x.detach().numpy()) for x in (b.objn, b.ah, b.seg)]
    ref = dt(dt(w.w_objn) * parts[0])
    ref = dt(ref + dt(dt(w.w_ah) * parts[1]))
    ref = dt(ref + dt(dt(w.w_seg) * parts[2]))
    ref = dt(ref + dt(dt(w.w_att) * att))
    return bool(ref == dt(b.total.detach().numpy()))


def total_loss(obj_logits, obj_labels, ah_logits, ah_targets, seg_logits, seg_targets,
               attention: dict, weights: LossWeights, rng: np.random.Generator) -> LossBreakdown:
    """Joint loss over a batch of windows plus per-scale attention losses.

    ``attention`` maps scale -> list of (logits, GtAttention) pairs, one per
    image; each scale's term is the mean over images. ah/seg average over
    positive windows only and are 0 when the batch has none.
    """
    if len(obj_logits) == 0:
        raise ValueError("total_loss needs a non-empty batch")
    objn = F.binary_cross_entropy_with_logits(obj_logits, obj_labels)
    zero = obj_logits.sum() * 0.0
    if len(ah_logits):
        ah = F.binary_cross_entropy_with_logits(ah_logits, ah_targets)
        seg = F.binary_cross_entropy_with_logits(seg_logits, seg_targets)
    else:
        ah = seg = zero
    att = {}
    for scale in sorted(attention, key=lambda s: s.stride):
        terms = [attention_loss(logits, gt, rng) for logits, gt in attention[scale]]
        att[scale.name] = _seq_sum(terms, objn) / len(terms)
    att_sum = _seq_sum(list(att.values()), objn)
    total = weighted_total(objn, ah, seg, att_sum, weights)
    return LossBreakdown(objn, ah, seg, att, total, weights)


def batch_loss(model: AttentionMaskNet, samples, cfg: RunConfig, rng: np.random.Generator) -> LossBreakdown:
    """Forward a list of samples and return the loss; windows come from GT attention only."""
    tc = cfg.training
    M = model.heads_cfg.M
    dtype = next(model.parameters()).dtype
    obj_logits, obj_labels, ah_l, ah_t, seg_l, seg_t = [], [], [], [], [], []
    attention: dict = {}
    for sample in samples:
        if tc.flip and rng.random() < 0.5:
            sample = flip_sample(sample)
        pyramid = model.pyramid(sample.image)
        att_logits = model.attention_logits(pyramid)
        gts = gt_attention_for(sample, pyramid, single_map=model.soam_cfg.shared)
        for scale, logits in att_logits.items():
            attention.setdefault(scale, []).append((logits, gts[scale]))
        if model.soam_cfg.shared:
            gts = gt_attention_for(sample, pyramid)
        refs = sample_training_windows(sample, pyramid, tc.windows_per_image, tc.pos_fraction, rng, gts)
        if not refs:
            continue
        windows, refs = _gather(pyramid, refs)
        labels = [assign_window_label(ref, sample, M) for ref in refs]
        obj_logits.append(model.objectness(windows))
        obj_labels.append(torch.tensor([float(lab.objectness) for lab in labels], dtype=dtype))
        pos = [i for i, lab in enumerate(labels) if lab.objectness]
        if pos:
            weighted, gate = model.attentional(windows[pos])
            ah_l.append(gate)
            seg_l.append(model.segmentation(weighted))
            ah_t.append(torch.from_numpy(np.stack([labels[i].ah_target for i in pos])).to(dtype))
            seg_t.append(torch.from_numpy(np.stack([labels[i].seg_target for i in pos])).to(dtype))
    cat = lambda xs: torch.cat(xs) if xs else torch.zeros(0, dtype=dtype)  # noqa: E731
    return total_loss(cat(obj_logits), cat(obj_labels), cat(ah_l), cat(ah_t), cat(seg_l), cat(seg_t),
                      attention, tc.weights, rng)


@dataclass
class TrainResult:
    model: AttentionMaskNet
    history: list  # per-epoch metric rows
    steps: int


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train(manifest: DatasetManifest, cfg: RunConfig, out_dir=None, on_step=None) -> TrainResult:
    """SGD with momentum over the manifest.

    Per step: pyramid, SOAM losses on every scale, windows sampled from GT
    attention, head losses, weighted sum, clipped gradient step. Raises
    ``TrainingDiverged`` on a non-finite loss (metrics so far are written first).
    """
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    tc = cfg.training
    torch.manual_seed(tc.seed)
    model = AttentionMaskNet(cfg.backbone, cfg.soam, cfg.heads)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=tc.learning_rate, momentum=tc.momentum)
    rng = np.random.default_rng(tc.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reads_before = model.predicted_attention_reads
    history, step = [], 0
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        sums = dict.fromkeys(("objn", "ah", "seg", "att_total", "total"), 0.0)
        n_steps = 0
        order = rng.permutation(len(manifest))
        for start in range(0, len(order), tc.batch_images):
            batch = [manifest.samples[i] for i in order[start:start + tc.batch_images]]
            breakdown = batch_loss(model, batch, cfg, rng)
            value = float(breakdown.total.detach())
            if not math.isfinite(value):
                if out is not None:
                    _write_metrics(out / "metrics.csv", history)
                raise TrainingDiverged(step, epoch, value)
            if not identity_holds(breakdown):
                raise AssertionError(f"weighted-sum identity violated at step {step}")
            opt.zero_grad()
            breakdown.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_norm)
            opt.step()
            if on_step is not None:
                on_step(step, breakdown)
            for k, v in breakdown.as_floats().items():
                sums[k] += v
            n_steps += 1
            step += 1
        row = {"epoch": epoch, **{k: v / max(n_steps, 1) for k, v in sums.items()},
               "wall_seconds": time.perf_counter() - t0}
        history.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if out is not None:
            _write_metrics(out / "metrics.csv", history)
    if model.predicted_attention_reads != reads_before:
        raise AssertionError("training read a predicted attention map")
    model.eval()
    if out is not None:
        save_checkpoint(model, out / "checkpoint.npz", extra={"run_config": to_dict(cfg)})
    return TrainResult(model=model, history=history, steps=step)
