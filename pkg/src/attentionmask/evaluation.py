"""Proposal evaluation: mask IoU, average recall, recall-vs-IoU and stage timings."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetManifest, size_bucket

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
BUCKETS = ("small", "medium", "large")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return int(np.logical_and(a, b).sum()) / union


def iou_matrix(gt_masks, proposal_masks) -> np.ndarray:
    """G x P matrix of mask IoUs."""
    if len(gt_masks) == 0 or len(proposal_masks) == 0:
        return np.zeros((len(gt_masks), len(proposal_masks)))
    g = np.stack([np.asarray(m, dtype=bool).ravel() for m in gt_masks]).astype(np.float32)
    p = np.stack([np.asarray(m, dtype=bool).ravel() for m in proposal_masks]).astype(np.float32)
    inter = (g @ p.T).astype(np.int64)
    union = g.sum(1).astype(np.int64)[:, None] + p.sum(1).astype(np.int64)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return iou


def _masks(proposals):
    return [p.mask if hasattr(p, "mask") else p for p in proposals]


def best_ious(proposals: dict, gt: DatasetManifest, k: int, bucket: str | None = None) -> np.ndarray:
    """Best IoU of every (bucket-filtered) GT object over its image's top-k proposals."""
    out = []
    for sample in gt.samples:
        objs = [o for o in sample.objects if bucket is None or size_bucket(o.area) == bucket]
        if not objs:
            continue
        props = _masks(proposals.get(sample.id, []))[:k]
        iou = iou_matrix([o.mask for o in objs], props)
        out.append(iou.max(axis=1) if iou.shape[1] else np.zeros(len(objs)))
    return np.concatenate(out) if out else np.zeros(0)


def threshold_hits(best: np.ndarray, thresholds=IOU_THRESHOLDS) -> list:
    return [int((best >= t).sum()) for t in thresholds]


def average_recall(proposals: dict, gt: DatasetManifest, k: int, bucket: str | None = None,
                   thresholds=IOU_THRESHOLDS) -> float:
    """Mean over IoU thresholds of the fraction of GT objects matched by the top-k proposals.

    ``proposals`` maps image id to a score-descending list of proposals (or
    masks). Matching is per-GT best IoU; a proposal may match several objects.
    """
    best = best_ious(proposals, gt, k, bucket)
    if len(best) == 0:
        log.warning("no ground-truth objects%s; AR undefined", f" in bucket {bucket}" if bucket else "")
        return float("nan")
    return sum(threshold_hits(best, thresholds)) / (len(best) * len(thresholds))


def recall_curve(proposals: dict, gt: DatasetManifest, k: int = 100, thresholds=IOU_THRESHOLDS) -> dict:
    best = best_ious(proposals, gt, k)
    if len(best) == 0:
        log.warning("no ground-truth objects; recall undefined")
        return {t: float("nan") for t in thresholds}
    return {t: h / len(best) for t, h in zip(thresholds, threshold_hits(best, thresholds))}


@dataclass
class EvalResult:
    ar_at: dict
    ar_bucket_at_100: dict
    recall_curve: dict
    n_gt: int
    n_gt_bucket: dict
    proposal_shortfall: dict = field(default_factory=dict)  # k -> images with fewer than k proposals
    per_image: list = field(default_factory=list)
    config: dict | None = None

    def to_json(self) -> str:
        doc = asdict(self)
        doc["ar_at"] = {str(k): v for k, v in self.ar_at.items()}
        doc["recall_curve"] = {f"{t:.2f}": v for t, v in self.recall_curve.items()}
        doc["proposal_shortfall"] = {str(k): v for k, v in self.proposal_shortfall.items()}
        return json.dumps(_nan_to_none(doc), indent=1, sort_keys=True) + "\n"

    def csv_rows(self) -> list:
        rows = [("AR@%d" % k, v) for k, v in self.ar_at.items()]
        rows += [(f"AR^{b[0].upper()}@100", v) for b, v in self.ar_bucket_at_100.items()]
        rows += [(f"recall@100_iou{t:.2f}", v) for t, v in self.recall_curve.items()]
        return rows


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, float) and obj != obj:
        return None
    return obj


def evaluate(proposals: dict, gt: DatasetManifest, ks=(10, 100, 1000), per_image: bool = False) -> EvalResult:
    ar_at = {int(k): average_recall(proposals, gt, int(k)) for k in ks}
    buckets = {b: average_recall(proposals, gt, 100, b) for b in BUCKETS}
    counts = {b: sum(size_bucket(o.area) == b for s in gt.samples for o in s.objects) for b in BUCKETS}
    shortfall = {int(k): sum(len(proposals.get(s.id, [])) < k for s in gt.samples) for k in ks}
    rows = []
    if per_image:
        for s in gt.samples:
            best = best_ious(proposals, DatasetManifest([s], gt.split, gt.seed), 100)
            rows.append({"image_id": s.id, "n_gt": len(best), "n_proposals": len(proposals.get(s.id, [])),
                         "best_iou": [float(v) for v in best]})
    return EvalResult(ar_at=ar_at, ar_bucket_at_100=buckets, recall_curve=recall_curve(proposals, gt, 100),
                      n_gt=sum(counts.values()), n_gt_bucket=counts, proposal_shortfall=shortfall,
                      per_image=rows)


@dataclass
class TimingReport:
    base_net: float
    soams: float
    window_sampling: float
    heads: float
    total: float
    repeats: int
    n_windows: int


def timing_report(image: np.ndarray, model, sampler=None, heads=None, use_attention: bool = True,
                  repeats: int = 5) -> TimingReport:
    """Median wall-clock seconds per inference stage after one warm-up run."""
    from .model import propose

    propose(model, image, sampler, heads, use_attention)
    runs = [propose(model, image, sampler, heads, use_attention) for _ in range(max(repeats, 1))]
    med = {k: statistics.median(r.timings[k] for r in runs) for k in runs[0].timings}
    return TimingReport(base_net=med["base_net"], soams=med["soams"], window_sampling=med["window_sampling"],
                        heads=med["heads"], total=med["total"], repeats=len(runs), n_windows=runs[0].n_windows)
