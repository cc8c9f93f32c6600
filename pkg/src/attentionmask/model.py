"""The assembled proposal network, its inference pipeline and checkpoint archive."""

from __future__ import annotations

import io
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, FeaturePyramid, build_pyramid
from .config import HeadsConfig, SamplerConfig, SoamConfig, from_dict, to_dict
from .heads import AttentionalHead, ObjectnessHead, SegmentationHead, assemble_proposal, box_nms, select_top_windows
from .sampler import exhaustive_windows, extract_windows, joint_rank
from .soam import AttentionMap, Soam, attention_probs

CHECKPOINT_FORMAT = "attentionmask-checkpoint/1"


class AttentionMaskNet(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, soam_cfg: SoamConfig | None = None,
                 heads_cfg: HeadsConfig | None = None):
        super().__init__()
        soam_cfg = soam_cfg or SoamConfig()
        heads_cfg = heads_cfg or HeadsConfig()
        self.backbone_cfg, self.soam_cfg, self.heads_cfg = backbone_cfg, soam_cfg, heads_cfg
        c = backbone_cfg.feature_channels
        hidden = heads_cfg.hidden or c
        self.backbone = Backbone(backbone_cfg)
        if soam_cfg.shared:
            self.soams = nn.ModuleDict({"shared": Soam(c, soam_cfg.depth)})
        else:
            self.soams = nn.ModuleDict({s.name: Soam(c, soam_cfg.depth) for s in backbone_cfg.scales})
        self.objectness = ObjectnessHead(c, hidden)
        self.attentional = AttentionalHead(c)
        self.segmentation = SegmentationHead(c, hidden, heads_cfg.M)
        # incremented whenever a predicted attention map is read for window selection
        self.predicted_attention_reads = 0

    @property
    def scales(self):
        return self.backbone_cfg.scales

    def soam_for(self, scale) -> Soam:
        return self.soams["shared"] if self.soam_cfg.shared else self.soams[scale.name]

    def pyramid(self, image: np.ndarray) -> FeaturePyramid:
        return build_pyramid(image, self.backbone)

    def attention_logits(self, pyramid: FeaturePyramid) -> dict:
        return {s: self.soam_for(s)(pyramid[s].data) for s in pyramid.scales}

    def attention_maps(self, pyramid: FeaturePyramid) -> list:
        self.predicted_attention_reads += 1
        maps = []
        for scale, logits in self.attention_logits(pyramid).items():
            probs = attention_probs(logits).detach().cpu().numpy().astype(np.float64)
            maps.append(AttentionMap(probs=probs, scale=scale))
        return maps

    def window_heads(self, windows: torch.Tensor):
        """Objectness logits, gated windows, gate logits and mask logits for a window batch."""
        obj = self.objectness(windows)
        weighted, gate = self.attentional(windows)
        seg = self.segmentation(weighted)
        return obj, gate, seg


@dataclass
class StageTimer:
    seconds: dict = field(default_factory=lambda: {"base_net": 0.0, "soams": 0.0, "window_sampling": 0.0, "heads": 0.0})

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] += time.perf_counter() - t0


@dataclass
class InferenceResult:
    proposals: list
    attention: list
    n_windows: int
    timings: dict


def _gather(pyramid, refs):
    """Extract windows for ``refs`` grouped by scale; returns (tensor, refs in tensor order)."""
    grouped: dict = {}
    for ref in refs:
        grouped.setdefault(ref.scale, []).append(ref)
    tensors, ordered = [], []
    for scale, group in grouped.items():
        centers = np.array([r.center for r in group], dtype=np.int64)
        tensors.append(extract_windows(pyramid[scale].data, centers, scale.window_size))
        ordered += group
    return torch.cat(tensors), ordered


@torch.no_grad()
def propose(model: AttentionMaskNet, image: np.ndarray, sampler: SamplerConfig | None = None,
            heads: HeadsConfig | None = None, use_attention: bool = True, chunk: int = 512) -> InferenceResult:
    """Full inference: pyramid, attention, selective sampling, objectness, top-k masks."""
    sampler = sampler or SamplerConfig()
    heads = heads or model.heads_cfg
    model.eval()
    timer = StageTimer()
    with timer.stage("base_net"):
        pyramid = model.pyramid(image)
    maps = []
    if use_attention:
        with timer.stage("soams"):
            maps = model.attention_maps(pyramid)
    with timer.stage("window_sampling"):
        ranked = joint_rank(maps, sampler.K, sampler.threshold, sampler.per_scale) if use_attention else exhaustive_windows(pyramid)
        refs = list(ranked)
        windows, refs = _gather(pyramid, refs) if refs else (None, [])
    proposals = []
    with timer.stage("heads"):
        if refs:
            scores = torch.cat([torch.sigmoid(model.objectness(windows[i:i + chunk]))
                                for i in range(0, len(refs), chunk)])
            index = {id(r): i for i, r in enumerate(refs)}
            top = select_top_windows([(r, float(s)) for r, s in zip(refs, scores.tolist())], heads.k)
            sel = torch.tensor([index[id(r)] for r, _ in top], dtype=torch.long)
            seg_logits = []
            for i in range(0, len(sel), chunk):
                weighted, _ = model.attentional(windows[sel[i:i + chunk]])
                seg_logits.append(model.segmentation(weighted))
            seg_logits = torch.cat(seg_logits)
            for (ref, score), logits in zip(top, seg_logits):
                proposals.append(assemble_proposal(logits, ref, score, pyramid.image_size, heads.bin_threshold))
            proposals = [p for p in proposals if p.area > 0]
            if heads.nms:
                proposals = box_nms(proposals, heads.nms_iou)
    timer.seconds["total"] = sum(timer.seconds.values())
    return InferenceResult(proposals=proposals, attention=maps, n_windows=len(refs), timings=timer.seconds)


# ---------------------------------------------------------------------------
# checkpoint: .npz archive of float32 arrays keyed by hierarchical parameter
# name, plus a "__header__" entry holding UTF-8 JSON with the model config


def save_checkpoint(model: AttentionMaskNet, path, extra: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "backbone": to_dict(model.backbone_cfg),
        "soam": to_dict(model.soam_cfg),
        "heads": to_dict(model.heads_cfg),
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    if extra:
        header.update(extra)
    arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint_header(path) -> dict:
    with np.load(path) as archive:
        return json.loads(archive["__header__"].tobytes().decode())


def load_checkpoint(path, dtype=torch.float32) -> AttentionMaskNet:
    with np.load(path) as archive:
        header = json.loads(archive["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        model = AttentionMaskNet(from_dict(BackboneConfig, header["backbone"]),
                                 from_dict(SoamConfig, header["soam"]),
                                 from_dict(HeadsConfig, header["heads"]))
        state = model.state_dict()
        for name, value in state.items():
            if name not in archive.files:
                raise ValueError(f"{path}: missing parameter {name}")
            arr = archive[name]
            if tuple(arr.shape) != tuple(value.shape):
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {tuple(value.shape)}")
            state[name] = torch.from_numpy(arr).to(value.dtype)
    model.load_state_dict(state)
    if dtype != torch.float32:
        model.to(dtype)
    model.eval()
    return model

