"""Command line entry point: gen-data, train, infer, eval, prune-stats, plot, timing.

Exit codes: 0 ok, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig
from .data import ImageSample, _load_image, generate_synthetic_dataset, load_manifest, save_manifest
from .errors import ConfigError, TrainingDiverged
from .evaluation import evaluate, timing_report
from .masks import rle_decode, rle_encode
from .model import load_checkpoint, propose
from .sampler import PruneRow, gt_attention_for, pruning_stats

log = logging.getLogger("attentionmask")

PRUNE_FIELDS = ("scale", "stride", "total_cells", "selected", "gt_positives", "retained_positives",
                "recall", "pruned_fraction")


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _pair(text):
    parts = [int(p) for p in str(text).replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected N or A,B, got {text!r}")
    return tuple(parts)


def _int_list(text):
    return tuple(int(p) for p in text.split(","))


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _write_config(out: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    doc = {"command": command, "config": cfg.to_dict()}
    if extra:
        doc.update(extra)
    (out / "run_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    d = cfg.data
    if args.count is not None:
        d.count = args.count
    if args.size is not None:
        d.image_size = args.size
    if args.size_range is not None:
        d.size_range = args.size_range
    if args.objects is not None:
        d.objects_per_image = args.objects
    if args.seed is not None:
        d.seed = args.seed
    manifest = generate_synthetic_dataset(d.count, tuple(d.image_size), tuple(d.size_range),
                                          tuple(d.objects_per_image), d.seed, split=args.split)
    out = Path(args.out)
    save_manifest(manifest, out)
    _write_config(out, cfg, "gen-data", {"split": args.split})
    log.info("wrote %d samples to %s", len(manifest), out)
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _load_config(args)
    if args.variant:
        cfg.backbone.variant = args.variant
        cfg.backbone.__post_init__()
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    if args.seed is not None:
        cfg.training.seed = args.seed
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg, "train", {"data": str(args.data)})
    try:
        train(manifest, cfg, out_dir=out)
    except TrainingDiverged as exc:
        log.error("%s; partial metrics kept in %s", exc, out / "metrics.csv")
        return 3
    return 0


def _inputs(args):
    if args.data:
        return load_manifest(args.data).samples
    return [ImageSample(id=Path(p).stem, image=_load_image(Path(p))) for p in args.image]


def _attention_png(amap, image_size) -> Image.Image:
    s = amap.scale.stride
    up = np.kron(amap.probs, np.ones((s, s)))[: image_size[0], : image_size[1]]
    return Image.fromarray(np.round(up * 255).astype(np.uint8), mode="L")


def _overlay(image, proposals, n=10) -> Image.Image:
    rgb = image.copy()
    rng = np.random.default_rng(0)
    for p in proposals[:n]:
        color = rng.uniform(0.2, 1.0, size=3)
        rgb[p.mask] = 0.5 * rgb[p.mask] + 0.5 * color
    return Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB")


def _sampler_heads(args, cfg):
    if args.K is not None:
        cfg.sampler.K = math.inf if args.K <= 0 else args.K
    if args.threshold is not None:
        cfg.sampler.threshold = args.threshold
    if args.per_scale is not None:
        cfg.sampler.per_scale = args.per_scale
    cfg.sampler.__post_init__()
    if getattr(args, "k", None) is not None:
        cfg.heads.k = args.k
    return cfg


def cmd_infer(args) -> int:
    cfg = _sampler_heads(args, _load_config(args))
    model = load_checkpoint(args.ckpt)
    heads = model.heads_cfg
    heads.k, heads.bin_threshold, heads.nms = cfg.heads.k, cfg.heads.bin_threshold, cfg.heads.nms
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for sample in _inputs(args):
        result = propose(model, sample.image, cfg.sampler, heads, use_attention=not args.no_attention)
        for p in result.proposals:
            records.append({"image_id": sample.id, "score": p.score, "rle": rle_encode(p.mask)})
        if args.dump_attention:
            for amap in result.attention:
                _attention_png(amap, sample.size).save(out / f"{sample.id}_att_{amap.scale.name}.png")
        if args.overlay:
            _overlay(sample.image, result.proposals).save(out / f"{sample.id}_overlay.png")
    (out / "proposals.json").write_text(json.dumps(records) + "\n")
    _write_config(out, cfg, "infer", {"ckpt": str(args.ckpt), "no_attention": bool(args.no_attention)})
    log.info("wrote %d proposals to %s", len(records), out / "proposals.json")
    return 0


class _MaskOnly:
    __slots__ = ("mask",)

    def __init__(self, mask):
        self.mask = mask


def load_proposals(path) -> dict:
    """proposals.json -> {image_id: [mask, ...]} in file order (score-descending per image)."""
    out: dict = {}
    for rec in json.loads(Path(path).read_text()):
        out.setdefault(str(rec["image_id"]), []).append(_MaskOnly(rle_decode(rec["rle"])))
    return out


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ks = args.k or tuple(cfg.eval.k)
    gt = load_manifest(args.gt)
    proposals = load_proposals(args.proposals)
    result = evaluate(proposals, gt, ks)
    result.config = cfg.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(result.to_json())
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("metric", "value"))
        writer.writerows(result.csv_rows())
    _write_config(out, cfg, "eval", {"proposals": str(args.proposals), "gt": str(args.gt)})
    print(json.dumps({f"AR@{k}": v for k, v in result.ar_at.items()}))
    return 0


def prune_table(model, samples, K, threshold, per_scale=0) -> dict:
    agg: dict = {}
    with torch.no_grad():
        for sample in samples:
            pyramid = model.pyramid(sample.image)
            maps = model.attention_maps(pyramid)
            gts = list(gt_attention_for(sample, pyramid).values())
            for name, row in pruning_stats(maps, gts, K, threshold, per_scale).items():
                agg.setdefault(name, PruneRow(row.scale, row.stride)).add(row)
    return agg


def write_prune_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PRUNE_FIELDS)
        writer.writeheader()
        for row in rows.values():
            writer.writerow(row.as_dict())


def cmd_prune_stats(args) -> int:
    cfg = _sampler_heads(args, _load_config(args))
    model = load_checkpoint(args.ckpt)
    rows = prune_table(model, load_manifest(args.data).samples, cfg.sampler.K, cfg.sampler.threshold,
                       cfg.sampler.per_scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_prune_csv(out / "prune_stats.csv", rows)
    _write_config(out, cfg, "prune-stats", {"ckpt": str(args.ckpt), "data": str(args.data)})
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    docs = [(Path(p).parent.name or Path(p).stem, json.loads(Path(p).read_text())) for p in args.eval]
    fig, ax = plt.subplots(figsize=(4, 3))
    for name, doc in docs:
        curve = sorted((float(t), v) for t, v in doc["recall_curve"].items())
        ax.plot([t for t, _ in curve], [v if v is not None else np.nan for _, v in curve], marker="o", label=name)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("recall@100")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / f"recall_curve.{args.format}")
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(4, 3))
    for name, doc in docs:
        pts = sorted((int(k), v) for k, v in doc["ar_at"].items())
        ax.plot([k for k, _ in pts], [v if v is not None else np.nan for _, v in pts], marker="o", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("# proposals")
    ax.set_ylabel("AR")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / f"ar_vs_k.{args.format}")
    plt.close(fig)
    return 0


def cmd_timing(args) -> int:
    cfg = _sampler_heads(args, _load_config(args))
    model = load_checkpoint(args.ckpt)
    heads = model.heads_cfg
    heads.k = cfg.heads.k
    reports = []
    for sample in _inputs(args):
        for on in (True, False):
            rep = timing_report(sample.image, model, cfg.sampler, heads, use_attention=on, repeats=args.repeats)
            reports.append({"image_id": sample.id, "attention": on, **asdict(rep)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "timing.json").write_text(json.dumps({"config": cfg.to_dict(), "reports": reports}, indent=1) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = ArgumentParser(prog="attentionmask", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=_pair, help="image side N or H,W")
    g.add_argument("--size-range", type=_pair, help="min,max object side in pixels")
    g.add_argument("--objects", type=_pair, help="min,max objects per image")
    g.add_argument("--seed", type=int)
    g.add_argument("--split", default="train", choices=("train", "val", "test"))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--variant", choices=("am8_128", "am8_192", "am16_192"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    def sampling_flags(sp):
        sp.add_argument("--K", type=float, help="joint-ranking budget (<= 0 for unlimited)")
        sp.add_argument("--threshold", type=float, help="minimum attention to sample a window")
        sp.add_argument("--per-scale", type=int, help="cap on windows from any one scale (0 = none)")

    i = sub.add_parser("infer", help="generate proposals")
    i.add_argument("--ckpt", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", nargs="+")
    src.add_argument("--data")
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.add_argument("--k", type=int, help="proposals per image")
    sampling_flags(i)
    i.add_argument("--no-attention", action="store_true", help="sample every window (exhaustive baseline)")
    i.add_argument("--dump-attention", action="store_true", help="write one attention PNG per scale")
    i.add_argument("--overlay", action="store_true", help="write a PNG with the top proposals drawn")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="average recall of a proposals file")
    e.add_argument("--proposals", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--k", type=_int_list)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("prune-stats", help="per-scale attention pruning recall")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    sampling_flags(r)
    r.set_defaults(func=cmd_prune_stats)

    pl = sub.add_parser("plot", help="recall curve and AR-vs-k figures")
    pl.add_argument("--eval", required=True, nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--format", default="png", choices=("png", "svg"))
    pl.set_defaults(func=cmd_plot)

    tm = sub.add_parser("timing", help="per-stage inference timings, attention on vs off")
    tm.add_argument("--ckpt", required=True)
    src = tm.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", nargs="+")
    src.add_argument("--data")
    tm.add_argument("--out", required=True)
    tm.add_argument("--config")
    tm.add_argument("--k", type=int)
    tm.add_argument("--repeats", type=int, default=5)
    sampling_flags(tm)
    tm.set_defaults(func=cmd_timing)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    if args.threads == 1:
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
