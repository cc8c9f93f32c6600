"""Annotated image samples: synthetic generation, COCO ingestion, manifests on disk."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .masks import mask_bbox, rasterize_polygon, rle_decode, rle_encode

log = logging.getLogger(__name__)

SMALL_AREA = 32 ** 2
LARGE_AREA = 96 ** 2
SHAPES = ("circle", "rectangle", "triangle")


@dataclass
class AnnotatedObject:
    id: int
    mask: np.ndarray
    bbox: tuple[int, int, int, int]
    area: int
    category: str = "object"

    @classmethod
    def from_mask(cls, id: int, mask: np.ndarray, category: str = "object") -> "AnnotatedObject":
        mask = np.asarray(mask, dtype=bool)
        return cls(id=int(id), mask=mask, bbox=mask_bbox(mask), area=int(mask.sum()), category=category)

    def validate(self) -> None:
        if self.area <= 0:
            raise ValueError(f"object {self.id}: area must be positive")
        if self.area != int(self.mask.sum()):
            raise ValueError(f"object {self.id}: area {self.area} != mask pixel count")
        if tuple(self.bbox) != mask_bbox(self.mask):
            raise ValueError(f"object {self.id}: bbox {self.bbox} is not the tight mask box")

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    objects: list[AnnotatedObject] = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def validate(self) -> None:
        for obj in self.objects:
            if obj.mask.shape != self.size:
                raise ValueError(f"sample {self.id}: mask shape {obj.mask.shape} != image {self.size}")
            obj.validate()


@dataclass
class DatasetManifest:
    samples: list[ImageSample]
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a manifest")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.samples)

    def by_id(self) -> dict[str, ImageSample]:
        return {s.id: s for s in self.samples}


def size_bucket(area) -> str:
    """COCO size bucket; boundaries go to the larger bucket."""
    if area <= 0:
        raise ValueError(f"area must be positive, got {area}")
    if area < SMALL_AREA:
        return "small"
    if area < LARGE_AREA:
        return "medium"
    return "large"


# ---------------------------------------------------------------------------
# synthetic data


def _background(rng, h, w):
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    theta = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]
    # low-frequency blotches plus pixel noise
    coarse = rng.normal(0, 0.06, size=(h // 16 + 2, w // 16 + 2, 3))
    coarse = np.kron(coarse, np.ones((16, 16, 1)))[:h, :w]
    img += coarse + rng.normal(0, 0.03, size=(h, w, 3))
    return img


def _shape_mask(kind, x, y, w, h, rng, height, width):
    yy, xx = np.mgrid[0:height, 0:width]
    cx, cy = xx + 0.5, yy + 0.5
    if kind == "rectangle":
        return (cx >= x) & (cx < x + w) & (cy >= y) & (cy < y + h)
    if kind == "circle":
        rx, ry = w / 2.0, h / 2.0
        return ((cx - x - rx) / rx) ** 2 + ((cy - y - ry) / ry) ** 2 <= 1.0
    apex = x + rng.uniform(0.0, 1.0) * w
    return rasterize_polygon([x, y + h, x + w, y + h, apex, y], height, width)


def _object_color(rng, bg_mean):
    for _ in range(20):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - bg_mean).sum() > 0.45:
            return color
    return 1.0 - bg_mean


def _generate_image(index, seed, image_size, size_range, objects_per_image):
    h, w = image_size
    rng = np.random.default_rng([seed, index])
    img = _background(rng, h, w)
    n_obj = int(rng.integers(objects_per_image[0], objects_per_image[1] + 1))
    occupied = np.zeros((h, w), dtype=bool)
    objects = []
    lo, hi = math.log(size_range[0]), math.log(size_range[1])
    for _ in range(n_obj):
        for _attempt in range(50):
            side = math.exp(rng.uniform(lo, hi))
            aspect = math.sqrt(rng.uniform(0.75, 1.33))
            ow = int(np.clip(round(side * aspect), size_range[0], size_range[1]))
            oh = int(np.clip(round(side / aspect), size_range[0], size_range[1]))
            x = int(rng.integers(0, w - ow + 1))
            y = int(rng.integers(0, h - oh + 1))
            kind = SHAPES[int(rng.integers(len(SHAPES)))]
            mask = _shape_mask(kind, x, y, ow, oh, rng, h, w)
            if mask.sum() < 4 or (mask & occupied).any():
                continue
            occupied |= mask
            bg_mean = img[mask].mean(axis=0)
            color = _object_color(rng, bg_mean)
            shade = color[None, :] + rng.normal(0, 0.02, size=(int(mask.sum()), 3))
            img[mask] = shade
            objects.append(AnnotatedObject.from_mask(len(objects) + 1, mask, kind))
            break
    # quantize so that a PNG round trip is lossless
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return ImageSample(id=f"syn{seed}_{index:05d}", image=img.astype(np.float32), objects=objects)


def generate_synthetic_dataset(count, image_size, size_range, objects_per_image, seed, split="train"):
    """Random filled shapes on textured backgrounds, with per-object masks.

    Each image is generated from its own ``(seed, index)`` stream, so the result
    is a pure function of the arguments.
    """
    h, w = image_size
    min_px, max_px = size_range
    if count < 1:
        raise ConfigError("count must be >= 1")
    if min_px < 4 or max_px < min_px or max_px > min(h, w):
        raise ConfigError(f"invalid size_range {size_range} for image {image_size}")
    if objects_per_image[0] < 0 or objects_per_image[1] < objects_per_image[0]:
        raise ConfigError(f"invalid objects_per_image {objects_per_image}")
    samples = [_generate_image(i, seed, (h, w), size_range, objects_per_image) for i in range(count)]
    return DatasetManifest(samples=samples, split=split, seed=seed)


# ---------------------------------------------------------------------------
# COCO ingestion


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_coco_annotations(json_path, image_dir, split="val"):
    """Read a COCO-style polygon annotation file into a manifest.

    Samples whose image file is missing are skipped with a warning; objects
    that rasterize to zero pixels are dropped.
    """
    with open(json_path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise ValueError(f"{json_path}: expected 'images' and 'annotations' arrays")
    images = {img["id"]: img for img in doc["images"]}
    per_image: dict = {k: [] for k in images}
    for ann in doc["annotations"]:
        if ann["image_id"] not in images:
            raise ValueError(f"annotation {ann.get('id')} references unknown image_id {ann['image_id']}")
        per_image[ann["image_id"]].append(ann)

    samples = []
    for img_id, info in images.items():
        path = Path(image_dir) / info["file_name"]
        if not path.exists():
            log.warning("missing image file %s, skipping sample %s", path, img_id)
            continue
        image = _load_image(path)
        h, w = image.shape[:2]
        objects = []
        for ann in per_image[img_id]:
            seg = ann["segmentation"]
            if not isinstance(seg, list):
                raise ValueError(f"annotation {ann.get('id')}: only polygon segmentations are supported")
            mask = np.zeros((h, w), dtype=bool)
            for poly in seg:
                mask |= rasterize_polygon(poly, h, w)
            if not mask.any():
                log.warning("annotation %s rasterizes to zero area, dropped", ann.get("id"))
                continue
            objects.append(AnnotatedObject.from_mask(ann["id"], mask, str(ann.get("category_id", "object"))))
        sample = ImageSample(id=str(img_id), image=image, objects=objects)
        sample.validate()
        samples.append(sample)
    return DatasetManifest(samples=samples, split=split, seed=0)


# ---------------------------------------------------------------------------
# manifest directories: manifest.json + images/<id>.png


def manifest_document(manifest: DatasetManifest) -> dict:
    samples = []
    for s in manifest.samples:
        samples.append({
            "id": s.id,
            "file": f"images/{s.id}.png",
            "height": s.size[0],
            "width": s.size[1],
            "objects": [
                {"id": o.id, "bbox": list(o.bbox), "area": o.area, "category": o.category,
                 "rle": rle_encode(o.mask)}
                for o in s.objects
            ],
        })
    return {"split": manifest.split, "seed": manifest.seed, "samples": samples}


def save_manifest(manifest: DatasetManifest, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for s in manifest.samples:
        pixels = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(out / "images" / f"{s.id}.png")
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest_document(manifest), indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    samples = []
    for entry in doc["samples"]:
        image = _load_image(path.parent / entry["file"])
        objects = [
            AnnotatedObject(id=o["id"], mask=rle_decode(o["rle"]), bbox=tuple(o["bbox"]),
                            area=o["area"], category=o["category"])
            for o in entry["objects"]
        ]
        sample = ImageSample(id=entry["id"], image=image, objects=objects)
        sample.validate()
        samples.append(sample)
    return DatasetManifest(samples=samples, split=doc["split"], seed=doc["seed"])


def flip_sample(sample: ImageSample) -> ImageSample:
    """Horizontal mirror of image and masks."""
    objects = [AnnotatedObject.from_mask(o.id, o.mask[:, ::-1].copy(), o.category) for o in sample.objects]
    return ImageSample(id=sample.id, image=sample.image[:, ::-1].copy(), objects=objects)
