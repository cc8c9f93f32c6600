import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from attentionmask.data import (AnnotatedObject, DatasetManifest, ImageSample, flip_sample,
                                generate_synthetic_dataset, load_coco_annotations, load_manifest,
                                save_manifest, size_bucket)
from attentionmask.errors import ConfigError
from attentionmask.masks import mask_bbox, rasterize_polygon, rle_decode, rle_encode


def _convex_hull(points):
    pts = sorted(map(tuple, points))

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and ((out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                                     - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(reversed(pts))
    return lower[:-1] + upper[:-1]  # counter-clockwise


def _halfplane_oracle(hull, h, w):
    """Pixel-by-pixel: center inside iff on the left of every CCW edge."""
    out = np.zeros((h, w), dtype=bool)
    n = len(hull)
    for y in range(h):
        for x in range(w):
            cx, cy = x + 0.5, y + 0.5
            inside = True
            for i in range(n):
                (ax, ay), (bx, by) = hull[i], hull[(i + 1) % n]
                if (bx - ax) * (cy - ay) - (by - ay) * (cx - ax) < 0:
                    inside = False
                    break
            out[y, x] = inside
    return out


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.integers(4, 64), w=st.integers(4, 64))
def test_convex_rasterization_matches_halfplane_oracle(seed, h, w):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-4, [w + 4, h + 4], size=(rng.integers(3, 9), 2))
    hull = _convex_hull(pts)
    if len(hull) < 3:
        return
    flat = [c for p in hull for c in p]
    np.testing.assert_array_equal(rasterize_polygon(flat, h, w), _halfplane_oracle(hull, h, w))


def test_rasterization_is_orientation_independent():
    square = [10, 10, 20, 10, 20, 20, 10, 20]
    reversed_square = [10, 20, 20, 20, 20, 10, 10, 10]
    a = rasterize_polygon(square, 32, 32)
    np.testing.assert_array_equal(a, rasterize_polygon(reversed_square, 32, 32))
    assert a.sum() == 100
    assert mask_bbox(a) == (10, 10, 10, 10)


def test_degenerate_polygon_is_empty():
    assert not rasterize_polygon([0, 0, 5, 5], 8, 8).any()
    assert not rasterize_polygon([1, 1, 5, 1, 9, 1], 8, 8).any()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40))
def test_rle_round_trip(seed, h, w):
    mask = np.random.default_rng(seed).random((h, w)) < 0.3
    rle = rle_encode(mask)
    assert rle["size"] == [h, w]
    assert sum(rle["counts"]) == h * w
    np.testing.assert_array_equal(rle_decode(rle), mask)


def test_rle_is_column_major_and_starts_with_zero_run():
    mask = np.array([[1, 0], [1, 1]], dtype=bool)
    assert rle_encode(mask)["counts"] == [0, 2, 1, 1]
    assert rle_encode(np.zeros((2, 3), dtype=bool))["counts"] == [6]
    with pytest.raises(ValueError):
        rle_decode({"size": [2, 2], "counts": [1, 1]})


@pytest.mark.parametrize("area,bucket", [(1, "small"), (1023, "small"), (1024, "medium"),
                                         (9215, "medium"), (9216, "large"), (10**6, "large")])
def test_size_bucket_boundaries(area, bucket):
    assert size_bucket(area) == bucket


@pytest.mark.parametrize("area", [0, -5])
def test_size_bucket_rejects_nonpositive(area):
    with pytest.raises(ValueError):
        size_bucket(area)


def test_single_object_generation():
    m = generate_synthetic_dataset(1, (128, 128), (8, 32), (1, 1), seed=7)
    assert len(m) == 1
    (obj,) = m.samples[0].objects
    assert 40 <= obj.area <= 1024
    obj.validate()
    img = m.samples[0].image
    assert img.shape == (128, 128, 3) and img.dtype == np.float32
    assert 0.0 <= img.min() and img.max() <= 1.0


def test_generation_is_byte_identical(tmp_path):
    for run in ("a", "b"):
        m = generate_synthetic_dataset(3, (96, 96), (8, 40), (1, 3), seed=7)
        save_manifest(m, tmp_path / run)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 4
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generation_depends_on_seed_and_index():
    a = generate_synthetic_dataset(2, (96, 96), (8, 40), (1, 3), seed=7)
    b = generate_synthetic_dataset(2, (96, 96), (8, 40), (1, 3), seed=8)
    assert not np.array_equal(a.samples[0].image, b.samples[0].image)
    assert not np.array_equal(a.samples[0].image, a.samples[1].image)
    # per-image streams: a longer dataset shares its prefix
    c = generate_synthetic_dataset(3, (96, 96), (8, 40), (1, 3), seed=7)
    np.testing.assert_array_equal(a.samples[1].image, c.samples[1].image)


def test_default_dataset_has_small_and_medium_objects():
    m = generate_synthetic_dataset(200, (256, 256), (8, 96), (2, 6), seed=1)
    buckets = {size_bucket(o.area) for s in m.samples for o in s.objects}
    assert {"small", "medium"} <= buckets
    for s in m.samples:
        assert 2 <= len(s.objects) <= 6
        s.validate()
        union = np.zeros(s.size, dtype=int)
        for o in s.objects:
            o.validate()
            union += o.mask
        assert union.max() <= 1  # placed without overlap


@pytest.mark.parametrize("kwargs", [
    dict(count=0), dict(size_range=(2, 10)), dict(size_range=(8, 200)),
    dict(size_range=(20, 10)), dict(objects_per_image=(3, 1)),
])
def test_invalid_generation_arguments(kwargs):
    args = dict(count=1, image_size=(64, 64), size_range=(8, 32), objects_per_image=(1, 2), seed=0)
    args.update(kwargs)
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(**args)


def test_manifest_round_trip(tmp_path):
    m = generate_synthetic_dataset(2, (80, 96), (8, 40), (1, 3), seed=3, split="val")
    save_manifest(m, tmp_path)
    back = load_manifest(tmp_path)
    assert back.split == "val" and back.seed == 3
    for s, t in zip(m.samples, back.samples):
        assert s.id == t.id
        np.testing.assert_array_equal(s.image, t.image)  # quantized to /255 at generation
        for o, p in zip(s.objects, t.objects):
            np.testing.assert_array_equal(o.mask, p.mask)
            assert (o.bbox, o.area) == (p.bbox, p.area)


def test_manifest_validation():
    s = ImageSample("a", np.zeros((8, 8, 3), np.float32))
    with pytest.raises(ValueError):
        DatasetManifest([s, s], "train", 0)
    with pytest.raises(ValueError):
        DatasetManifest([s], "holdout", 0)
    obj = AnnotatedObject.from_mask(1, np.eye(8, dtype=bool))
    obj.bbox = (0, 0, 7, 8)
    with pytest.raises(ValueError):
        obj.validate()


def test_flip_mirrors_masks():
    mask = np.zeros((10, 20), dtype=bool)
    mask[2:5, 1:4] = True
    s = ImageSample("x", np.zeros((10, 20, 3), np.float32), [AnnotatedObject.from_mask(1, mask)])
    f = flip_sample(s)
    assert f.objects[0].bbox == (16, 2, 3, 3)
    np.testing.assert_array_equal(flip_sample(f).objects[0].mask, mask)


# --- COCO ingestion ---------------------------------------------------------


def _coco(tmp_path, annotations, images=None, write=("a.png",)):
    images = images or [{"id": 1, "file_name": "a.png", "height": 32, "width": 32}]
    for name in write:
        Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(tmp_path / name)
    path = tmp_path / "ann.json"
    path.write_text(json.dumps({"images": images, "annotations": annotations}))
    return path


def test_coco_square_polygon(tmp_path):
    ann = [{"id": 5, "image_id": 1, "segmentation": [[10, 10, 20, 10, 20, 20, 10, 20]],
            "area": 100, "bbox": [10, 10, 10, 10]}]
    m = load_coco_annotations(_coco(tmp_path, ann), tmp_path)
    (obj,) = m.samples[0].objects
    assert obj.area == 100 and obj.bbox == (10, 10, 10, 10)
    oracle = _halfplane_oracle([(10, 10), (20, 10), (20, 20), (10, 20)], 32, 32)
    np.testing.assert_array_equal(obj.mask, oracle)


def test_coco_empty_annotations(tmp_path):
    m = load_coco_annotations(_coco(tmp_path, []), tmp_path)
    assert len(m) == 1 and m.samples[0].objects == []


def test_coco_unknown_image_id(tmp_path):
    ann = [{"id": 5, "image_id": 9, "segmentation": [[0, 0, 4, 0, 4, 4]]}]
    with pytest.raises(ValueError, match="unknown image_id"):
        load_coco_annotations(_coco(tmp_path, ann), tmp_path)


def test_coco_missing_file_and_zero_area(tmp_path, caplog):
    images = [{"id": 1, "file_name": "a.png", "height": 32, "width": 32},
              {"id": 2, "file_name": "gone.png", "height": 32, "width": 32}]
    ann = [{"id": 7, "image_id": 1, "segmentation": [[3, 3, 3.2, 3, 3.2, 3.2]]}]
    with caplog.at_level(logging.WARNING):
        m = load_coco_annotations(_coco(tmp_path, ann, images), tmp_path)
    assert [s.id for s in m.samples] == ["1"]
    assert m.samples[0].objects == []
    assert "gone.png" in caplog.text and "zero area" in caplog.text


def test_coco_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(json.JSONDecodeError):
        load_coco_annotations(path, tmp_path)
