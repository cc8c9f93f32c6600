"""Binary mask helpers: polygon rasterization and uncompressed RLE."""

from __future__ import annotations

import numpy as np


def rasterize_polygon(polygon, height: int, width: int) -> np.ndarray:
    """Rasterize a flat ``[x0, y0, x1, y1, ...]`` polygon to a boolean mask.

    A pixel is inside iff its center ``(x + 0.5, y + 0.5)`` passes the
    even-odd crossing test. Edges are half-open, which makes top and left
    boundaries inclusive and bottom and right boundaries exclusive.
    """
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        return np.zeros((height, width), dtype=bool)
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        spans = (ay <= py) != (by <= py)
        if not spans.any():
            continue
        rows = np.nonzero(spans)[0]
        x_cross = ax + (py[rows] - ay) * (bx - ax) / (by - ay)
        inside[rows] ^= px[None, :] < x_cross[:, None]
    return inside


def rle_encode(mask: np.ndarray) -> dict:
    """Column-major uncompressed RLE; counts always start with a 0-run."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel(order="F").astype(np.int8)
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": []}
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return {"size": [int(s) for s in mask.shape], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise ValueError(f"RLE counts sum to {counts.sum()}, expected {h * w}")
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values, counts).astype(bool)
    return flat.reshape((h, w), order="F")


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight ``(x, y, w, h)`` box of the nonzero pixels."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if len(rows) == 0:
        return (0, 0, 0, 0)
    return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
