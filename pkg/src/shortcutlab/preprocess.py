"""Image preprocessing pipeline: border trim, histogram equalization, resize, crop, rotate.

Pipeline order is fixed: trim -> equalize -> resize (smaller axis to the crop
size, aspect preserved) -> crop. Train mode uses a random crop plus a random
in-plane rotation with reflect-filled corners; eval mode center-crops and is
fully deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

__all__ = [
    "trim_border",
    "equalize_histogram",
    "resize_min_side",
    "center_crop",
    "random_crop",
    "rotate",
    "preprocess",
]


def trim_border(image: np.ndarray) -> np.ndarray:
    """Drop all-zero rows/columns at the edges (solid black borders)."""
    rows = np.flatnonzero(image.any(axis=1))
    cols = np.flatnonzero(image.any(axis=0))
    if rows.size == 0 or cols.size == 0:
        return image.copy()
    return image[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].copy()


def equalize_histogram(image: np.ndarray, bins: int = 256) -> np.ndarray:
    """Cumulative-distribution remap over fixed bins on [0, 1].

    Each pixel maps to the CDF value of its bin. Degenerate images whose
    pixels all fall in one bin are returned unchanged, making constant images
    a fixed point.
    """
    image = np.asarray(image, dtype=np.float64)
    idx = np.clip((image * bins).astype(np.int64), 0, bins - 1)
    hist = np.bincount(idx.ravel(), minlength=bins)
    if np.count_nonzero(hist) <= 1:
        return image.copy()
    cdf = np.cumsum(hist) / idx.size
    return cdf[idx]


def resize_min_side(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize so the smaller axis equals ``target``, aspect preserved."""
    h, w = image.shape
    scale = target / min(h, w)
    if h <= w:
        new_h, new_w = target, int(round(w * scale))
    else:
        new_h, new_w = int(round(h * scale)), target
    if (new_h, new_w) == (h, w):
        return image.copy()
    return _resize_bilinear(image, (new_h, new_w))


def _resize_bilinear(image: np.ndarray, shape) -> np.ndarray:
    h, w = image.shape
    new_h, new_w = shape
    ys = np.clip((np.arange(new_h) + 0.5) * h / new_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(new_w) + 0.5) * w / new_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - fx) + image[np.ix_(y0, x1)] * fx
    bot = image[np.ix_(y1, x0)] * (1 - fx) + image[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape
    if h < size or w < size:
        raise ValueError(f"image {image.shape} smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top : top + size, left : left + size].copy()


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape
    if h < size or w < size:
        raise ValueError(f"image {image.shape} smaller than crop size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top : top + size, left : left + size].copy()


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """In-plane rotation, bilinear, corners filled by reflection."""
    if degrees == 0.0:
        return image.copy()
    return ndimage.rotate(image, degrees, reshape=False, order=1, mode="reflect")


def preprocess(
    image: np.ndarray,
    mode: str,
    crop_size: int,
    max_rotation_deg: float = 15.0,
    seed: int = 0,
    resize_to: int | None = None,
) -> np.ndarray:
    """Full pipeline producing a crop_size x crop_size image.

    ``resize_to`` sets the smaller axis after equalization (defaults to
    ``crop_size``). Train mode applies a seeded random crop then a rotation
    uniform in [-max_rotation_deg, +max_rotation_deg]; eval mode center-crops
    with no randomness.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = trim_border(np.asarray(image, dtype=np.float64))
    out = equalize_histogram(out)
    out = resize_min_side(out, resize_to if resize_to is not None else crop_size)
    if min(out.shape) < crop_size:
        raise ValueError(f"image {out.shape} smaller than crop size {crop_size} after resize")
    if mode == "eval":
        return center_crop(out, crop_size)
    rng = np.random.default_rng(seed)
    out = random_crop(out, crop_size, rng)
    if max_rotation_deg > 0:
        angle = float(rng.uniform(-max_rotation_deg, max_rotation_deg))
        out = rotate(out, angle)
    return out
