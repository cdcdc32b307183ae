"""Gaussian smoothing with an explicit, reproducible kernel convention.

The kernel is a discrete Gaussian truncated at radius ``ceil(4 * sigma)``,
normalized to unit sum, applied separably with reflect padding. Because the
kernel sums to one and borders are reflected, mean intensity is preserved and
the only trace the filter leaves is the smoothing itself.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["gaussian_kernel", "gaussian_filter"]


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D unit-sum Gaussian kernel truncated at radius ceil(4 * sigma)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0])
    radius = math.ceil(4.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(image: np.ndarray, sigma: float) -> np.ndarray:
    """Blur a 2-D image; sigma=0 returns the input unchanged.

    Separable convolution with reflect-padded borders; output has the same
    shape and dtype float64.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected 2-D image, got shape {image.shape}")
    if sigma == 0:
        return image.copy()
    kernel = gaussian_kernel(sigma)
    out = _convolve_axis(image, kernel, axis=0)
    out = _convolve_axis(out, kernel, axis=1)
    return out


def _convolve_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    # edge-inclusive reflection: the only boundary rule that keeps a unit-sum
    # symmetric kernel exactly mean-preserving
    padded = np.pad(arr, pad, mode="symmetric")
    out = np.zeros_like(arr)
    for i, w in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + arr.shape[axis])
        out += w * padded[tuple(sl)]
    return out
