"""Synthetic test imagery: smooth random textures and exactly translated frame pairs."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def smooth_texture(rng: np.random.Generator, height: int, width: int, sigma: float = 3.0) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to [0, 1]."""
    n = ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma, mode="wrap")
    return (n - n.min()) / (n.max() - n.min())


def translated_pair(rng: np.random.Generator, size: int, shift: tuple[int, int],
                    sigma: float = 3.0, pad: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Frames ``f1, f2`` with ``f2(p) = f1(p - shift)``; ``shift = (dx, dy)`` in whole pixels.

    Both frames are cut from one larger texture, so the translation is exact
    and content enters from outside the frame instead of wrapping around.
    """
    dx, dy = int(shift[0]), int(shift[1])
    if max(abs(dx), abs(dy)) > pad:
        raise ValueError(f"shift {shift} exceeds padding {pad}")
    big = smooth_texture(rng, size + 2 * pad, size + 2 * pad, sigma)
    f1 = big[pad:pad + size, pad:pad + size]
    f2 = big[pad - dy:pad - dy + size, pad - dx:pad - dx + size]
    return f1, f2


def flow_accuracy(u: np.ndarray, v: np.ndarray, shift, border: int = 2) -> tuple[float, float, float]:
    """Mean u, mean v and fraction of pixels with endpoint error < 0.5, excluding a border band."""
    sl = (slice(border, -border or None),) * 2
    u, v = u[sl], v[sl]
    epe = np.hypot(u - shift[0], v - shift[1])
    return float(u.mean()), float(v.mean()), float((epe < 0.5).mean())
