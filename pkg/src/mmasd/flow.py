"""Dense two-frame optical flow by polynomial expansion (Farneback), coarse to fine.

Coordinates: ``x`` runs along columns, ``y`` along rows. A flow vector
``(u, v)`` at pixel ``p`` means the content at ``p`` in the first frame is
found at ``p + (u, v)`` in the second.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy import ndimage

from mmasd.errors import ConfigurationError, UsageError
from mmasd.preprocess import resize_planes

log = logging.getLogger(__name__)

MIN_LEVEL_EXTENT = 8


@dataclass
class FlowConfig:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        for name in ("window_size", "poly_n"):
            v = getattr(self, name)
            if v < 3 or v % 2 == 0:
                raise ConfigurationError(f"{name} must be odd and >= 3, got {v}")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ConfigurationError(f"pyramid_scale must lie in (0, 1), got {self.pyramid_scale}")
        if self.pyramid_levels < 1 or self.iterations < 1:
            raise ConfigurationError("pyramid_levels and iterations must be >= 1")
        if self.poly_sigma <= 0:
            raise ConfigurationError("poly_sigma must be positive")


@dataclass
class PolyExpansion:
    """Per-pixel coefficients of ``f(x) ~ x^T A x + b^T x + c`` with ``A = [[a11, a12], [a12, a22]]``."""

    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    c: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.c.shape


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


# ---------------------------------------------------------------------------
# pyramid


def downsample(frame: np.ndarray, scale: float) -> np.ndarray:
    """Gaussian anti-alias blur then bilinear resample to ``round(extent * scale)``."""
    h, w = frame.shape
    out_h, out_w = int(round(h * scale)), int(round(w * scale))
    if min(out_h, out_w) < MIN_LEVEL_EXTENT:
        raise ConfigurationError(
            f"downsampling {h}x{w} by {scale} gives {out_h}x{out_w}, below {MIN_LEVEL_EXTENT} px")
    sigma = np.sqrt(max(1.0 / scale ** 2 - 1.0, 0.0)) / 2.0
    blurred = ndimage.gaussian_filter(np.asarray(frame, dtype=np.float64), sigma, mode="nearest")
    return resize_planes(blurred, out_h, out_w, clamp=False)


def build_pyramid(frame: np.ndarray, levels: int, scale: float) -> list[np.ndarray]:
    """Finest level first. Levels that would fall below 8 px are dropped."""
    pyr = [np.asarray(frame, dtype=np.float64)]
    for _ in range(levels - 1):
        h, w = pyr[-1].shape
        if min(round(h * scale), round(w * scale)) < MIN_LEVEL_EXTENT:
            log.debug("pyramid truncated at %d levels for %dx%d input", len(pyr), *frame.shape)
            break
        pyr.append(downsample(pyr[-1], scale))
    return pyr


# ---------------------------------------------------------------------------
# polynomial expansion


def _applicability(poly_n: int, sigma: float):
    r = poly_n // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return x, g / g.sum()


def _basis_gram(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # basis order: 1, x, y, x^2, y^2, xy
    xx, yy = np.meshgrid(x, x, indexing="xy")
    w = np.outer(g, g)
    basis = np.stack([np.ones_like(xx), xx, yy, xx ** 2, yy ** 2, xx * yy]).reshape(6, -1)
    return (basis * w.reshape(-1)) @ basis.T


def poly_expansion(frame: np.ndarray, poly_n: int = 5, poly_sigma: float = 1.1) -> PolyExpansion:
    """Gaussian-weighted least-squares quadratic fit around every pixel.

    The weighted inner products of the image with each basis function are
    separable, so they are computed as pairs of 1-D correlations with edge
    replication at the border.
    """
    f = np.asarray(frame, dtype=np.float64)
    if min(f.shape) <= poly_n:
        raise ConfigurationError(f"frame {f.shape} too small for poly_n={poly_n}")
    x, g = _applicability(poly_n, poly_sigma)
    kernels = {0: g, 1: g * x, 2: g * x * x}

    def corr(row_order: int, col_order: int) -> np.ndarray:
        tmp = ndimage.correlate1d(f, kernels[row_order], axis=0, mode="nearest")
        return ndimage.correlate1d(tmp, kernels[col_order], axis=1, mode="nearest")

    # projections onto 1, x, y, x^2, y^2, xy (x = column offset, y = row offset)
    proj = np.stack([corr(0, 0), corr(0, 1), corr(1, 0), corr(0, 2), corr(2, 0), corr(1, 1)])
    ginv = np.linalg.inv(_basis_gram(x, g))
    r = np.tensordot(ginv, proj, axes=1)
    return PolyExpansion(a11=r[3], a12=r[5] / 2.0, a22=r[4], b1=r[1], b2=r[2], c=r[0])


# ---------------------------------------------------------------------------
# displacement estimation


def _warp(field: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(field, [rows, cols], order=1, mode="nearest")


# attenuation of the outermost pixels, where edge replication biases the fit
_BORDER_RAMP = (0.14, 0.14, 0.4472, 0.4472, 0.4472)


def _border_weights(h: int, w: int) -> np.ndarray:
    def ramp(n):
        wt = np.ones(n)
        k = min(len(_BORDER_RAMP), n // 2)
        wt[:k] = _BORDER_RAMP[:k]
        wt[n - k:] = _BORDER_RAMP[:k][::-1]
        return wt
    return np.outer(ramp(h), ramp(w))


def displacement_step(exp1: PolyExpansion, exp2: PolyExpansion, prior: FlowField,
                      window_size: int = 15, iterations: int = 1) -> FlowField:
    """Refine ``prior`` by solving the windowed quadratic-matching normal equations.

    Each pass samples the second expansion at ``p + prior`` and solves
    ``(sum A^T A) d = sum A^T db`` over a uniform window, with
    ``A = (A1 + A2w) / 2`` and ``db = -(b2w - b1) / 2``. Each pixel's terms are
    scaled by a confidence that is zero when its match leaves the frame and
    reduced on the outer border band. Pixels whose system is near-singular
    keep their prior.
    """
    if exp1.shape != exp2.shape or prior.u.shape != exp1.shape:
        raise UsageError(f"shape mismatch: {exp1.shape}, {exp2.shape}, flow {prior.u.shape}")
    h, w = exp1.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    border = _border_weights(h, w)
    u, v = prior.u.astype(np.float64).copy(), prior.v.astype(np.float64).copy()
    for _ in range(iterations):
        wr, wc = rows + v, cols + u
        a11 = (exp1.a11 + _warp(exp2.a11, wr, wc)) / 2
        a12 = (exp1.a12 + _warp(exp2.a12, wr, wc)) / 2
        a22 = (exp1.a22 + _warp(exp2.a22, wr, wc)) / 2
        db1 = -(_warp(exp2.b1, wr, wc) - exp1.b1) / 2
        db2 = -(_warp(exp2.b2, wr, wc) - exp1.b2) / 2
        # pixels whose match falls outside the second frame carry no information
        inside = (wr >= 0) & (wr <= h - 1) & (wc >= 0) & (wc <= w - 1)
        conf = border * inside
        # A is symmetric, so A^T A = A^2 and A^T db = A db
        terms = [conf * t for t in (a11 * a11 + a12 * a12, a12 * (a11 + a22), a12 * a12 + a22 * a22,
                                    a11 * db1 + a12 * db2, a12 * db1 + a22 * db2)]
        g11, g12, g22, h1, h2 = (ndimage.uniform_filter(t, window_size, mode="nearest") for t in terms)
        det = g11 * g22 - g12 * g12
        ok = np.abs(det) > 1e-12
        safe = np.where(ok, det, 1.0)
        du = np.where(ok, (g22 * h1 - g12 * h2) / safe, 0.0)
        dv = np.where(ok, (g11 * h2 - g12 * h1) / safe, 0.0)
        u, v = u + du, v + dv
    return FlowField(u, v)


def _upscale_flow(flow: FlowField, height: int, width: int, scale: float) -> FlowField:
    return FlowField(resize_planes(flow.u, height, width, clamp=False) / scale,
                     resize_planes(flow.v, height, width, clamp=False) / scale)


def farneback(f1: np.ndarray, f2: np.ndarray, cfg: FlowConfig | None = None) -> FlowField:
    """Dense flow from ``f1`` to ``f2`` (grayscale ``[H, W]`` frames in [0, 1])."""
    cfg = cfg or FlowConfig()
    f1, f2 = np.asarray(f1, dtype=np.float64), np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 2:
        raise UsageError(f"frames must be 2-d with identical shape, got {f1.shape} and {f2.shape}")
    p1 = build_pyramid(f1, cfg.pyramid_levels, cfg.pyramid_scale)
    p2 = build_pyramid(f2, cfg.pyramid_levels, cfg.pyramid_scale)
    flow = FlowField.zeros(*p1[-1].shape)
    for level in range(len(p1) - 1, -1, -1):
        if flow.u.shape != p1[level].shape:
            flow = _upscale_flow(flow, *p1[level].shape, cfg.pyramid_scale)
        e1 = poly_expansion(p1[level], cfg.poly_n, cfg.poly_sigma)
        e2 = poly_expansion(p2[level], cfg.poly_n, cfg.poly_sigma)
        flow = displacement_step(e1, e2, flow, cfg.window_size, cfg.iterations)
    return flow


# ---------------------------------------------------------------------------
# rendering


def to_gray(frame: np.ndarray) -> np.ndarray:
    """``[C, H, W]`` (or ``[H, W]``) to luminance."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.shape[0] == 3:
        return np.tensordot([0.299, 0.587, 0.114], frame, axes=1)
    return frame.mean(axis=0)


def colorize(flows: FlowField | list[FlowField], max_magnitude: float | None = None) -> np.ndarray:
    """HSV rendering: angle -> hue, magnitude / clip maximum -> value, full saturation.

    A single field gives ``[3, H, W]``; a list gives a clip ``[3, F, H, W]``
    normalized by the maximum magnitude over all its frames.
    """
    single = isinstance(flows, FlowField)
    fields = [flows] if single else list(flows)
    u = np.stack([f.u for f in fields])
    v = np.stack([f.v for f in fields])
    mag = np.hypot(u, v)
    peak = max(float(mag.max()) if max_magnitude is None else max_magnitude, 1e-6)
    hue = (np.arctan2(v, u) % (2 * np.pi)) / (2 * np.pi)
    hsv = np.stack([hue, np.ones_like(hue), np.clip(mag / peak, 0.0, 1.0)], axis=-1)
    rgb = np.moveaxis(hsv_to_rgb(hsv), -1, 0)  # [3, F, H, W]
    return rgb[:, 0] if single else rgb


def clip_flow(clip: np.ndarray, cfg: FlowConfig | None = None) -> list[FlowField]:
    """Flow between consecutive frames of a ``[C, F, H, W]`` clip (F - 1 fields)."""
    frames = [to_gray(clip[:, i]) for i in range(clip.shape[1])]
    return [farneback(a, b, cfg) for a, b in zip(frames[:-1], frames[1:])]
