"""Modality standardization: frame sampling, resizing, skeleton padding,
mesh rasterization, rotation augmentation and sample assembly.

Clips are numpy arrays laid out ``[C, F, H, W]`` with values in ``[0, 1]``.
Skeleton sequences are ``[frames, joints, 3]``; mesh sequences are
``[frames, vertices, 3]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from mmasd import N_ACTIONS
from mmasd.errors import ValidationError

SKELETON_FRAMES = 180
SAMPLE_FRAMES = 40
FRAME_SIZE = 100
MESH_VERTICES = 6890
AUGMENT_ANGLES = (5.0, 10.0, -5.0, -10.0)


# ---------------------------------------------------------------------------
# clips


def validate_clip(clip: np.ndarray, name: str = "clip") -> np.ndarray:
    clip = np.asarray(clip)
    if clip.ndim != 4 or min(clip.shape) < 1:
        raise ValidationError(f"{name} must be a non-empty [C, F, H, W] array, got shape {clip.shape}", name)
    if not np.all(np.isfinite(clip)):
        raise ValidationError(f"{name} contains non-finite values", name)
    if clip.min() < 0.0 or clip.max() > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1]", name)
    return clip


def sample_frames(clip: np.ndarray, n: int) -> np.ndarray:
    """Pick ``n`` frames at indices ``floor(k * F / n)``; duplicates appear when F < n."""
    if n < 1:
        raise ValidationError(f"frame count must be >= 1, got {n}")
    f = clip.shape[1]
    if f < 1:
        raise ValidationError("clip has no frames")
    idx = (np.arange(n) * f) // n
    return clip[:, idx]


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_planes(arr: np.ndarray, out_h: int, out_w: int, clamp: bool = True) -> np.ndarray:
    """Bilinear resize over the last two axes with half-pixel-centred sampling."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output extents must be positive, got {out_h}x{out_w}")
    h, w = arr.shape[-2:]
    arr = np.asarray(arr, dtype=np.float64)
    if (h, w) != (out_h, out_w):
        y0, y1, wy = _axis_weights(h, out_h)
        x0, x1, wx = _axis_weights(w, out_w)
        rows = arr[..., y0, :] * (1 - wy)[:, None] + arr[..., y1, :] * wy[:, None]
        arr = rows[..., x0] * (1 - wx) + rows[..., x1] * wx
    return np.clip(arr, 0.0, 1.0) if clamp else arr


def resize_frame(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an ``[H, W]`` or ``[H, W, C]`` frame; values are clamped to [0, 1]."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return resize_planes(frame, out_h, out_w)
    return np.moveaxis(resize_planes(np.moveaxis(frame, -1, 0), out_h, out_w), 0, -1)


def resize_clip(clip: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return resize_planes(clip, out_h, out_w)


# ---------------------------------------------------------------------------
# skeletons


def standardize_skeleton(seq: np.ndarray, frames: int = SKELETON_FRAMES) -> np.ndarray:
    """Truncate to ``frames`` rows, or pad by cycling through the rows from row 0."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3 or seq.shape[-1] != 3:
        raise ValidationError(f"skeleton must be [frames, joints, 3], got shape {seq.shape}", "skeleton")
    if seq.shape[0] == 0:
        raise ValidationError("skeleton sequence is empty", "skeleton")
    idx = np.arange(frames) % seq.shape[0]
    return seq[idx] if seq.shape[0] < frames else seq[:frames].copy()


def rotate_skeleton(seq: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate each frame's (x, y) about that frame's joint centroid; z is untouched."""
    seq = np.asarray(seq, dtype=np.float64)
    if angle_deg == 0:
        return seq.copy()
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    centroid = seq[:, :, :2].mean(axis=1, keepdims=True)
    d = seq[:, :, :2] - centroid
    out = seq.copy()
    out[:, :, 0] = centroid[..., 0] + c * d[..., 0] - s * d[..., 1]
    out[:, :, 1] = centroid[..., 1] + s * d[..., 0] + c * d[..., 1]
    return out


# ---------------------------------------------------------------------------
# meshes


def validate_mesh(mesh: np.ndarray) -> np.ndarray:
    mesh = np.asarray(mesh)
    if mesh.ndim != 3 or mesh.shape[-1] != 3 or mesh.shape[0] < 1:
        raise ValidationError(f"mesh must be [frames, vertices, 3], got shape {mesh.shape}", "mesh")
    if mesh.shape[1] != MESH_VERTICES:
        raise ValidationError(f"mesh frames need {MESH_VERTICES} vertices, got {mesh.shape[1]}", "mesh")
    return mesh


def mesh_to_pixels(mesh: np.ndarray, resolution: int, margin: float = 0.05) -> np.ndarray:
    """Project XY to pixel coordinates ``(col, row)`` with one affine map for the whole clip.

    The clip bounding box centre lands on pixel ``(res/2, res/2)``; the larger
    box side spans ``(1 - 2 margin) * res`` pixels and Y is flipped so up is up.
    """
    xy = np.asarray(mesh, dtype=np.float64)[..., :2]
    lo = xy.reshape(-1, 2).min(axis=0)
    hi = xy.reshape(-1, 2).max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise ValidationError("mesh bounding box is degenerate (all vertices coincide)", "mesh")
    scale = (1.0 - 2.0 * margin) * resolution / extent
    centre = (lo + hi) / 2.0
    half = resolution / 2.0
    cols = half + scale * (xy[..., 0] - centre[0])
    rows = half - scale * (xy[..., 1] - centre[1])
    return np.stack([cols, rows], axis=-1)


def _stencil(radius: float) -> np.ndarray:
    r = int(np.ceil(radius)) + 1
    off = np.arange(-r, r + 1)
    return np.stack(np.meshgrid(off, off, indexing="ij"), axis=-1).reshape(-1, 2)


def rasterize_mesh(mesh: np.ndarray, resolution: int = FRAME_SIZE, radius_px: float = 1.0,
                   frames: int | None = SAMPLE_FRAMES) -> np.ndarray:
    """Render vertices as dark discs on white frames, returned as a ``[3, F, res, res]`` clip.

    A pixel is darkened when its centre lies within ``radius_px`` of a projected
    vertex, and the pixel containing each vertex is always darkened. The output
    is frame-sampled to ``frames`` (``None`` keeps every frame).
    """
    mesh = np.asarray(mesh, dtype=np.float64)
    if mesh.ndim != 3 or mesh.shape[-1] != 3 or mesh.shape[0] < 1:
        raise ValidationError(f"mesh must be [frames, vertices, 3], got shape {mesh.shape}", "mesh")
    pix = mesh_to_pixels(mesh, resolution)
    if frames is not None:
        pix = pix[(np.arange(frames) * pix.shape[0]) // frames]
    stencil = _stencil(radius_px)
    out = np.ones((pix.shape[0], resolution, resolution), dtype=np.float32)
    for f, p in enumerate(pix):
        base = np.rint(p).astype(np.int64)  # containing pixel (col, row)
        cand = base[:, None, :] + stencil[None, :, :]
        dist2 = ((cand - p[:, None, :]) ** 2).sum(-1)
        keep = dist2 <= radius_px ** 2
        keep[:, np.all(stencil == 0, axis=1)] = True
        c = cand[keep]
        inside = (c[:, 0] >= 0) & (c[:, 0] < resolution) & (c[:, 1] >= 0) & (c[:, 1] < resolution)
        c = c[inside]
        out[f, c[:, 1], c[:, 0]] = 0.0
    return np.repeat(out[None], 3, axis=0)


# ---------------------------------------------------------------------------
# rotation


def _edge_mean(plane: np.ndarray) -> float:
    return float(np.concatenate([plane[0], plane[-1], plane[1:-1, 0], plane[1:-1, -1]]).mean())


def rotate_clip(clip: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate every frame about its centre; uncovered pixels take the frame's edge mean.

    Positive angles rotate counter-clockwise in (col, row) coordinates, the same
    sense :func:`rotate_skeleton` uses on image-space joints.
    """
    clip = np.asarray(clip)
    if angle_deg == 0:
        return clip.copy()
    c_, f_, h, w = clip.shape
    t = np.deg2rad(angle_deg)
    cos, sin = np.cos(t), np.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = cols - cx, rows - cy
    # inverse map: output pixel samples the input at R(-angle) applied to its offset
    src_c = cx + cos * dx + sin * dy
    src_r = cy - sin * dx + cos * dy
    coords = np.stack([src_r, src_c])
    out = np.empty_like(clip)
    for ci in range(c_):
        for fi in range(f_):
            plane = clip[ci, fi]
            out[ci, fi] = ndimage.map_coordinates(plane, coords, order=1, mode="constant",
                                                  cval=_edge_mean(plane))
    return out


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    """One person-clip: flow and mesh clips ``[3, 40, 100, 100]``, skeleton ``[180, J, 3]``, labels."""

    flow_clip: np.ndarray
    mesh_clip: np.ndarray
    skeleton: np.ndarray
    action_label: int
    asd_label: int
    clip_id: str = ""


def _check_labels(action_label, asd_label) -> None:
    if not (isinstance(action_label, (int, np.integer)) and 0 <= action_label < N_ACTIONS):
        raise ValidationError(f"action_label must be an integer in 0..{N_ACTIONS - 1}, got {action_label!r}",
                              "action_label")
    if not (isinstance(asd_label, (int, np.integer)) and asd_label in (0, 1)):
        raise ValidationError(f"asd_label must be 0 or 1, got {asd_label!r}", "asd_label")


def _standard_clip(clip: np.ndarray, name: str, frames: int, size: int) -> np.ndarray:
    clip = validate_clip(clip, name)
    return resize_clip(sample_frames(clip, frames), size, size).astype(np.float32)


def build_sample(flow_clip: np.ndarray, mesh: np.ndarray, skeleton: np.ndarray,
                 action_label: int, asd_label: int, clip_id: str = "",
                 frames: int = SAMPLE_FRAMES, size: int = FRAME_SIZE,
                 radius_px: float = 1.0) -> Sample:
    """Standardize the three modalities of one clip.

    ``mesh`` is either a vertex sequence ``[frames, 6890, 3]`` (rasterized
    here) or an already rendered ``[C, F, H, W]`` clip.
    """
    _check_labels(action_label, asd_label)
    mesh = np.asarray(mesh)
    if mesh.ndim == 3:
        mesh_clip = rasterize_mesh(validate_mesh(mesh), resolution=size, radius_px=radius_px, frames=frames)
    else:
        mesh_clip = mesh
    skeleton = np.asarray(skeleton, dtype=np.float64)
    if skeleton.ndim != 3 or skeleton.shape[0] == 0:
        raise ValidationError(f"skeleton must be a non-empty [frames, joints, 3] array, got {skeleton.shape}",
                              "skeleton")
    if not np.all(np.isfinite(skeleton)):
        raise ValidationError("skeleton contains non-finite values", "skeleton")
    return Sample(
        flow_clip=_standard_clip(flow_clip, "flow_clip", frames, size),
        mesh_clip=_standard_clip(mesh_clip, "mesh_clip", frames, size),
        skeleton=standardize_skeleton(skeleton),
        action_label=int(action_label),
        asd_label=int(asd_label),
        clip_id=clip_id,
    )


def augment_sample(sample: Sample, angle_deg: float) -> Sample:
    """Rotate all three modalities by ``angle_deg``; labels are carried over unchanged."""
    return Sample(
        flow_clip=rotate_clip(sample.flow_clip, angle_deg),
        mesh_clip=rotate_clip(sample.mesh_clip, angle_deg),
        skeleton=rotate_skeleton(sample.skeleton, angle_deg),
        action_label=sample.action_label,
        asd_label=sample.asd_label,
        clip_id=f"{sample.clip_id}@rot{angle_deg:+g}",
    )
