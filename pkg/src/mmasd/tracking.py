"""Multi-person tracking from per-frame detections with appearance vectors.

Detections come from files (one JSON object per line). Tracking follows the
Deep SORT recipe: greedy NMS, a constant-velocity Kalman filter over box
centre and size, and optimal assignment on a cost blending appearance
distance with box overlap.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from mmasd.errors import ConfigurationError, StateError, UsageError, ValidationError
from mmasd.preprocess import resize_planes

log = logging.getLogger(__name__)

DEFAULT_FEATURE_DIM = 128
_FORBIDDEN = 1e5


class NumericError(StateError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self.as_list()}", "bbox")

    @classmethod
    def from_xywh(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def to_xywh(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2,
                         self.x_max - self.x_min, self.y_max - self.y_min])

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(min(max(self.x_min, 0.0), width - 1), min(max(self.y_min, 0.0), height - 1),
                           max(min(self.x_max, width), 1.0), max(min(self.y_max, height), 1.0))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class Detection:
    frame_index: int
    bbox: BoundingBox
    confidence: float
    appearance: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]", "conf")
        self.appearance = np.asarray(self.appearance, dtype=np.float64)
        if abs(np.linalg.norm(self.appearance) - 1.0) > 1e-6:
            raise ValidationError("appearance vector must have unit L2 norm", "feat")


@dataclass
class TrackerConfig:
    nms_iou_threshold: float = 0.5
    min_confidence: float = 0.4
    appearance_weight: float = 0.8
    max_cost: float = 0.7
    confirm_hits: int = 3
    max_misses: int = 30
    gallery_size: int = 50
    process_noise: float = 1.0
    measurement_noise: float = 1.0
    crop_size: int = 100

    def __post_init__(self):
        for name in ("nms_iou_threshold", "min_confidence", "appearance_weight"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.max_cost < 0 or self.confirm_hits < 1 or self.max_misses < 0 or self.gallery_size < 1:
            raise ConfigurationError("max_cost, confirm_hits, max_misses and gallery_size out of range")
        if self.process_noise < 0 or self.measurement_noise < 0 or self.crop_size < 1:
            raise ConfigurationError("noise scales must be >= 0 and crop_size >= 1")


# ---------------------------------------------------------------------------
# overlap and suppression


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression in descending confidence (stable on ties); returns kept boxes in acceptance order."""
    if len({d.frame_index for d in dets}) > 1:
        raise UsageError("nms expects detections from a single frame")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[Detection] = []
    for i in order:
        if all(iou(dets[i].bbox, k.bbox) <= iou_threshold for k in kept):
            kept.append(dets[i])
    return kept


# ---------------------------------------------------------------------------
# Kalman filter over (cx, cy, w, h, vcx, vcy, vw, vh)

_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)
_STD_POS = 1.0 / 20
_STD_VEL = 1.0 / 160


@dataclass
class TrackState:
    mean: np.ndarray
    covariance: np.ndarray

    def box(self) -> BoundingBox:
        cx, cy, w, h = self.mean[:4]
        return BoundingBox.from_xywh(cx, cy, max(w, 1e-6), max(h, 1e-6))


def initiate(box: BoundingBox) -> TrackState:
    z = box.to_xywh()
    h = z[3]
    std = np.r_[np.full(4, 2 * _STD_POS * h), np.full(4, 10 * _STD_VEL * h)]
    return TrackState(np.r_[z, np.zeros(4)], np.diag(std ** 2))


def _check_pd(p: np.ndarray) -> None:
    if not np.all(np.isfinite(p)) or np.abs(p - p.T).max() > 1e-9 or np.any(np.diag(p) <= 0):
        raise StateError("track covariance is not symmetric positive-definite")
    try:
        np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        raise StateError("track covariance is not positive-definite") from None


def kalman_predict(state: TrackState, q_scale: float = 1.0) -> TrackState:
    """Constant-velocity step (dt = one frame); process noise grows with box height."""
    _check_pd(state.covariance)
    h = state.mean[3]
    std = np.r_[np.full(4, _STD_POS * h), np.full(4, _STD_VEL * h)]
    q = np.diag((std * np.sqrt(q_scale)) ** 2)
    mean = _F @ state.mean
    cov = _F @ state.covariance @ _F.T + q
    return TrackState(mean, (cov + cov.T) / 2)


def kalman_update(state: TrackState, z: BoundingBox, r_scale: float = 1.0) -> TrackState:
    """Standard update with H selecting (cx, cy, w, h); covariance is symmetrized afterwards."""
    h = state.mean[3]
    r = np.diag(np.full(4, (_STD_POS * h) ** 2 * r_scale))
    p = state.covariance
    s = _H @ p @ _H.T + r
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise NumericError("innovation covariance is singular") from None
    pht = p @ _H.T
    # K = P H^T S^-1 via two triangular solves
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, pht.T)).T
    innov = z.to_xywh() - _H @ state.mean
    mean = state.mean + gain @ innov
    cov = (np.eye(8) - gain @ _H) @ p
    return TrackState(mean, (cov + cov.T) / 2)


# ---------------------------------------------------------------------------
# assignment


def assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost matching of size ``min(m, n)``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


# ---------------------------------------------------------------------------
# tracks


class TrackStatus(str, Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


@dataclass
class Track:
    id: int
    state: TrackState
    gallery: deque
    hits: int = 1
    misses: int = 0
    status: TrackStatus = TrackStatus.TENTATIVE
    # (frame, box, matched) for every frame the track was alive
    history: list = field(default_factory=list)

    def covered(self) -> list[tuple[int, BoundingBox]]:
        """Frames from the first to the last matched one; coasting frames in between use predictions."""
        last = max((i for i, (_, _, matched) in enumerate(self.history) if matched), default=-1)
        return [(f, b) for f, b, _ in self.history[:last + 1]]


def cosine_distance(gallery: Iterable[np.ndarray], feature: np.ndarray) -> float:
    g = np.asarray(list(gallery))
    return 1.0 - float((g @ feature).max()) if len(g) else 1.0


def associate(tracks: Sequence[Track], dets: Sequence[Detection], cfg: TrackerConfig):
    """Match tracks (already predicted) to detections.

    Returns ``(matches, unmatched_tracks, unmatched_dets)`` as index lists,
    matches being ``(track_idx, det_idx)`` pairs.
    """
    if not tracks or not dets:
        return [], list(range(len(tracks))), list(range(len(dets)))
    lam = cfg.appearance_weight
    cost = np.empty((len(tracks), len(dets)))
    for i, t in enumerate(tracks):
        pred = t.state.box()
        for j, d in enumerate(dets):
            cost[i, j] = lam * cosine_distance(t.gallery, d.appearance) + (1 - lam) * (1 - iou(pred, d.bbox))
    allowed = cost <= cfg.max_cost
    pairs = assignment(np.where(allowed, cost, _FORBIDDEN))
    matches = sorted((i, j) for i, j in pairs if allowed[i, j])
    mt = {i for i, _ in matches}
    md = {j for _, j in matches}
    return (matches, [i for i in range(len(tracks)) if i not in mt],
            [j for j in range(len(dets)) if j not in md])


class Tracker:
    """Single-video tracker; feed frames in increasing order through :meth:`step`."""

    def __init__(self, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self.tracks: list[Track] = []
        self.finished: list[Track] = []
        self.last_frame: int | None = None
        self._next_id = 1

    @property
    def all_tracks(self) -> list[Track]:
        return sorted(self.finished + self.tracks, key=lambda t: t.id)

    def step(self, frame_index: int, detections: Sequence[Detection]) -> None:
        if self.last_frame is not None and frame_index <= self.last_frame:
            raise UsageError(f"frame {frame_index} presented after frame {self.last_frame}")
        if any(d.frame_index != frame_index for d in detections):
            raise UsageError(f"detections passed to frame {frame_index} carry other frame indices")
        self.last_frame = frame_index
        cfg = self.cfg
        dets = nms([d for d in detections if d.confidence >= cfg.min_confidence], cfg.nms_iou_threshold)

        for t in self.tracks:
            t.state = kalman_predict(t.state, cfg.process_noise)
        matches, lost, new = associate(self.tracks, dets, cfg)

        for ti, di in matches:
            t, d = self.tracks[ti], dets[di]
            t.state = kalman_update(t.state, d.bbox, cfg.measurement_noise)
            t.gallery.append(d.appearance)
            t.hits += 1
            t.misses = 0
            if t.status is TrackStatus.TENTATIVE and t.hits >= cfg.confirm_hits:
                t.status = TrackStatus.CONFIRMED
            t.history.append((frame_index, t.state.box(), True))
        for ti in lost:
            t = self.tracks[ti]
            t.misses += 1
            t.history.append((frame_index, t.state.box(), False))
            if t.status is TrackStatus.TENTATIVE or t.misses > cfg.max_misses:
                t.status = TrackStatus.DELETED
        for di in new:
            d = dets[di]
            t = Track(self._next_id, initiate(d.bbox), deque([d.appearance], maxlen=cfg.gallery_size))
            t.history.append((frame_index, d.bbox, True))
            if cfg.confirm_hits <= 1:
                t.status = TrackStatus.CONFIRMED
            self._next_id += 1
            self.tracks.append(t)

        self.finished += [t for t in self.tracks if t.status is TrackStatus.DELETED]
        self.tracks = [t for t in self.tracks if t.status is not TrackStatus.DELETED]

    def confirmed(self) -> list[Track]:
        """Tracks that reached confirmation at some point (a confirmed track may since have been deleted)."""
        return [t for t in self.all_tracks if t.hits >= self.cfg.confirm_hits]


def track_video(detections: Sequence[Detection], cfg: TrackerConfig | None = None,
                frames: Iterable[int] | None = None) -> Tracker:
    """Run a tracker over detections grouped by frame; ``frames`` lists frames to step (default: all seen)."""
    tracker = Tracker(cfg)
    by_frame: dict[int, list[Detection]] = {}
    for d in detections:
        by_frame.setdefault(d.frame_index, []).append(d)
    for f in sorted(set(frames) if frames is not None else by_frame):
        tracker.step(f, by_frame.get(f, []))
    return tracker


# ---------------------------------------------------------------------------
# cropping


def crop_box(frame: np.ndarray, box: BoundingBox, size: int) -> np.ndarray:
    """Crop ``[C, H, W]`` to the clamped, integer-rounded box and resize to ``size x size``."""
    _, h, w = frame.shape
    x0 = int(np.clip(round(box.x_min), 0, w - 1))
    y0 = int(np.clip(round(box.y_min), 0, h - 1))
    x1 = int(np.clip(round(box.x_max), x0 + 1, w))
    y1 = int(np.clip(round(box.y_max), y0 + 1, h))
    return resize_planes(frame[:, y0:y1, x0:x1], size, size)


def crop_tracks(video: np.ndarray, tracks: Sequence[Track], size: int = 100,
                first_frame: int = 0) -> dict[int, tuple[list[int], np.ndarray]]:
    """Per-track clips ``[C, n, size, size]`` cut from a ``[C, F, H, W]`` video.

    ``first_frame`` is the detection frame index of ``video[:, 0]``. Returns
    ``{track_id: (frame_indices, clip)}``.
    """
    out = {}
    for t in tracks:
        covered = t.covered()
        if not covered:
            log.warning("track %d covers no frames; skipped", t.id)
            continue
        frames, crops = [], []
        for f, box in covered:
            k = f - first_frame
            if not 0 <= k < video.shape[1]:
                raise ValidationError(f"video has no frame {f} needed by track {t.id}", "video")
            frames.append(f)
            crops.append(crop_box(video[:, k], box, size))
        out[t.id] = (frames, np.stack(crops, axis=1))
    return out


# ---------------------------------------------------------------------------
# files


def parse_detection(line: str, lineno: int, feature_dim: int | None = None) -> Detection:
    try:
        obj = json.loads(line)
        feat = np.asarray(obj["feat"], dtype=np.float64)
        norm = np.linalg.norm(feat)
        if feat.ndim != 1 or norm == 0:
            raise ValueError("feat must be a non-zero vector")
        if feature_dim is not None and feat.size != feature_dim:
            raise ValueError(f"feat has {feat.size} entries, expected {feature_dim}")
        return Detection(int(obj["frame"]), BoundingBox(*map(float, obj["bbox"])),
                         float(obj["conf"]), feat / norm)
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"line {lineno}: invalid detection ({exc})", "detections") from exc


def load_detections(path) -> list[Detection]:
    """Read JSON Lines detections. Appearance vectors are L2-normalized on load."""
    dets: list[Detection] = []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = parse_detection(line, lineno, dim)
            dim = d.appearance.size
            dets.append(d)
    return dets


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps({"frame": d.frame_index, "bbox": d.bbox.as_list(),
                                 "conf": d.confidence, "feat": d.appearance.tolist()}) + "\n")


def write_tracks(path, tracks: Iterable[Track]) -> None:
    rows = [(f, t.id, box) for t in tracks for f, box in t.covered()]
    with open(Path(path), "w") as fh:
        for f, tid, box in sorted(rows, key=lambda r: (r[0], r[1])):
            fh.write(json.dumps({"frame": f, "track_id": tid, "bbox": box.as_list()}) + "\n")
