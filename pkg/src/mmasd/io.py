"""On-disk formats for clips, flow fields, meshes, skeletons, labels and datasets.

Binary layouts are little-endian:

* clip ``MMC1``: u32 F, C, H, W then f32 payload in (F, C, H, W) order
* flow ``MMF1``: u32 width, height then f32 u-plane and f32 v-plane
* mesh ``MMM1``: u32 frames, u32 vertices (6890) then f32 xyz triples per frame

Skeletons are CSV with one row per frame and ``3 J`` columns (x, y, z per
joint). Malformed content raises :class:`ValidationError`; missing or
unreadable files surface as ``OSError``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from mmasd.errors import ValidationError
from mmasd.flow import FlowField
from mmasd.preprocess import MESH_VERTICES, Sample, validate_clip

CLIP_MAGIC = b"MMC1"
FLOW_MAGIC = b"MMF1"
MESH_MAGIC = b"MMM1"


def _header(raw: bytes, magic: bytes, count: int, path) -> tuple[int, ...]:
    if raw[:4] != magic:
        raise ValidationError(f"{path}: expected magic {magic.decode()}, found {raw[:4]!r}", "file")
    if len(raw) < 4 + 4 * count:
        raise ValidationError(f"{path}: truncated header", "file")
    return struct.unpack_from(f"<{count}I", raw, 4)


def _payload(raw: bytes, offset: int, n: int, path) -> np.ndarray:
    if len(raw) - offset != 4 * n:
        raise ValidationError(f"{path}: payload has {len(raw) - offset} bytes, expected {4 * n}", "file")
    return np.frombuffer(raw, dtype="<f4", offset=offset, count=n)


# ---------------------------------------------------------------------------
# clips


def write_clip(path, clip: np.ndarray) -> None:
    """Store a ``[C, F, H, W]`` clip."""
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ValidationError(f"clip must be [C, F, H, W], got {clip.shape}", "clip")
    c, f, h, w = clip.shape
    data = np.ascontiguousarray(clip.transpose(1, 0, 2, 3), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC + struct.pack("<4I", f, c, h, w) + data.tobytes())


def read_clip(path, validate: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    f, c, h, w = _header(raw, CLIP_MAGIC, 4, path)
    data = _payload(raw, 20, f * c * h * w, path).reshape(f, c, h, w).transpose(1, 0, 2, 3)
    clip = np.ascontiguousarray(data, dtype=np.float32)
    return validate_clip(clip, str(path)) if validate else clip


# ---------------------------------------------------------------------------
# flow fields


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.u.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<2I", w, h))
        fh.write(np.ascontiguousarray(flow.u, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flow.v, dtype="<f4").tobytes())


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    w, h = _header(raw, FLOW_MAGIC, 2, path)
    data = _payload(raw, 12, 2 * w * h, path).astype(np.float64)
    return FlowField(data[:w * h].reshape(h, w), data[w * h:].reshape(h, w))


# ---------------------------------------------------------------------------
# meshes


def write_mesh(path, mesh: np.ndarray) -> None:
    mesh = np.asarray(mesh)
    if mesh.ndim != 3 or mesh.shape[2] != 3:
        raise ValidationError(f"mesh must be [frames, vertices, 3], got {mesh.shape}", "mesh")
    with open(path, "wb") as fh:
        fh.write(MESH_MAGIC + struct.pack("<2I", mesh.shape[0], mesh.shape[1]))
        fh.write(np.ascontiguousarray(mesh, dtype="<f4").tobytes())


def read_mesh(path, vertices: int | None = MESH_VERTICES) -> np.ndarray:
    raw = Path(path).read_bytes()
    frames, nv = _header(raw, MESH_MAGIC, 2, path)
    if vertices is not None and nv != vertices:
        raise ValidationError(f"{path}: mesh has {nv} vertices per frame, expected {vertices}", "mesh")
    return _payload(raw, 12, frames * nv * 3, path).reshape(frames, nv, 3).astype(np.float64)


# ---------------------------------------------------------------------------
# skeletons and labels


def write_skeleton(path, seq: np.ndarray) -> None:
    seq = np.asarray(seq, dtype=np.float64)
    np.savetxt(path, seq.reshape(seq.shape[0], -1), delimiter=",", fmt="%.17g")


def read_skeleton(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: non-numeric value", "skeleton") from None
    if not rows:
        raise ValidationError(f"{path}: skeleton file has no rows", "skeleton")
    widths = {len(r) for r in rows}
    if len(widths) != 1 or next(iter(widths)) % 3:
        raise ValidationError(f"{path}: rows must share a width divisible by 3, got {sorted(widths)}", "skeleton")
    arr = np.asarray(rows)
    return arr.reshape(arr.shape[0], -1, 3)


@dataclass
class LabelRow:
    clip_id: str
    action_label: int
    asd_label: int


def read_labels(path) -> dict[str, LabelRow]:
    out: dict[str, LabelRow] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"clip_id", "action_label", "asd_label"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}", "labels")
        for lineno, row in enumerate(reader, 2):
            try:
                r = LabelRow(row["clip_id"], int(row["action_label"]), int(row["asd_label"]))
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: labels must be integers", "labels") from None
            if r.clip_id in out:
                raise ValidationError(f"{path}: line {lineno}: duplicate clip_id {r.clip_id}", "labels")
            out[r.clip_id] = r
    return out


def write_labels(path, rows: Iterable[LabelRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "action_label", "asd_label"])
        for r in rows:
            w.writerow([r.clip_id, r.action_label, r.asd_label])


# ---------------------------------------------------------------------------
# sample directories

MANIFEST = "manifest.csv"
_MANIFEST_FIELDS = ["clip_id", "flow_path", "mesh_path", "skeleton_path", "action_label", "asd_label"]


def save_samples(directory, samples: Iterable[Sample]) -> Path:
    """Write each sample's modalities under ``directory`` plus a CSV manifest with relative paths."""
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    rows = []
    seen = set()
    for s in samples:
        if not s.clip_id or s.clip_id in seen or "/" in s.clip_id:
            raise ValidationError(f"clip ids must be unique, non-empty and path-safe: {s.clip_id!r}", "clip_id")
        seen.add(s.clip_id)
        base = f"samples/{s.clip_id}"
        write_clip(directory / f"{base}.flow.mmc", s.flow_clip)
        write_clip(directory / f"{base}.mesh.mmc", s.mesh_clip)
        write_skeleton(directory / f"{base}.skel.csv", s.skeleton)
        rows.append([s.clip_id, f"{base}.flow.mmc", f"{base}.mesh.mmc", f"{base}.skel.csv",
                     s.action_label, s.asd_label])
    path = directory / MANIFEST
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_MANIFEST_FIELDS)
        w.writerows(rows)
    return path


def load_samples(directory) -> list[Sample]:
    directory = Path(directory)
    path = directory / MANIFEST
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _MANIFEST_FIELDS:
            raise ValidationError(f"{path}: header must be {','.join(_MANIFEST_FIELDS)}", "manifest")
        for lineno, row in enumerate(reader, 2):
            try:
                a, s = int(row["action_label"]), int(row["asd_label"])
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: labels must be integers", "manifest") from None
            samples.append(Sample(
                flow_clip=read_clip(directory / row["flow_path"]),
                mesh_clip=read_clip(directory / row["mesh_path"]),
                skeleton=read_skeleton(directory / row["skeleton_path"]),
                action_label=a, asd_label=s, clip_id=row["clip_id"],
            ))
    return samples
