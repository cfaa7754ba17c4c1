"""Binary tensor files (``MMT1``) and parameter-directory checkpoints."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from mmasd.errors import ValidationError

TENSOR_MAGIC = b"MMT1"


def write_tensor(path, array: np.ndarray) -> None:
    """Layout: magic, u32 rank, u32 extents, f64 row-major payload (little-endian)."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValidationError(f"{path}: not an MMT1 tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValidationError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f8", offset=offset, count=count).reshape(shape).astype(np.float64)


def _file_name(name: str) -> str:
    return name.replace("/", "_") + ".mmt"


def save_tensors(directory, tensors: Mapping[str, np.ndarray], extra: dict | None = None) -> Path:
    """Write one MMT1 file per named tensor plus ``manifest.json`` (name -> file)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(tensors):
        fname = _file_name(name)
        write_tensor(directory / fname, tensors[name])
        files[name] = fname
    manifest = {"tensors": files}
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {name: read_tensor(directory / fname) for name, fname in manifest["tensors"].items()}
    return tensors, manifest
