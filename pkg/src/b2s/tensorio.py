"""Portable tensor files and checkpoint directories.

Tensor file layout: magic ``BVT1``, little-endian uint32 rank, one uint32 per
dimension, then the row-major IEEE-754 float32 payload. Checkpoints are
directories of one tensor file per named parameter plus a ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BVT1"
MANIFEST_NAME = "manifest.json"


class TensorFormatError(ValueError):
    pass


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise TensorFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        if rank > 16:
            raise TensorFormatError(f"{path}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise TensorFormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def _tensor_name_to_file(name: str) -> str:
    return name.replace("/", "__").replace(".", "__") + ".bvt"


def save_checkpoint(directory: str | Path, tensors: dict[str, np.ndarray], manifest: dict) -> Path:
    """Write a checkpoint directory; manifest gets a `tensors` name->file map."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name_map = {}
    for name, arr in tensors.items():
        fname = _tensor_name_to_file(name)
        if fname in name_map.values():
            raise ValueError(f"tensor file name collision for {name}")
        write_tensor(directory / fname, arr)
        name_map[name] = fname
    full = dict(manifest)
    full["tensors"] = name_map
    with open(directory / MANIFEST_NAME, "w") as f:
        json.dump(full, f, indent=1, sort_keys=True)
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    with open(directory / MANIFEST_NAME) as f:
        manifest = json.load(f)
    tensors = {
        name: read_tensor(directory / fname)
        for name, fname in manifest.get("tensors", {}).items()
    }
    return tensors, manifest


def checkpoint_hash(directory: str | Path) -> str:
    """Content hash over the parameter tensors (sorted by name).

    Manifests are excluded so annotations can change without breaking the
    base-hash chain recorded by dependent checkpoints.
    """
    directory = Path(directory)
    with open(directory / MANIFEST_NAME) as f:
        manifest = json.load(f)
    h = hashlib.sha256()
    for name in sorted(manifest.get("tensors", {})):
        h.update(name.encode())
        with open(directory / manifest["tensors"][name], "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def hash_arrays(tensors: dict[str, np.ndarray]) -> str:
    """Same digest as checkpoint_hash, computed without touching disk."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        h.update(MAGIC)
        h.update(struct.pack("<I", arr.ndim))
        h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
        h.update(arr.astype("<f4").tobytes())
    return h.hexdigest()
