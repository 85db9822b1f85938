"""Binary container for named float64 tensors.

Layout (all little-endian):

    magic "ROAR" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | dims u64 each
                | row-major f64 payload

The binary holds no timestamps or other volatile fields, so identical
tensor dicts serialize to identical bytes; provenance (config, seed, step,
creation time) lives in a JSON sidecar next to the checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ROAR"
VERSION = 1

__all__ = ["save_tensors", "load_tensors", "save_sidecar", "load_sidecar", "content_hash"]


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write a name -> array mapping. Iteration order is preserved."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack("<%dQ" % arr.ndim, *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack("<%dQ" % rank, fh.read(8 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            payload = fh.read(8 * size)
            if len(payload) != 8 * size:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        return out


def save_sidecar(path: str | Path, meta: dict) -> None:
    """JSON sidecar (<checkpoint>.json). Volatile fields belong here."""
    Path(str(path) + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_sidecar(path: str | Path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))


def content_hash(obj) -> str:
    """Stable hash of a JSON-serializable object (config provenance)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
