"""Versioned binary container for named float tensors.

Layout (little-endian throughout):

    magic     8 bytes  b"GEMSCKPT"
    version   u32      currently 1
    precision u8       bytes per element: 4 (fp32) or 8 (fp64)
    mlen      u32      manifest byte length
    manifest  mlen     UTF-8 JSON (config hash, seed, producing command, ...)
    count     u32      number of entries
    entry*    u16 name length, name bytes (UTF-8),
              u8 rank, rank x u32 extents,
              prod(extents) raw little-endian floats at `precision`

The same container stores model checkpoints and codebooks.  Writes go to a
temp file in the target directory and are renamed into place, so readers
never observe a partial file.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GEMSCKPT"
VERSION = 1

_PRECISION_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray],
                 manifest: dict | None = None,
                 precision: int | None = None) -> None:
    """precision defaults to the widest dtype present (4 or 8 bytes)."""
    path = Path(path)
    if precision is None:
        precision = 8 if any(np.asarray(v).dtype == np.float64 for v in tensors.values()) else 4
    if precision not in _PRECISION_TO_DTYPE:
        raise CheckpointError(f"precision must be 4 or 8 bytes, got {precision}")
    dtype = _PRECISION_TO_DTYPE[precision]
    mbytes = json.dumps(manifest or {}, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBI", VERSION, precision, len(mbytes)))
        f.write(mbytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=dtype)  # .tobytes() below emits C order
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (tensors, manifest).  Arrays come back in the stored precision."""
    path = Path(path)
    blob = path.read_bytes()
    r = _Reader(blob, path)
    magic = r.take(8)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, want {MAGIC!r}")
    version, precision, mlen = struct.unpack("<IBI", r.take(9))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if precision not in _PRECISION_TO_DTYPE:
        raise CheckpointError(f"{path}: bad precision byte {precision}")
    dtype = _PRECISION_TO_DTYPE[precision]
    manifest = json.loads(r.take(mlen).decode("utf-8")) if mlen else {}
    (count,) = struct.unpack("<I", r.take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2))
        name = r.take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1))
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(r.take(n * precision), dtype=dtype).reshape(extents)
        out[name] = arr.copy()
    return out, manifest


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated at byte offset {self.pos} "
                f"(wanted {n} more, file has {len(self.blob)})")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


# ---- module-level helpers ----


def save_module(path: str | Path, module, manifest: dict | None = None,
                precision: int | None = None) -> None:
    save_tensors(path, {name: p.data for name, p in module.named_parameters()},
                 manifest, precision)


def load_into_module(path: str | Path, module) -> dict:
    """Loads stored arrays into the module's parameters by name (strict)."""
    tensors, manifest = load_tensors(path)
    params = dict(module.named_parameters())
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter name mismatch (missing {sorted(missing)[:4]}, "
            f"unexpected {sorted(extra)[:4]})")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: file {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return manifest
