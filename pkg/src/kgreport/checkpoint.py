"""Flat binary archive of named float64 arrays, used for checkpoints.

Layout: magic ``KGCK``, one version byte, a u32 record count, then per
record a u16 name length, the UTF-8 name, a u8 rank, u32 dims, and the
row-major little-endian float64 payload.  Round-trips are bitwise exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"KGCK"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` in a deterministic (sorted) order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read back a dict of named float64 arrays written by save_arrays."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive (bad magic)")
    version = blob[4]
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 5
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        rank = blob[off]
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        out[name] = arr.astype(np.float64)
    return out
