"""Visual feature files, temporal resampling, and synthetic feature maps.

The binary feature format is fixed: magic ``FFAF``, one version byte, two
little-endian u32 dimensions (rows, columns), then row-major little-endian
float32 values.  The canonical shape is 12 rows of 1024.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FFAF"
VERSION = 1
FEATURE_ROWS = 12
FEATURE_COLS = 1024
SEQUENCE_LENGTH = 96


class FeatureFormatError(ValueError):
    """A feature file violates the binary format; carries the byte offset."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (at byte {offset})")
        self.offset = offset


def write_features(path, features: np.ndarray) -> None:
    """Write a [rows x cols] float array as a feature file."""
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"features must be 2D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path, rows: int = FEATURE_ROWS, cols: int = FEATURE_COLS) -> np.ndarray:
    """Read and validate a feature file, returning float64 [rows x cols]."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FeatureFormatError(path, 0, "bad magic, expected FFAF")
    if len(blob) < 5 or blob[4] != VERSION:
        raise FeatureFormatError(path, 4, f"unsupported version {blob[4] if len(blob) > 4 else '?'}")
    if len(blob) < 13:
        raise FeatureFormatError(path, 5, "truncated header")
    r, c = struct.unpack_from("<II", blob, 5)
    if (r, c) != (rows, cols):
        raise FeatureFormatError(path, 5, f"shape {r}x{c}, expected {rows}x{cols}")
    need = 13 + 4 * r * c
    if len(blob) < need:
        raise FeatureFormatError(path, len(blob), f"truncated payload, expected {need} bytes")
    data = np.frombuffer(blob, dtype="<f4", count=r * c, offset=13)
    return data.reshape(r, c).astype(np.float64)


def resample_sequence(images: list, rng: np.random.Generator,
                      target: int = SEQUENCE_LENGTH) -> list:
    """Fix an image sequence to ``target`` elements.

    Longer sequences are randomly down-sampled preserving order; shorter
    ones repeat cyclically from the start until the target length.
    """
    n = len(images)
    if n == 0:
        raise ValueError("cannot resample an empty image sequence")
    if n == target:
        return list(images)
    if n > target:
        keep = np.sort(rng.choice(n, size=target, replace=False))
        return [images[i] for i in keep]
    reps = -(-target // n)
    return (list(images) * reps)[:target]


def token_signature(token: str, cols: int = FEATURE_COLS) -> np.ndarray:
    """Deterministic Gaussian signature vector for one token.

    Seeded from a hash of the token text so the same token always maps to
    the same vector, across runs and machines.
    """
    digest = hashlib.sha256(b"kgreport-feature:" + token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(seed).standard_normal(cols)


def synthesize_features(triples, case_seed: int, rows: int = FEATURE_ROWS,
                        cols: int = FEATURE_COLS, noise: float = 0.1) -> np.ndarray:
    """Feature map encoding a triple list: one signature row per token.

    The 3k tokens of k triples fill the rows cyclically; per-case Gaussian
    noise is added on top.  Distinct triple sets give distinct maps, so the
    mapping is injective up to hash collisions.
    """
    tokens = [w for t in triples for w in (t.subject, t.relation, t.object)]
    rng = np.random.default_rng([0x5EED, case_seed & 0xFFFFFFFF])
    base = np.zeros((rows, cols))
    if tokens:
        sigs = [token_signature(w, cols) for w in tokens]
        for i in range(rows):
            base[i] = sigs[i % len(sigs)]
    return base + noise * rng.standard_normal((rows, cols))


def gaussian_features(seed: int, rows: int = FEATURE_ROWS,
                      cols: int = FEATURE_COLS) -> np.ndarray:
    """Pure seeded Gaussian features (no triple structure)."""
    return np.random.default_rng(seed).standard_normal((rows, cols))


def ingest_features(source, rows: int = FEATURE_ROWS, cols: int = FEATURE_COLS) -> np.ndarray:
    """Load features from a file path or synthesize them from a spec.

    ``source`` may be a path, an int (pure Gaussian seed), or a dict with
    ``synth_seed`` and optional ``triples``.
    """
    if isinstance(source, (str, Path)):
        return read_features(source, rows, cols)
    if isinstance(source, int):
        return gaussian_features(source, rows, cols)
    if isinstance(source, dict):
        return synthesize_features(source.get("triples", ()), source["synth_seed"],
                                   rows, cols, source.get("noise", 0.1))
    raise TypeError(f"unsupported feature source: {type(source).__name__}")
