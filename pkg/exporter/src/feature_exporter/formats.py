"""Writers for the FVT1 / FHD1 binary containers and the JSON manifest.

These formats are the wire contract with the few-shot engine:

FVT1: magic "FVT1", then u32 little-endian version (1), w, h, d, count,
followed by count records of (u32 label, w*h*d float32 little-endian,
location-major with the channel index fastest).

FHD1: magic "FHD1", u32 d, u32 c, then c consecutive per-class weight
d-vectors (float32), c biases (float32), and c length-prefixed UTF-8
class names.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"FVT1"
HEAD_MAGIC = b"FHD1"
FEATURE_VERSION = 1


def write_feature_file(path, tensors: np.ndarray, labels) -> None:
    """Write an (n, h, w, d) float array as one FVT1 file.

    Rows are stored location-major, i.e. flattened (h, w) with the channel
    index innermost, matching reader expectations of q = row * w + col.
    """
    tensors = np.asarray(tensors, dtype=np.float32)
    if tensors.ndim != 4:
        raise ValueError(f"expected (n, h, w, d) tensors, got {tensors.shape}")
    n, h, w, d = tensors.shape
    if len(labels) != n:
        raise ValueError("need one label per tensor")
    payload = bytearray()
    payload += FEATURE_MAGIC
    payload += struct.pack("<5I", FEATURE_VERSION, w, h, d, n)
    for tensor, label in zip(tensors, labels):
        payload += struct.pack("<I", int(label))
        payload += np.ascontiguousarray(tensor.reshape(h * w, d), dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(payload))


def write_head_file(path, weights: np.ndarray, biases: np.ndarray, names) -> None:
    """Write a (c, d) weight matrix with biases and class names as FHD1."""
    weights = np.asarray(weights, dtype=np.float32)
    biases = np.asarray(biases, dtype=np.float32)
    c, d = weights.shape
    if biases.shape != (c,) or len(names) != c:
        raise ValueError("weights, biases and names disagree on class count")
    if c < 2:
        raise ValueError("head needs at least 2 classes")
    payload = bytearray()
    payload += HEAD_MAGIC
    payload += struct.pack("<2I", d, c)
    payload += np.ascontiguousarray(weights, dtype="<f4").tobytes()
    payload += np.ascontiguousarray(biases, dtype="<f4").tobytes()
    for name in names:
        raw = str(name).encode("utf-8")
        payload += struct.pack("<I", len(raw))
        payload += raw
    Path(path).write_bytes(bytes(payload))


def write_manifest(path, entries) -> None:
    """Write the dataset manifest; entries are (name, split, relpath, count)."""
    doc = {
        "version": 1,
        "classes": [
            {"name": name, "split": split, "features": str(rel), "count": int(count)}
            for name, split, rel, count in entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
