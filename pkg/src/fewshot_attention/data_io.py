"""Bit-exact file formats, manifest parsing, and the synthetic generator.

Feature container ("FVT1"): all integers unsigned 32-bit little-endian,
features 32-bit IEEE-754 little-endian.

    magic    4 bytes ASCII "FVT1"
    version  u32 (= 1)
    w, h, d  u32 spatial width, height, channels
    count    u32 number of records
    records  count x (label u32, w*h*d float32 location-major)

Location-major means location index q = row * w + col varies slowest and
the channel index fastest.

Prior-head container ("FHD1"):

    magic    4 bytes ASCII "FHD1"
    d, c     u32 input dim and class count (c >= 2)
    weights  c consecutive d-vectors, float32
    biases   c float32
    names    c x (u32 byte length, UTF-8 bytes)

The manifest is JSON: a list of class entries (name, split in
{base, val, novel}, feature file path relative to the manifest, example
count) plus an optional "exclude" list of class names removed from every
split.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import FeatureTensor, PriorHead
from .errors import DataError, ParseError, ValidationError

FEATURE_MAGIC = b"FVT1"
HEAD_MAGIC = b"FHD1"
FEATURE_VERSION = 1
SPLITS = ("base", "val", "novel")


# --------------------------------------------------------------------------
# FVT1 feature files
# --------------------------------------------------------------------------


def write_features(path, dims: tuple[int, int, int], examples) -> None:
    """Write (FeatureTensor, label) pairs to an FVT1 file."""
    w, h, d = dims
    if min(w, h, d) < 1:
        raise ValidationError(f"invalid feature dims {dims}")
    payload = bytearray()
    payload += FEATURE_MAGIC
    payload += struct.pack("<5I", FEATURE_VERSION, w, h, d, len(examples))
    for feat, label in examples:
        if (feat.width, feat.height, feat.d) != (w, h, d):
            raise ValidationError(
                f"tensor dims ({feat.width},{feat.height},{feat.d}) "
                f"do not match file dims {dims}"
            )
        if label < 0 or label > 0xFFFFFFFF:
            raise ValidationError(f"label {label} does not fit in u32")
        payload += struct.pack("<I", label)
        payload += np.ascontiguousarray(feat.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(payload))


def _read_exact(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise ParseError(f"truncated file while reading {what}", offset=len(buf))
    return buf[offset : offset + size], offset + size


def peek_features(path) -> tuple[int, int, int, int]:
    """Validate an FVT1 header and return (w, h, d, count) without payload."""
    buf = Path(path).read_bytes()
    (w, h, d, count), _ = _parse_feature_header(buf, path)
    return w, h, d, count


def _parse_feature_header(buf: bytes, path) -> tuple[tuple[int, int, int, int], int]:
    magic, offset = _read_exact(buf, 0, 4, "magic")
    if magic != FEATURE_MAGIC:
        raise ParseError(f"bad magic {magic!r} in {path}", offset=0)
    header, offset = _read_exact(buf, offset, 20, "header")
    version, w, h, d, count = struct.unpack("<5I", header)
    if version != FEATURE_VERSION:
        raise ParseError(f"unsupported feature file version {version}", offset=4)
    if min(w, h, d) < 1:
        raise ParseError(f"invalid dims ({w},{h},{d}) in {path}", offset=8)
    return (w, h, d, count), offset


def read_features(path):
    """Read an FVT1 file -> ((w, h, d), list of (FeatureTensor, label))."""
    buf = Path(path).read_bytes()
    (w, h, d, count), offset = _parse_feature_header(buf, path)
    record_bytes = 4 + 4 * w * h * d
    expected = offset + count * record_bytes
    if len(buf) < expected:
        raise ParseError(
            f"payload ends early: need {expected} bytes, have {len(buf)}",
            offset=len(buf),
        )
    if len(buf) > expected:
        raise ParseError("trailing bytes after declared records", offset=expected)
    examples = []
    for _ in range(count):
        (label,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        data = np.frombuffer(buf, dtype="<f4", count=w * h * d, offset=offset)
        offset += 4 * w * h * d
        if not np.isfinite(data).all():
            raise ParseError("non-finite feature value", offset=offset)
        examples.append(
            (FeatureTensor(width=w, height=h, data=data.reshape(w * h, d)), label)
        )
    return (w, h, d), examples


# --------------------------------------------------------------------------
# FHD1 prior-head files
# --------------------------------------------------------------------------


def write_head(path, head: PriorHead) -> None:
    payload = bytearray()
    payload += HEAD_MAGIC
    payload += struct.pack("<2I", head.d, head.num_classes)
    # per-class weight vectors are the columns of the (d, c) matrix
    payload += np.ascontiguousarray(head.weights.T, dtype="<f4").tobytes()
    payload += np.ascontiguousarray(head.biases, dtype="<f4").tobytes()
    names = head.class_names or tuple(
        f"class_{j:03d}" for j in range(head.num_classes)
    )
    for name in names:
        raw = name.encode("utf-8")
        payload += struct.pack("<I", len(raw))
        payload += raw
    Path(path).write_bytes(bytes(payload))


def read_head(path) -> PriorHead:
    buf = Path(path).read_bytes()
    magic, offset = _read_exact(buf, 0, 4, "magic")
    if magic != HEAD_MAGIC:
        raise ParseError(f"bad magic {magic!r} in {path}", offset=0)
    header, offset = _read_exact(buf, offset, 8, "header")
    d, c = struct.unpack("<2I", header)
    if d < 1:
        raise ParseError(f"invalid input dim {d}", offset=4)
    if c < 2:
        raise ParseError(f"prior head needs at least 2 classes, got {c}", offset=8)
    raw, offset = _read_exact(buf, offset, 4 * d * c, "weights")
    weights = np.frombuffer(raw, dtype="<f4").reshape(c, d).T.astype(np.float64)
    raw, offset = _read_exact(buf, offset, 4 * c, "biases")
    biases = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    names = []
    for _ in range(c):
        raw, offset = _read_exact(buf, offset, 4, "name length")
        (length,) = struct.unpack("<I", raw)
        raw, offset = _read_exact(buf, offset, length, "name")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8 in name table: {exc}", offset=offset)
    if offset != len(buf):
        raise ParseError("trailing bytes after name table", offset=offset)
    return PriorHead(weights=weights, biases=biases, class_names=tuple(names))


# --------------------------------------------------------------------------
# Trained artifacts (adapter + optional cosine head), float64 for bit-exact
# round-trips of training results
# --------------------------------------------------------------------------

ARTIFACT_MAGIC = b"FAD1"


def write_artifacts(path, adapter, head=None) -> None:
    """Write a trained adapter and optional cosine head.

    Layout: magic "FAD1", u32 d, u32 c (0 when no head), float64 tau,
    adapter matrix d*d float64 row-major, head weights d*c float64
    row-major.
    """
    d = adapter.d
    c = 0 if head is None else head.num_classes
    tau = 0.0 if head is None else head.tau
    payload = bytearray()
    payload += ARTIFACT_MAGIC
    payload += struct.pack("<2Id", d, c, tau)
    payload += np.ascontiguousarray(adapter.matrix, dtype="<f8").tobytes()
    if head is not None:
        if head.d != d:
            raise ValidationError("head dim does not match adapter dim")
        payload += np.ascontiguousarray(head.class_weights, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(payload))


def read_artifacts(path):
    """Read a trained-artifact file -> (Adapter, CosineHead | None)."""
    from .classify import CosineHead
    from .train import Adapter

    buf = Path(path).read_bytes()
    magic, offset = _read_exact(buf, 0, 4, "magic")
    if magic != ARTIFACT_MAGIC:
        raise ParseError(f"bad magic {magic!r} in {path}", offset=0)
    raw, offset = _read_exact(buf, offset, 16, "header")
    d, c, tau = struct.unpack("<2Id", raw)
    raw, offset = _read_exact(buf, offset, 8 * d * d, "adapter")
    adapter = Adapter(np.frombuffer(raw, dtype="<f8").reshape(d, d).copy())
    head = None
    if c:
        raw, offset = _read_exact(buf, offset, 8 * d * c, "head weights")
        head = CosineHead(
            class_weights=np.frombuffer(raw, dtype="<f8").reshape(d, c).copy(),
            tau=tau,
        )
    if offset != len(buf):
        raise ParseError("trailing bytes after artifacts", offset=offset)
    return adapter, head


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassEntry:
    name: str
    split: str
    features: Path
    count: int


@dataclass(frozen=True)
class DatasetManifest:
    """Validated class list with disjoint base/val/novel splits."""

    root: Path
    classes: tuple[ClassEntry, ...]

    def split_classes(self, split: str) -> list[ClassEntry]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [c for c in self.classes if c.split == split]

    def class_named(self, name: str) -> ClassEntry:
        for c in self.classes:
            if c.name == name:
                return c
        raise DataError(f"no class named {name!r}")


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a JSON manifest; excluded classes are dropped."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "classes" not in doc:
        raise DataError("manifest must be an object with a 'classes' list")
    excluded = set(doc.get("exclude", []))
    root = path.parent
    entries = []
    seen = set()
    for item in doc["classes"]:
        try:
            name = item["name"]
            split = item["split"]
            features = item["features"]
            count = int(item["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed class entry {item!r}: {exc}") from exc
        if name in seen:
            raise DataError(f"duplicate class name {name!r}")
        seen.add(name)
        if split not in SPLITS:
            raise DataError(f"class {name!r} has unknown split {split!r}")
        if count < 0:
            raise DataError(f"class {name!r} has negative count")
        if name in excluded:
            continue
        entries.append(
            ClassEntry(name=name, split=split, features=root / features, count=count)
        )
    manifest = DatasetManifest(root=root, classes=tuple(entries))
    if check_files:
        for entry in manifest.classes:
            if not entry.features.exists():
                raise DataError(f"feature file missing for {entry.name!r}: {entry.features}")
            w, h, d, count = peek_features(entry.features)
            if count != entry.count:
                raise DataError(
                    f"class {entry.name!r} declares {entry.count} examples "
                    f"but file holds {count}"
                )
    return manifest


def write_manifest(path, classes, exclude=()) -> None:
    """Write a manifest; ``classes`` holds (name, split, relative path, count)."""
    doc = {
        "version": 1,
        "classes": [
            {"name": n, "split": s, "features": str(f), "count": c}
            for n, s, f, c in classes
        ],
    }
    if exclude:
        doc["exclude"] = list(exclude)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# --------------------------------------------------------------------------
# Synthetic dataset generator
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Clutter benchmark: planted class signal amid shared background.

    ``classes`` is the (base, val, novel) class count triple. Each example
    places its class direction on a random ceil(signal_fraction * r)
    subset of locations; the rest carry clutter directions shared by all
    classes, scaled CLUTTER_GAIN times stronger than the signal so that
    plain average pooling drowns in background. Gaussian noise of scale
    ``noise`` is added everywhere. The generated prior head is aligned
    with the class signal directions and orthogonal to the clutter, so
    its predictions are confident exactly where the signal sits.
    """

    classes: tuple[int, int, int] = (2, 2, 8)
    examples_per_class: int = 40
    width: int = 7
    height: int = 7
    channels: int = 32
    signal_fraction: float = 0.25
    separation: float = 1.0
    noise: float = 0.1
    prior_contrast: float = 8.0
    seed: int = 0

    NUM_CLUTTER = 3
    CLUTTER_GAIN = 2.5

    def __post_init__(self):
        if len(self.classes) != 3 or min(self.classes) < 1:
            raise ValidationError("need at least one class per split")
        if self.examples_per_class < 1:
            raise ValidationError("need at least one example per class")
        if min(self.width, self.height, self.channels) < 1:
            raise ValidationError("dims must be at least 1")
        if not 0 < self.signal_fraction <= 1:
            raise ValidationError("signal_fraction must lie in (0, 1]")
        if min(self.separation, self.noise, self.prior_contrast) < 0:
            raise ValidationError("scales must be nonnegative")
        if self.separation == 0 and self.noise == 0:
            raise ValidationError("all-zero features: separation and noise both 0")
        total = sum(self.classes)
        if total + self.NUM_CLUTTER > self.channels:
            raise ValidationError(
                f"{total} classes + {self.NUM_CLUTTER} clutter directions "
                f"need at least {total + self.NUM_CLUTTER} channels, "
                f"have {self.channels}"
            )

    @property
    def total_classes(self) -> int:
        return sum(self.classes)

    @property
    def r(self) -> int:
        return self.width * self.height


def _orthonormal_columns(rng: np.random.Generator, d: int, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, n)))
    # fix the QR sign ambiguity so generation is reproducible
    return q * np.sign(np.diag(r))


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write feature files, a prior head, and a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    d = spec.channels
    total = spec.total_classes
    basis = _orthonormal_columns(rng, d, total + spec.NUM_CLUTTER)
    mu = basis[:, :total]
    clutter = basis[:, total : total + spec.NUM_CLUTTER]

    head = PriorHead(
        weights=spec.prior_contrast * mu,
        biases=np.zeros(total),
        class_names=tuple(f"prior_{j:03d}" for j in range(total)),
    )
    write_head(out_dir / "prior_head.fhd", head)

    r = spec.r
    n_sig = math.ceil(spec.signal_fraction * r)
    names = []
    for split, count in zip(SPLITS, spec.classes):
        names += [(f"{split}_{i:02d}", split) for i in range(count)]

    entries = []
    for j, (name, split) in enumerate(names):
        examples = []
        for _ in range(spec.examples_per_class):
            data = np.empty((r, d))
            sig_idx = rng.choice(r, size=n_sig, replace=False)
            bg_mask = np.ones(r, dtype=bool)
            bg_mask[sig_idx] = False
            data[sig_idx] = spec.separation * mu[:, j]
            n_bg = int(bg_mask.sum())
            if n_bg:
                dirs = rng.integers(0, spec.NUM_CLUTTER, size=n_bg)
                gain = spec.CLUTTER_GAIN * spec.separation
                data[bg_mask] = gain * clutter[:, dirs].T
            data += spec.noise * rng.standard_normal((r, d))
            feat = FeatureTensor(
                width=spec.width,
                height=spec.height,
                data=data.astype(np.float32),
            )
            examples.append((feat, j))
        rel = Path("features") / f"{name}.fvt"
        write_features(out_dir / rel, (spec.width, spec.height, d), examples)
        entries.append((name, split, rel.as_posix(), spec.examples_per_class))

    write_manifest(out_dir / "manifest.json", entries)
    return read_manifest(out_dir / "manifest.json")
