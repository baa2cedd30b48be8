"""Certainty-based spatial attention over frozen feature tensors.

A frozen prior classifier (weights + biases over prior classes) is applied
densely at every spatial location of a stored feature tensor. Locations
where its prediction is certain (low entropy over the prior classes) get
high attention weight; uncertain locations, typically background clutter,
get weight near zero. The normalized weights drive weighted average
pooling (GwAP).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .numerics import l1_normalize, softmax_temp

# Temperature defaults per dataset profile, chosen on validation data.
TEMP_PROFILES = {
    "cub": 100.0,
    "mini-modified": 2.6,
    "mini-original": 2.4,
    "synthetic": 1.0,
}


@dataclass(frozen=True)
class FeatureTensor:
    """One image's frozen-backbone activation map.

    ``data`` has shape (r, d) with r = w*h spatial locations (row-major:
    location q sits at row q // w, column q % w) and d channels.
    """

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("feature tensor needs positive spatial dims")
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] != self.width * self.height:
            raise ValidationError(
                f"feature data shape {data.shape} does not match "
                f"{self.width}x{self.height} locations"
            )
        if data.shape[1] < 1:
            raise ValidationError("feature tensor needs at least one channel")
        if not np.isfinite(data).all():
            raise ValidationError("feature tensor contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def r(self) -> int:
        return self.width * self.height

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PriorHead:
    """Frozen fully-connected classifier over the prior classes.

    ``weights`` has shape (d, c) with one column per prior class;
    ``biases`` has length c. At least two classes are required, otherwise
    the entropy normalizer log(c) vanishes.
    """

    weights: np.ndarray
    biases: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
            raise ValidationError(
                f"inconsistent head shapes: weights {w.shape}, biases {b.shape}"
            )
        if w.shape[1] < 2:
            raise ValidationError("prior head needs at least 2 classes")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("prior head contains non-finite entries")
        names = tuple(self.class_names)
        if names and len(names) != w.shape[1]:
            raise ValidationError("class name count does not match head width")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "class_names", names)

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class AttentionMap:
    """Per-location certainty weights for one feature tensor.

    ``raw`` entries lie in [0, 1]; ``normalized`` is the l1-normalized
    version filled in by :func:`normalize_map`.
    """

    width: int
    height: int
    raw: np.ndarray
    normalized: np.ndarray | None = field(default=None)

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim != 1 or raw.shape[0] != self.width * self.height:
            raise ValidationError(
                f"raw weights shape {raw.shape} does not match "
                f"{self.width}x{self.height} locations"
            )
        if raw.min() < 0 or raw.max() > 1:
            raise ValidationError("raw attention weights must lie in [0, 1]")
        object.__setattr__(self, "raw", raw)
        if self.normalized is not None:
            norm = np.asarray(self.normalized, dtype=np.float64)
            if norm.shape != raw.shape:
                raise ValidationError("normalized weights shape mismatch")
            object.__setattr__(self, "normalized", norm)

    @property
    def r(self) -> int:
        return self.width * self.height


def dense_prior_probs(feat: FeatureTensor, head: PriorHead, temp: float) -> np.ndarray:
    """Apply the prior head densely (1x1 convolution) with temperature softmax.

    Returns an (r, c) array whose row q is the prior-class probability
    vector at location q.
    """
    if feat.d != head.d:
        raise ValidationError(
            f"feature channels ({feat.d}) do not match head input dim ({head.d})"
        )
    logits = feat.data.astype(np.float64) @ head.weights + head.biases
    return softmax_temp(logits, temp)


def certainty_weights(probs: np.ndarray) -> np.ndarray:
    """1 - H(p)/log(c) over the last axis, clamped to [0, 1].

    Accepts any batch shape (..., c); the clamp absorbs float noise at the
    entropy extremes.
    """
    p = np.asarray(probs, dtype=np.float64)
    c = p.shape[-1]
    if c < 2:
        raise ValidationError("certainty needs at least 2 prior classes")
    if p.min() < -1e-6 or p.max() > 1 + 1e-6:
        raise ValidationError("probabilities must lie in [0, 1]")
    sums = p.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValidationError("probability rows must sum to 1")
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    ent = -plogp.sum(axis=-1)
    return np.clip(1.0 - ent / np.log(c), 0.0, 1.0)


def attention_weights(probs: np.ndarray, width: int, height: int) -> AttentionMap:
    """Certainty weights per location of a dense (r, c) probability array."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != width * height:
        raise ValidationError(
            f"expected ({width * height}, c) probabilities, got {probs.shape}"
        )
    return AttentionMap(width=width, height=height, raw=certainty_weights(probs))


def normalize_map(amap: AttentionMap) -> AttentionMap:
    """Fill the l1-normalized weights of a raw attention map."""
    return AttentionMap(
        width=amap.width,
        height=amap.height,
        raw=amap.raw,
        normalized=l1_normalize(amap.raw),
    )


def compute_map(feat: FeatureTensor, head: PriorHead, temp: float) -> AttentionMap:
    """Dense prior probabilities -> certainty weights -> l1 normalization."""
    probs = dense_prior_probs(feat, head, temp)
    return normalize_map(attention_weights(probs, feat.width, feat.height))


def uniform_map(width: int, height: int) -> AttentionMap:
    """All-ones raw map; its normalized form makes GwAP coincide with GAP."""
    r = width * height
    return AttentionMap(
        width=width, height=height, raw=np.ones(r), normalized=np.full(r, 1.0 / r)
    )


def gap(feat: FeatureTensor) -> np.ndarray:
    """Global average pooling: the arithmetic mean over locations."""
    return feat.data.astype(np.float64).mean(axis=0)


def gwap(feat: FeatureTensor, amap: AttentionMap) -> np.ndarray:
    """Global weighted average pooling: sum_q w_hat[q] * feature[q].

    A convex combination of the location features, so each output channel
    stays within that channel's min/max over locations.
    """
    if amap.normalized is None:
        raise ValidationError("attention map must be normalized before pooling")
    if amap.r != feat.r:
        raise ValidationError(
            f"map covers {amap.r} locations, feature tensor has {feat.r}"
        )
    return amap.normalized @ feat.data.astype(np.float64)


def heatmap_export(amap: AttentionMap, path) -> None:
    """Write the raw weights as an 8-bit binary portable graymap (PGM).

    Pixel value is round(255 * raw[q]), row-major with q = row * width + col.
    """
    pixels = np.floor(255.0 * amap.raw + 0.5).astype(np.uint8)
    header = f"P5\n{amap.width} {amap.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())
