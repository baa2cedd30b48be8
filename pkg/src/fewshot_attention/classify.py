"""Cosine and prototype classifiers over pooled or dense embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionMap, FeatureTensor, gwap
from .errors import DegenerateInputError, MissingClassError, ValidationError
from .numerics import ZERO_MASS_EPS, check_prob_vector, softmax_temp

TAU_INIT = 10.0


@dataclass(frozen=True)
class CosineHead:
    """Bias-free class weights plus a trainable logit scale tau.

    ``class_weights`` has shape (d, c), one column per class. Columns must
    be nonzero since cosine similarity normalizes them.
    """

    class_weights: np.ndarray
    tau: float = TAU_INIT

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValidationError(f"class weights must be (d, c), got {w.shape}")
        if not np.isfinite(w).all():
            raise ValidationError("class weights contain non-finite entries")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        check_head_columns(w)
        object.__setattr__(self, "class_weights", w)

    @property
    def d(self) -> int:
        return self.class_weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[1]


def check_head_columns(weights: np.ndarray) -> None:
    """Reject class weight columns too close to zero to normalize."""
    norms = np.linalg.norm(weights, axis=0)
    if norms.min() <= ZERO_MASS_EPS:
        raise DegenerateInputError(
            f"class weight column {int(norms.argmin())} has zero norm"
        )


@dataclass(frozen=True)
class Prototypes:
    """Per-class mean embeddings with the support counts behind them."""

    vectors: np.ndarray
    counts: tuple[int, ...]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != len(self.counts):
            raise ValidationError("prototype vectors must be (d, c) with c counts")
        if any(c < 1 for c in self.counts):
            raise MissingClassError("every class needs at least one support example")
        if not np.isfinite(v).all():
            raise ValidationError("prototypes contain non-finite entries")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "counts", tuple(self.counts))

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[1]


def predict(p) -> int:
    """Class of maximum probability; ties break to the lowest index."""
    return int(np.argmax(check_prob_vector(p)))


def _cosine_probs(embeddings: np.ndarray, head: CosineHead) -> np.ndarray:
    """Softmax over tau-scaled cosine similarities, one row per embedding.

    Shared by the pooled and dense classifiers so that the dense form at
    r=1 is bitwise identical to the pooled form.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.shape[1] != head.d:
        raise ValidationError(
            f"embedding dim {e.shape[1]} does not match head dim {head.d}"
        )
    e_norms = np.linalg.norm(e, axis=1, keepdims=True)
    if e_norms.min() <= ZERO_MASS_EPS:
        raise DegenerateInputError("zero-norm embedding cannot be classified")
    w = head.class_weights
    w_norms = np.linalg.norm(w, axis=0, keepdims=True)
    cos = (e / e_norms) @ (w / w_norms)
    return softmax_temp(head.tau * cos, 1.0)


def cosine_classify(embedding, head: CosineHead) -> np.ndarray:
    """Probabilities over classes for one pooled embedding vector."""
    e = np.asarray(embedding, dtype=np.float64)
    if e.ndim != 1:
        raise ValidationError(f"expected a flat embedding, got shape {e.shape}")
    return _cosine_probs(e[None, :], head)[0]


def classify_embeddings(embeddings, head: CosineHead) -> np.ndarray:
    """Batched cosine classification: (n, d) embeddings -> (n, c) probabilities."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise ValidationError(f"expected (n, d) embeddings, got shape {e.shape}")
    return _cosine_probs(e, head)


def dense_classify(feat: FeatureTensor, head: CosineHead) -> np.ndarray:
    """Cosine classification independently at every spatial location.

    Returns (r, c) probabilities; row q equals cosine_classify of the
    location-q feature vector.
    """
    return _cosine_probs(feat.data, head)


def build_prototypes(embeddings, labels, num_classes: int) -> Prototypes:
    """Average the support embeddings of each class into its prototype."""
    e = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if e.ndim != 2 or e.shape[0] != y.shape[0]:
        raise ValidationError("need one label per embedding row")
    vectors = np.zeros((e.shape[1], num_classes))
    counts = []
    for j in range(num_classes):
        members = e[y == j]
        if members.shape[0] == 0:
            raise MissingClassError(f"class {j} has no support embeddings")
        vectors[:, j] = members.mean(axis=0)
        counts.append(members.shape[0])
    return Prototypes(vectors=vectors, counts=tuple(counts))


def prototype_classify(
    query: FeatureTensor, protos: Prototypes, amap: AttentionMap, tau: float
) -> np.ndarray:
    """Pool the query with GwAP and classify against the prototypes.

    The argmax equals the nearest prototype by cosine similarity; tau only
    sharpens the probabilities.
    """
    embedding = gwap(query, amap)
    head = CosineHead(class_weights=protos.vectors, tau=tau)
    return cosine_classify(embedding, head)
