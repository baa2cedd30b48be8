"""Stateless numerical kernels: softmax, entropy, cosine similarity, normalization.

All functions accept array-likes, compute in float64 and are safe for
concurrent use. Logarithms are natural throughout.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ValidationError

# Below this l1 mass a weight vector is treated as all-zero.
ZERO_MASS_EPS = 1e-12

# Probability vectors must sum to 1 within this tolerance.
PROB_SUM_TOL = 1e-6


def softmax_temp(u, temp: float) -> np.ndarray:
    """Temperature softmax sigma(u / temp), stable under large logits.

    Subtracts the max logit before exponentiation so the result is exact
    up to float noise under a constant shift of ``u``.
    """
    if temp <= 0:
        raise ValidationError(f"temperature must be positive, got {temp}")
    u = np.asarray(u, dtype=np.float64)
    if u.size == 0:
        raise ValidationError("softmax of an empty vector")
    z = u / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_prob_vector(p) -> np.ndarray:
    """Validate a probability vector: entries in [0,1], sums to 1."""
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValidationError("empty probability vector")
    if p.min() < -PROB_SUM_TOL or p.max() > 1 + PROB_SUM_TOL:
        raise ValidationError("probabilities must lie in [0, 1]")
    if abs(p.sum() - 1.0) > PROB_SUM_TOL:
        raise ValidationError(f"probabilities sum to {p.sum()}, expected 1")
    return p


def entropy(p) -> float:
    """Shannon entropy -sum p_j log p_j in nats, with 0 log 0 = 0."""
    p = check_prob_vector(p)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def cosine_sim(u, v) -> float:
    """Cosine similarity under the Frobenius inner product and norm.

    Inputs may be vectors or matrices of matching shape. Raises
    DegenerateInputError on a zero-norm input; the caller decides the
    fallback.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu <= ZERO_MASS_EPS or nv <= ZERO_MASS_EPS:
        raise DegenerateInputError("cosine similarity of a zero-norm input")
    return float(np.clip((u * v).sum() / (nu * nv), -1.0, 1.0))


def l1_normalize(w) -> np.ndarray:
    """Scale a nonnegative vector to unit l1 mass.

    An (effectively) all-zero vector maps to the uniform vector so that
    weighted pooling degrades to plain averaging.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValidationError("cannot normalize an empty vector")
    if w.min() < 0:
        raise ValidationError("l1_normalize requires nonnegative entries")
    mass = w.sum()
    if mass <= ZERO_MASS_EPS:
        return np.full(w.shape, 1.0 / w.size)
    return w / mass


def mean_ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% confidence halfwidth.

    Halfwidth is 1.96 * s / sqrt(N) with the Bessel-corrected sample
    standard deviation s. Requires N >= 2.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ValidationError("mean_ci95 needs a flat vector of at least 2 values")
    mean = float(values.mean())
    half = float(1.96 * values.std(ddof=1) / np.sqrt(values.size))
    return mean, half
