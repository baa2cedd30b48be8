"""Finite-difference verification of the analytic dense-cost gradients.

The checker only ever calls :func:`dense_cost`, so it stays independent of
the analytic gradient path it verifies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import FeatureTensor
from .classify import CosineHead
from .train import Adapter, dense_cost, grad_dense_cost

FD_STEP = 1e-4
REL_TOL = 1e-4
GRAD_MASK = 1e-6


def random_instance(rng: np.random.Generator, r: int, d: int, c: int, n: int = 2):
    """A small random training instance with a non-trivial adapter."""
    side = int(round(np.sqrt(r)))
    if side * side == r:
        w, h = side, side
    else:
        w, h = r, 1
    batch = [
        (
            FeatureTensor(width=w, height=h, data=rng.standard_normal((r, d))),
            int(rng.integers(0, c)),
        )
        for _ in range(n)
    ]
    adapter = Adapter(np.eye(d) + 0.3 * rng.standard_normal((d, d)) / np.sqrt(d))
    weights = rng.standard_normal((d, c))
    weights /= np.linalg.norm(weights, axis=0, keepdims=True)
    head = CosineHead(class_weights=weights, tau=float(2.0 + 8.0 * rng.random()))
    return batch, adapter, head


def fd_gradients(batch, adapter: Adapter, head: CosineHead, step: float = FD_STEP):
    """Central finite differences of dense_cost w.r.t. W, tau, and A."""

    def cost(A, W, tau):
        return dense_cost(batch, Adapter(A), CosineHead(class_weights=W, tau=tau))

    A = adapter.matrix.copy()
    W = head.class_weights.copy()
    tau = head.tau
    dW = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        orig = W[idx]
        W[idx] = orig + step
        hi = cost(A, W, tau)
        W[idx] = orig - step
        lo = cost(A, W, tau)
        W[idx] = orig
        dW[idx] = (hi - lo) / (2 * step)
    dA = np.zeros_like(A)
    for idx in np.ndindex(A.shape):
        orig = A[idx]
        A[idx] = orig + step
        hi = cost(A, W, tau)
        A[idx] = orig - step
        lo = cost(A, W, tau)
        A[idx] = orig
        dA[idx] = (hi - lo) / (2 * step)
    dtau = (cost(A, W, tau + step) - cost(A, W, tau - step)) / (2 * step)
    return {"W": dW, "tau": np.float64(dtau), "A": dA}


def max_relative_error(analytic, numeric, mask: float = GRAD_MASK) -> float:
    """Largest relative error over components where |analytic| > mask."""
    worst = 0.0
    for name, ga in analytic.items():
        ga = np.atleast_1d(np.asarray(ga, dtype=np.float64))
        gn = np.atleast_1d(np.asarray(numeric[name], dtype=np.float64))
        keep = np.abs(ga) > mask
        if not keep.any():
            continue
        rel = np.abs(ga - gn) / np.maximum(np.abs(ga), np.abs(gn))
        worst = max(worst, float(rel[keep].max()))
    return worst


@dataclass(frozen=True)
class CheckReport:
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def format(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.instances} instances, "
            f"max relative error {self.max_rel_error:.3e} "
            f"(tolerance {self.tolerance:.1e})"
        )


def run_check(
    dims=((1, 4, 2), (4, 4, 3), (9, 16, 5)),
    instances_per_dim: int = 3,
    seed: int = 0,
    step: float = FD_STEP,
    tolerance: float = REL_TOL,
    perturb: float = 0.0,
) -> CheckReport:
    """Compare analytic and finite-difference gradients over random instances.

    ``perturb`` injects a deliberate error into the analytic gradients; it
    exists so the checker itself can be shown to catch wrong gradients.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    count = 0
    for r, d, c in dims:
        for _ in range(instances_per_dim):
            batch, adapter, head = random_instance(rng, r, d, c)
            analytic = grad_dense_cost(batch, adapter, head)
            if perturb:
                analytic = {k: v * (1.0 + perturb) for k, v in analytic.items()}
            numeric = fd_gradients(batch, adapter, head, step=step)
            worst = max(worst, max_relative_error(analytic, numeric))
            count += 1
    return CheckReport(instances=count, max_rel_error=worst, tolerance=tolerance)
