"""Losses, analytic gradients, optimizers, and the two fine-tuning stages.

The trainable representation is a per-location linear adapter A (d x d,
identity-initialized): the frozen backbone lives in precomputed feature
tensors, and adaptation maps every location feature f to A f. Base
training learns A jointly with a dense cosine head via SGD with Nesterov
momentum; novel adaptation runs a few Adam steps on a prototype loss,
recomputing prototypes whenever A changes.

All losses and gradients accumulate in float64 regardless of the feature
storage precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionMap, FeatureTensor, gwap
from .classify import (
    TAU_INIT,
    CosineHead,
    Prototypes,
    check_head_columns,
)
from .errors import DivergenceError, ValidationError
from .numerics import ZERO_MASS_EPS, check_prob_vector

NOVEL_MAX_STEPS = 60


@dataclass(frozen=True)
class Adapter:
    """Per-location linear map applied to every feature vector."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"adapter must be square, got {m.shape}")
        if not np.isfinite(m).all():
            raise ValidationError("adapter contains non-finite entries")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, dim: int) -> "Adapter":
        return cls(matrix=np.eye(dim))

    @property
    def d(self) -> int:
        return self.matrix.shape[0]


def apply_adapter(adapter: Adapter, feat: FeatureTensor) -> FeatureTensor:
    """Adapted copy of a feature tensor: every location feature f -> A f."""
    if adapter.d != feat.d:
        raise ValidationError(
            f"adapter dim {adapter.d} does not match feature dim {feat.d}"
        )
    data = feat.data.astype(np.float64) @ adapter.matrix.T
    return FeatureTensor(width=feat.width, height=feat.height, data=data)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for either fine-tuning stage."""

    learning_rate: float
    max_steps: int
    optimizer: str = "sgd_nesterov"
    momentum: float = 0.9
    batch_size: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.max_steps < 0:
            raise ValidationError("max_steps must be nonnegative")
        if self.optimizer not in ("sgd_nesterov", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")


def base_defaults(seed: int = 0, max_steps: int = 30) -> TrainConfig:
    """Base-stage defaults: SGD + Nesterov, batches of 200, low rate."""
    return TrainConfig(
        learning_rate=1e-3, max_steps=max_steps, optimizer="sgd_nesterov", seed=seed
    )


def novel_defaults(seed: int = 0, max_steps: int = 30) -> TrainConfig:
    """Novel-stage defaults: Adam with an even lower fixed rate."""
    return TrainConfig(
        learning_rate=1e-4, max_steps=max_steps, optimizer="adam", seed=seed
    )


def cross_entropy(p, y: int) -> float:
    """-log p_y; returns +inf when p_y underflows to zero."""
    p = check_prob_vector(p)
    if not 0 <= y < p.size:
        raise ValidationError(f"label {y} out of range for {p.size} classes")
    if p[y] == 0.0:
        return math.inf
    return float(-np.log(p[y]))


# --------------------------------------------------------------------------
# Dense cost over adapted feature tensors (base training objective)
# --------------------------------------------------------------------------


def _cosine_softmax_backward(S, P, y, tau):
    """Shared backward pass through softmax(tau * S) with label y.

    Returns (dS, dtau_contrib) for the summed cross-entropy over the rows
    of S.
    """
    delta = P.copy()
    delta[np.arange(P.shape[0]), y] -= 1.0
    dtau = float((delta * S).sum())
    return tau * delta, dtau


def _dense_example_terms(F, A, W, tau):
    """Forward pass of the dense cosine classifier on one example.

    F is the raw (r, d) feature matrix. Returns the intermediates needed
    for both the cost and its gradients.
    """
    G = F @ A.T
    g_norms = np.linalg.norm(G, axis=1, keepdims=True)
    if g_norms.min() <= ZERO_MASS_EPS:
        raise DivergenceError("adapted feature collapsed to zero norm")
    w_norms = np.linalg.norm(W, axis=0, keepdims=True)
    G_hat = G / g_norms
    W_hat = W / w_norms
    S = G_hat @ W_hat
    Z = tau * S
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    P = E / E.sum(axis=1, keepdims=True)
    return G_hat, g_norms, W_hat, w_norms, S, P


def dense_cost(
    batch: Sequence[tuple[FeatureTensor, int]], adapter: Adapter, head: CosineHead
) -> float:
    """Summed cross-entropy of the dense classifier, all locations labeled
    with their example's label."""
    A = adapter.matrix
    W = head.class_weights
    total = 0.0
    for feat, y in batch:
        if not 0 <= y < head.num_classes:
            raise ValidationError(f"label {y} out of range")
        _, _, _, _, S, P = _dense_example_terms(
            feat.data.astype(np.float64), A, W, head.tau
        )
        p_y = P[:, y]
        if p_y.min() == 0.0:
            return math.inf
        total += float(-np.log(p_y).sum())
    return total


def grad_dense_cost(
    batch: Sequence[tuple[FeatureTensor, int]], adapter: Adapter, head: CosineHead
) -> dict[str, np.ndarray]:
    """Analytic gradients of dense_cost w.r.t. W, tau, and A."""
    _, grads = _dense_cost_and_grads(batch, adapter, head)
    return grads


def _dense_cost_and_grads(batch, adapter: Adapter, head: CosineHead):
    A = adapter.matrix
    W = head.class_weights
    tau = head.tau
    dW = np.zeros_like(W)
    dA = np.zeros_like(A)
    dtau = 0.0
    total = 0.0
    for feat, y in batch:
        if not 0 <= y < head.num_classes:
            raise ValidationError(f"label {y} out of range")
        F = feat.data.astype(np.float64)
        G_hat, g_norms, W_hat, w_norms, S, P = _dense_example_terms(F, A, W, tau)
        total += float(-np.log(np.maximum(P[:, y], np.finfo(np.float64).tiny)).sum())
        labels = np.full(P.shape[0], y)
        dS, dtau_i = _cosine_softmax_backward(S, P, labels, tau)
        dtau += dtau_i
        # d cos / dw_j = (g_hat - s * w_hat) / ||w_j|| summed over locations
        dW += (G_hat.T @ dS - W_hat * (dS * S).sum(axis=0)) / w_norms
        # d cos / dg_q = (w_hat - s * g_hat) / ||g_q||, then g = A f
        dG = (dS @ W_hat.T - G_hat * (dS * S).sum(axis=1, keepdims=True)) / g_norms
        dA += dG.T @ F
    grads = {"W": dW, "tau": np.float64(dtau), "A": dA}
    if not all(np.isfinite(g).all() for g in grads.values()) or not math.isfinite(
        total
    ):
        raise DivergenceError("non-finite value in dense cost gradients")
    return total, grads


# --------------------------------------------------------------------------
# Prototype cost over pooled embeddings (novel adaptation objective)
# --------------------------------------------------------------------------


def _pooled_raw(support, maps) -> np.ndarray:
    """GwAP embeddings of the raw (un-adapted) support features, one row each.

    The adapter commutes with pooling, so adapted embeddings are U @ A.T.
    """
    if len(maps) != len(support):
        raise ValidationError("need one attention map per support example")
    return np.stack(
        [gwap(feat, amap) for (feat, _), amap in zip(support, maps)], axis=0
    )


def _proto_forward(E, protos: Prototypes, tau: float):
    e_norms = np.linalg.norm(E, axis=1, keepdims=True)
    if e_norms.min() <= ZERO_MASS_EPS:
        raise DivergenceError("support embedding collapsed to zero norm")
    V = protos.vectors
    v_norms = np.linalg.norm(V, axis=0, keepdims=True)
    if v_norms.min() <= ZERO_MASS_EPS:
        raise DivergenceError("prototype collapsed to zero norm")
    E_hat = E / e_norms
    V_hat = V / v_norms
    S = E_hat @ V_hat
    Z = tau * S
    Z = Z - Z.max(axis=1, keepdims=True)
    Ex = np.exp(Z)
    P = Ex / Ex.sum(axis=1, keepdims=True)
    return E_hat, e_norms, V_hat, S, P


def proto_cost(
    support: Sequence[tuple[FeatureTensor, int]],
    maps: Sequence[AttentionMap],
    adapter: Adapter,
    protos: Prototypes,
    tau: float,
) -> float:
    """Summed cross-entropy of support embeddings against fixed prototypes."""
    U = _pooled_raw(support, maps)
    E = U @ adapter.matrix.T
    y = np.array([label for _, label in support])
    if y.min() < 0 or y.max() >= protos.num_classes:
        raise ValidationError("support label out of prototype range")
    _, _, _, _, P = _proto_forward(E, protos, tau)
    p_y = P[np.arange(len(y)), y]
    if p_y.min() == 0.0:
        return math.inf
    return float(-np.log(p_y).sum())


def _proto_cost_and_grad_from_pooled(U, y, A, protos: Prototypes, tau: float):
    """Cost and dA for the prototype loss, with prototypes held constant."""
    E = U @ A.T
    E_hat, e_norms, V_hat, S, P = _proto_forward(E, protos, tau)
    p_y = np.maximum(P[np.arange(len(y)), y], np.finfo(np.float64).tiny)
    cost = float(-np.log(p_y).sum())
    dS, _ = _cosine_softmax_backward(S, P, y, tau)
    dE = (dS @ V_hat.T - E_hat * (dS * S).sum(axis=1, keepdims=True)) / e_norms
    dA = dE.T @ U
    if not (np.isfinite(dA).all() and math.isfinite(cost)):
        raise DivergenceError("non-finite value in prototype cost gradients")
    return cost, dA


def grad_proto_cost(
    support: Sequence[tuple[FeatureTensor, int]],
    maps: Sequence[AttentionMap],
    adapter: Adapter,
    protos: Prototypes,
    tau: float,
) -> dict[str, np.ndarray]:
    """Analytic gradient of proto_cost w.r.t. the adapter matrix."""
    U = _pooled_raw(support, maps)
    y = np.array([label for _, label in support])
    _, dA = _proto_cost_and_grad_from_pooled(U, y, adapter.matrix, protos, tau)
    return {"A": dA}


# --------------------------------------------------------------------------
# Optimizers (pure updates over dicts of float64 arrays)
# --------------------------------------------------------------------------


def sgd_nesterov_step(params, grads, state, config: TrainConfig):
    """One Nesterov-momentum step: v <- mu v + g; p <- p - lr (g + mu v)."""
    if state is None:
        state = {name: np.zeros_like(p) for name, p in params.items()}
    new_params, new_state = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = config.momentum * state[name] + g
        new_params[name] = p - config.learning_rate * (g + config.momentum * v)
        new_state[name] = v
    return new_params, new_state


def adam_step(params, grads, state, config: TrainConfig):
    """One Adam step with bias correction."""
    if state is None:
        state = {
            "t": 0,
            "m": {name: np.zeros_like(p) for name, p in params.items()},
            "v": {name: np.zeros_like(p) for name, p in params.items()},
        }
    t = state["t"] + 1
    new_params = {}
    new_m, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        m = config.beta1 * state["m"][name] + (1 - config.beta1) * g
        v = config.beta2 * state["v"][name] + (1 - config.beta2) * g * g
        m_hat = m / (1 - config.beta1**t)
        v_hat = v / (1 - config.beta2**t)
        new_params[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, {"t": t, "m": new_m, "v": new_v}


_STEPPERS = {"sgd_nesterov": sgd_nesterov_step, "adam": adam_step}


# --------------------------------------------------------------------------
# Training stages
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseTrainResult:
    adapter: Adapter
    head: CosineHead | None
    losses: tuple[float, ...] = field(default=())


@dataclass(frozen=True)
class AdaptResult:
    adapter: Adapter
    prototypes: Prototypes
    losses: tuple[float, ...] = field(default=())


def base_train(
    dataset: Sequence[tuple[FeatureTensor, int]],
    adapter: Adapter,
    config: TrainConfig,
    num_classes: int | None = None,
) -> BaseTrainResult:
    """Mini-batch training of the adapter and a dense cosine head.

    An empty dataset is the no-base-training path: the adapter is returned
    unchanged with no head. The head starts from seeded random unit
    columns and tau = 10.
    """
    if len(dataset) == 0:
        return BaseTrainResult(adapter=adapter, head=None, losses=())
    labels = [y for _, y in dataset]
    if num_classes is None:
        num_classes = max(labels) + 1
    if min(labels) < 0 or max(labels) >= num_classes:
        raise ValidationError("base label out of range")
    d = dataset[0][0].d
    rng = np.random.default_rng(config.seed)
    W = rng.standard_normal((d, num_classes))
    W /= np.linalg.norm(W, axis=0, keepdims=True)
    params = {"A": adapter.matrix, "W": W, "tau": np.float64(TAU_INIT)}
    stepper = _STEPPERS[config.optimizer]
    state = None
    losses: list[float] = []
    n = len(dataset)
    batch_size = min(config.batch_size, n)
    order: list[int] = []
    for step in range(config.max_steps):
        if len(order) < batch_size:
            order = list(rng.permutation(n))
        idx, order = order[:batch_size], order[batch_size:]
        batch = [dataset[i] for i in idx]
        head = CosineHead(class_weights=params["W"], tau=float(params["tau"]))
        try:
            cost, grads = _dense_cost_and_grads(batch, Adapter(params["A"]), head)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), step=step) from exc
        if not math.isfinite(cost):
            raise DivergenceError("loss diverged", step=step)
        losses.append(cost)
        # optimize the mean per location term so the rate is batch-size free
        scale = 1.0 / (len(batch) * batch[0][0].r)
        grads = {name: g * scale for name, g in grads.items()}
        params, state = stepper(params, grads, state, config)
        check_head_columns(params["W"])
    final_head = CosineHead(class_weights=params["W"], tau=float(params["tau"]))
    return BaseTrainResult(
        adapter=Adapter(params["A"]), head=final_head, losses=tuple(losses)
    )


def _prototypes_from_pooled(E: np.ndarray, y: np.ndarray, num_classes: int) -> Prototypes:
    vectors = np.zeros((E.shape[1], num_classes))
    counts = []
    for j in range(num_classes):
        members = E[y == j]
        vectors[:, j] = members.mean(axis=0)
        counts.append(int(members.shape[0]))
    return Prototypes(vectors=vectors, counts=tuple(counts))


def adapt_novel(
    support: Sequence[tuple[FeatureTensor, int]],
    adapter: Adapter,
    maps: Sequence[AttentionMap],
    config: TrainConfig,
    num_classes: int | None = None,
) -> AdaptResult:
    """Few Adam steps on the prototype loss, prototypes tracking the adapter.

    Each iteration recomputes prototypes from the current adapter, then
    takes one optimizer step treating them as constants. Prototypes are
    recomputed once more from the final adapter. Capped at 60 iterations.

    ``losses`` holds the support loss before each step plus the final
    loss, so it has max_steps + 1 entries.
    """
    if config.max_steps > NOVEL_MAX_STEPS:
        raise ValidationError(
            f"novel adaptation is capped at {NOVEL_MAX_STEPS} iterations"
        )
    if len(support) == 0:
        raise ValidationError("novel adaptation needs support examples")
    y = np.array([label for _, label in support])
    if num_classes is None:
        num_classes = int(y.max()) + 1
    present = set(y.tolist())
    if present != set(range(num_classes)):
        raise ValidationError(
            f"support must cover all {num_classes} classes, got {sorted(present)}"
        )
    U = _pooled_raw(support, maps)
    tau = TAU_INIT
    params = {"A": adapter.matrix}
    stepper = _STEPPERS[config.optimizer]
    state = None
    losses: list[float] = []
    for step in range(config.max_steps):
        protos = _prototypes_from_pooled(U @ params["A"].T, y, num_classes)
        try:
            cost, dA = _proto_cost_and_grad_from_pooled(
                U, y, params["A"], protos, tau
            )
        except DivergenceError as exc:
            raise DivergenceError(str(exc), step=step) from exc
        losses.append(cost)
        params, state = stepper(params, {"A": dA}, state, config)
    final_protos = _prototypes_from_pooled(U @ params["A"].T, y, num_classes)
    final_cost, _ = _proto_cost_and_grad_from_pooled(
        U, y, params["A"], final_protos, tau
    )
    losses.append(final_cost)
    return AdaptResult(
        adapter=Adapter(params["A"]),
        prototypes=final_protos,
        losses=tuple(losses),
    )
