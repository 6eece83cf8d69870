"""Distillation objectives: semantic alignment, triple-MSE action loss,
depth-weighted combination, and the gate load-balancing penalty.

Squared L2 throughout means the per-sample sum of squared entries,
averaged over the batch. Teacher-side quantities are always detached;
the previous-layer student prediction enters the action loss behind a
stop-gradient so shallower layers never receive that term's adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    eta: float = 0.5
    gamma: float = 0.05
    kappa: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "eta", "gamma", "kappa"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class LossReport:
    """Per-layer decomposition of one training step's objective."""

    sem: list[float]
    act: list[float]
    lambdas: list[float]
    lb: float
    total: float
    grad_norm: float | None = None

    def recompose(self, w: LossWeights) -> float:
        core = sum(
            lam * (w.alpha * s + w.beta * a)
            for lam, s, a in zip(self.lambdas, self.sem, self.act)
        )
        return core + w.gamma * self.lb


def _mean_sumsq(x: Tensor) -> Tensor:
    """Batch mean of per-sample sums of squares; [B, d] -> scalar."""
    return T.sumsq(x, axis=-1).mean()


def _unit_rows(s: Tensor) -> Tensor:
    norms = T.pow_scalar(T.sumsq(s, axis=-1, keepdims=True), 0.5)
    return T.div(s, norms)


def semantic_loss(s_stu: Tensor, s_tea, eta: float) -> Tensor:
    """Instance cosine alignment plus the pairwise-cosine Gram penalty.

    s_tea is treated as a constant. Capsule batches are [B, d_c]; a batch
    of one degenerates the relational term to zero since both Gram
    matrices are [[1]].
    """
    s_tea = s_tea if isinstance(s_tea, Tensor) else Tensor(s_tea)
    s_tea = T.stop_grad(s_tea)
    if s_stu.ndim != 2 or s_tea.shape != s_stu.shape:
        raise T.ShapeError(
            f"semantic_loss: want matching [B, d_c] batches, got {s_stu.shape} vs {s_tea.shape}"
        )
    if np.any(np.linalg.norm(s_stu.data, axis=-1) < 1e-12) or np.any(
        np.linalg.norm(s_tea.data, axis=-1) < 1e-12
    ):
        raise ValueError("semantic_loss: zero-norm capsule, cosine undefined")
    instance = T.sub(Tensor(1.0), T.cosine(s_stu, s_tea)).mean()
    u_stu = _unit_rows(s_stu)
    u_tea = _unit_rows(s_tea)
    gram_stu = T.matmul(u_stu, T.transpose(u_stu))
    gram_tea = T.matmul(u_tea, T.transpose(u_tea))
    relational = T.frob_diff_sq(gram_stu, gram_tea)
    return T.add(instance, T.scale(relational, eta))


def action_loss(
    a_stu: Tensor,
    a_true,
    a_tea,
    a_prev: Tensor | None,
    layer_index: int,
    detach_prev: bool = True,
) -> Tensor:
    """Triple MSE: ground truth, teacher prediction, previous-layer student.

    layer_index is 1-based; the previous-layer term is omitted at the first
    layer. detach_prev=False exists only for the stop-gradient regression
    test.
    """
    a_true = a_true if isinstance(a_true, Tensor) else Tensor(a_true)
    a_tea = a_tea if isinstance(a_tea, Tensor) else Tensor(a_tea)
    loss = T.add(
        _mean_sumsq(T.sub(a_stu, T.stop_grad(a_true))),
        _mean_sumsq(T.sub(a_stu, T.stop_grad(a_tea))),
    )
    if layer_index > 1:
        if a_prev is None:
            raise ValueError(f"action_loss: layer {layer_index} needs the previous prediction")
        prev = T.stop_grad(a_prev) if detach_prev else a_prev
        loss = T.add(loss, _mean_sumsq(T.sub(a_stu, prev)))
    return loss


def lambda_weights(n_layers: int, kappa: float) -> np.ndarray:
    """Depth power-law (l / L) ** kappa for l = 1 .. L."""
    if n_layers < 1:
        raise ValueError("lambda_weights: need at least one layer")
    l = np.arange(1, n_layers + 1, dtype=np.float64)
    return (l / n_layers) ** kappa


def load_balance(gates: Tensor) -> Tensor:
    """Variance-style penalty sum_l (g_l - mean g)^2, batch-meaned."""
    centered = T.sub(gates, gates.mean(axis=-1, keepdims=True))
    per_sample = T.sumsq(centered, axis=-1)
    if per_sample.ndim == 0:
        return per_sample
    return per_sample.mean()


def total_loss(
    sem_terms: list[Tensor],
    act_terms: list[Tensor],
    gates: Tensor,
    w: LossWeights,
) -> tuple[Tensor, LossReport]:
    """lambda-weighted semantic/action sum plus the load-balancing term."""
    if len(sem_terms) != len(act_terms):
        raise ValueError("total_loss: per-layer term lists disagree")
    lambdas = lambda_weights(len(sem_terms), w.kappa)
    total = None
    for lam, sem, act in zip(lambdas, sem_terms, act_terms):
        layer_term = T.scale(T.add(T.scale(sem, w.alpha), T.scale(act, w.beta)), float(lam))
        total = layer_term if total is None else T.add(total, layer_term)
    lb = load_balance(gates)
    total = T.add(total, T.scale(lb, w.gamma))
    report = LossReport(
        sem=[t.item() for t in sem_terms],
        act=[t.item() for t in act_terms],
        lambdas=[float(x) for x in lambdas],
        lb=lb.item(),
        total=total.item(),
    )
    return total, report
