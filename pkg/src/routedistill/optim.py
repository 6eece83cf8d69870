"""AdamW with decoupled weight decay, plus gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamWState:
    """Per-parameter moment buffers and step bookkeeping.

    Moment buffers are allocated lazily on the first step and afterwards
    must shape-match their parameters; the step counter increases by
    exactly one per accepted step.
    """

    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    state: AdamWState,
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    lr: float | None = None,
) -> None:
    """One decoupled-weight-decay Adam step, in place.

    Parameters are first scaled by (1 - lr * wd), then updated with
    bias-corrected moments. Non-finite gradients reject the whole step
    before any state is touched.
    """
    if lr is None:
        lr = state.lr
    if lr < 0.0:
        raise ValueError(f"adamw_step: negative learning rate {lr}")
    if len(params) != len(grads):
        raise ValueError("adamw_step: params/grads length mismatch")

    checked: list[np.ndarray] = []
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} vs param {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("adamw_step: non-finite gradient, step rejected")
        checked.append(g)

    if not state.m:
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("adamw_step: optimizer state sized for a different parameter set")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    decay = 1.0 - lr * state.weight_decay
    for p, g, m, v in zip(params, checked, state.m, state.v):
        if state.weight_decay != 0.0:
            p.data *= decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainSchedule:
    epochs: int
    batch: int
    base_lr: float
    warmup: int
    cosine: bool
    clip: float
    seed: int
    weight_decay: float = 0.01
    total_steps: int = 0

    def resolve(self, n_episodes: int) -> "TrainSchedule":
        steps_per_epoch = (n_episodes + self.batch - 1) // self.batch
        total = max(1, self.epochs * steps_per_epoch)
        out = TrainSchedule(**{**self.__dict__, "total_steps": total})
        if self.epochs > 0 and out.warmup > out.total_steps:
            raise ValueError(
                f"warmup {out.warmup} exceeds total steps {out.total_steps}"
            )
        return out


def lr_at(step: int, sched: TrainSchedule) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at the last step."""
    if step < 0:
        raise ValueError(f"lr_at: negative step {step}")
    if sched.warmup > 0 and step < sched.warmup:
        return sched.base_lr * step / sched.warmup
    if not sched.cosine:
        return sched.base_lr
    span = max(1, sched.total_steps - sched.warmup)
    frac = min(1.0, (step - sched.warmup) / span)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g) ** 2))
    return total ** 0.5


def clip_grads(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so the global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0.0:
        raise ValueError(f"clip_grads: max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm
