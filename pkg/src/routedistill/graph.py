"""Graph-structured encapsulation of a token matrix into a semantic capsule.

Pipeline per layer: pairwise exponential affinities from two learned
projections, top-k sparsification with L1 normalization, two rounds of
attention-weighted message passing with ReLU, attention pooling, and a
projection to the capsule width with optional frozen standardization.

Self-loops stay in the top-k candidate set, so k = N reduces the
normalized adjacency exactly to a row softmax of the affinity logits and
the aggregation step coincides with single-head softmax attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

AFFINITY_EXP_LIMIT = 700.0
STD_VAR_FLOOR = 1e-8
L1_EPS = 1e-12

# Affinity projections start well below Kaiming scale: the exponential
# kernel sits on an unnormalized residual stream whose row norms grow
# with depth, and full-scale init pushes the exponent past the overflow
# guard. Small init means near-uniform affinities at step zero; training
# sharpens them.
AFFINITY_INIT_SCALE = 0.05


class AffinityOverflowError(FloatingPointError):
    pass


@dataclass
class CapsuleParams:
    """Per-layer graph encoder: projections, message weights, pooling, capsule."""

    phi: Tensor  # [d, d_a]
    psi: Tensor  # [d, d_a]
    w1: Tensor  # [d, d]  first message-passing round
    w2: Tensor  # [d, d]  second round
    wp: Tensor  # [d]     pooling projection
    proj: Tensor  # [d, d_c]
    std_mean: np.ndarray  # [d_c], frozen after calibration
    std_var: np.ndarray  # [d_c]
    calibrated: bool = False


def _affinity_init(rng: np.random.Generator, d: int, d_a: int) -> Tensor:
    t = T.kaiming_uniform(rng, (d, d_a), fan_in=d)
    t.data *= AFFINITY_INIT_SCALE
    return t


def init_capsule_params(rng: np.random.Generator, d: int, d_a: int, d_c: int) -> CapsuleParams:
    return CapsuleParams(
        phi=_affinity_init(rng, d, d_a),
        psi=_affinity_init(rng, d, d_a),
        w1=T.kaiming_uniform(rng, (d, d), fan_in=d),
        w2=T.kaiming_uniform(rng, (d, d), fan_in=d),
        wp=T.kaiming_uniform(rng, (d,), fan_in=d),
        proj=T.kaiming_uniform(rng, (d, d_c), fan_in=d),
        std_mean=np.zeros(d_c),
        std_var=np.ones(d_c),
        calibrated=False,
    )


def clone_capsule_params(p: CapsuleParams) -> CapsuleParams:
    return CapsuleParams(
        phi=Tensor(p.phi.data.copy(), requires_grad=True),
        psi=Tensor(p.psi.data.copy(), requires_grad=True),
        w1=Tensor(p.w1.data.copy(), requires_grad=True),
        w2=Tensor(p.w2.data.copy(), requires_grad=True),
        wp=Tensor(p.wp.data.copy(), requires_grad=True),
        proj=Tensor(p.proj.data.copy(), requires_grad=True),
        std_mean=p.std_mean.copy(),
        std_var=p.std_var.copy(),
        calibrated=p.calibrated,
    )


@dataclass
class SparseAdjacency:
    """Per-row neighbor lists (ascending indices) and normalized weights."""

    indices: np.ndarray  # [..., N, k] int
    weights: Tensor  # [..., N, k], rows sum to 1 up to the L1 epsilon


def build_affinity(h: Tensor, phi: Tensor, psi: Tensor) -> Tensor:
    """Dense exp(phi(h_i) . psi(h_j)) affinities, diagonal included."""
    if h.shape[-2] < 2:
        raise T.ShapeError(f"build_affinity: need N >= 2 tokens, got {h.shape}")
    q = T.matmul(h, phi)
    k = T.matmul(h, psi)
    logits = T.matmul(q, T.transpose(k))
    if float(logits.data.max()) > AFFINITY_EXP_LIMIT:
        raise AffinityOverflowError(
            "affinity exponent above 700; rescale the affinity projection dim"
        )
    return T.exp(logits)


def topk_normalize(affinity: Tensor, k: int, eps: float = L1_EPS) -> SparseAdjacency:
    """Keep the k largest affinities per row and L1-normalize them.

    Ties break toward the smaller column index; k must not exceed N.
    """
    n = affinity.shape[-1]
    if k > n:
        raise T.ShapeError(f"topk_normalize: k={k} exceeds row size {n}")
    idx = T.topk_indices(affinity, k)
    vals = T.take_along_last(affinity, idx)
    return SparseAdjacency(indices=idx, weights=T.l1_normalize(vals, eps))


def aggregate(h: Tensor, adj: SparseAdjacency, w: Tensor) -> Tensor:
    """Pre-activation messages: sum_j A(i,j) W h_j over each neighbor list."""
    return T.sparse_aggregate(T.matmul(h, w), adj.weights, adj.indices)


def message_pass(
    h: Tensor,
    adj: SparseAdjacency,
    params: CapsuleParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    drop_rate: float = 0.0,
) -> Tensor:
    """Two ReLU message-passing rounds sharing one adjacency."""
    out = T.relu(aggregate(h, adj, params.w1))
    if train_mode and drop_rate > 0.0:
        out = T.dropout(out, drop_rate, rng, train=True)
    out = T.relu(aggregate(out, adj, params.w2))
    if train_mode and drop_rate > 0.0:
        out = T.dropout(out, drop_rate, rng, train=True)
    return out


def attention_pool(h_tilde: Tensor, params: CapsuleParams) -> Tensor:
    """Soft-attention pooling over tokens, then capsule projection.

    Standardization applies only after calibration; before that the raw
    projection is returned.
    """
    d = h_tilde.shape[-1]
    wp_col = T.reshape(params.wp, (d, 1))
    scores = T.matmul(h_tilde, wp_col)  # [..., N, 1]
    scores = T.reshape(scores, scores.shape[:-1])  # [..., N]
    alpha = T.softmax(scores)
    alpha_row = T.reshape(alpha, alpha.shape[:-1] + (1, alpha.shape[-1]))
    pooled = T.matmul(alpha_row, h_tilde)  # [..., 1, d]
    pooled = T.reshape(pooled, pooled.shape[:-2] + (d,))
    capsule = T.matmul(
        T.reshape(pooled, pooled.shape[:-1] + (1, d)), params.proj
    )
    capsule = T.reshape(capsule, capsule.shape[:-2] + (capsule.shape[-1],))
    if params.calibrated:
        inv = 1.0 / np.sqrt(params.std_var)
        capsule = T.mul(T.sub(capsule, Tensor(params.std_mean)), Tensor(inv))
    return capsule


def encapsulate(
    h: Tensor,
    params: CapsuleParams,
    k: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    drop_rate: float = 0.0,
) -> tuple[SparseAdjacency, Tensor]:
    """Affinity -> top-k adjacency -> message passing -> pooled capsule."""
    affinity = build_affinity(h, params.phi, params.psi)
    adj = topk_normalize(affinity, k)
    h_tilde = message_pass(h, adj, params, train_mode, rng, drop_rate)
    return adj, attention_pool(h_tilde, params)


def mlp_capsule(
    h: Tensor,
    params: CapsuleParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    drop_rate: float = 0.0,
) -> Tensor:
    """Ablation encoder: mean-pool the tokens through a two-layer MLP.

    Reuses w1/w2/proj so checkpoints keep one schema across both encoders.
    """
    pooled = h.mean(axis=-2)
    d = pooled.shape[-1]
    x = T.reshape(pooled, pooled.shape[:-1] + (1, d))
    x = T.relu(T.matmul(x, params.w1))
    if train_mode and drop_rate > 0.0:
        x = T.dropout(x, drop_rate, rng, train=True)
    x = T.relu(T.matmul(x, params.w2))
    if train_mode and drop_rate > 0.0:
        x = T.dropout(x, drop_rate, rng, train=True)
    capsule = T.matmul(x, params.proj)
    capsule = T.reshape(capsule, capsule.shape[:-2] + (capsule.shape[-1],))
    if params.calibrated:
        inv = 1.0 / np.sqrt(params.std_var)
        capsule = T.mul(T.sub(capsule, Tensor(params.std_mean)), Tensor(inv))
    return capsule


def encode_capsule(
    h: Tensor,
    params: CapsuleParams,
    k: int,
    encoder: str = "gat",
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    drop_rate: float = 0.0,
) -> Tensor:
    if encoder == "gat":
        return encapsulate(h, params, k, train_mode, rng, drop_rate)[1]
    if encoder == "mlp":
        return mlp_capsule(h, params, train_mode, rng, drop_rate)
    raise ValueError(f"unknown capsule encoder {encoder!r}")


def set_standardization(params: CapsuleParams, capsules: np.ndarray) -> None:
    """Freeze dataset-level mean/variance from a calibration batch of capsules."""
    params.std_mean = capsules.mean(axis=0)
    params.std_var = np.maximum(capsules.var(axis=0), STD_VAR_FLOOR)
    params.calibrated = True


def capsule_tensors(prefix: str, p: CapsuleParams) -> dict[str, Tensor | np.ndarray]:
    return {
        f"{prefix}/phi": p.phi,
        f"{prefix}/psi": p.psi,
        f"{prefix}/W1": p.w1,
        f"{prefix}/W2": p.w2,
        f"{prefix}/wp": p.wp,
        f"{prefix}/proj": p.proj,
        f"{prefix}/std_mean": p.std_mean,
        f"{prefix}/std_var": p.std_var,
    }
