"""Stage I: per-layer graph encoders and auxiliary action heads on a frozen teacher.

The teacher backbone never receives gradients here; a parameter hash is
checked around every epoch and any drift aborts the run. Auxiliary heads
exist only for training and capsule export; routed inference never reads
them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import optim
from . import tensor as T
from .backbone import Backbone, MLPHead, NumericalError, backbone_hash, encode, forward_all_layers, init_mlp_head, mlp_head_forward
from .checkpoint import hash_arrays
from .config import Config
from .graph import CapsuleParams, capsule_tensors, clone_capsule_params, encode_capsule, init_capsule_params, set_standardization
from .optim import TrainSchedule
from .tensor import Tensor
from .world import ACTION_DIM, Episode, stack_episodes


class FrozenTeacherError(RuntimeError):
    """The teacher's parameters changed while they were supposed to be frozen."""


@dataclass
class GraphSettings:
    k: int
    affinity_dim: int
    dropout: float
    encoder: str  # "gat" or "mlp"


def graph_settings_from(cfg: Config) -> GraphSettings:
    return GraphSettings(
        k=cfg["graph.k"],
        affinity_dim=cfg["graph.affinity_dim"],
        dropout=cfg["graph.dropout"],
        encoder=cfg["graph.encoder"],
    )


@dataclass
class TeacherProbe:
    capsules: list[CapsuleParams]
    heads: list[MLPHead]


def init_probe(n_layers: int, d: int, d_a: int, d_c: int, seed: int) -> TeacherProbe:
    rng = np.random.default_rng([seed, 0x960])
    capsules = [init_capsule_params(rng, d, d_a, d_c) for _ in range(n_layers)]
    heads = [init_mlp_head(rng, d_c, d_c, ACTION_DIM) for _ in range(n_layers)]
    return TeacherProbe(capsules=capsules, heads=heads)


def aux_head_forward(
    head: MLPHead,
    s: Tensor,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    drop_rate: float = 0.0,
) -> Tensor:
    """Two-layer perceptron on a capsule, dropout after the hidden ReLU."""
    x = T.reshape(s, s.shape[:-1] + (1, s.shape[-1]))
    h = T.relu(T.add(T.matmul(x, head.w1), head.b1))
    if train_mode and drop_rate > 0.0:
        h = T.dropout(h, drop_rate, rng, train=True)
    out = T.add(T.matmul(h, head.w2), head.b2)
    return T.reshape(out, out.shape[:-2] + (out.shape[-1],))


def probe_layer_outputs(
    probe: TeacherProbe,
    hidden: list[Tensor],
    gs: GraphSettings,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[list[Tensor], list[Tensor]]:
    """Per-layer (capsule, action prediction) pairs from teacher hidden states."""
    capsules, preds = [], []
    for h, params, head in zip(hidden, probe.capsules, probe.heads):
        s = encode_capsule(h, params, gs.k, gs.encoder, train_mode, rng, gs.dropout)
        capsules.append(s)
        preds.append(aux_head_forward(head, s, train_mode, rng, gs.dropout))
    return capsules, preds


def aux_loss(
    probe: TeacherProbe,
    hidden: list[Tensor],
    actions: Tensor,
    gs: GraphSettings,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[float]]:
    """Unweighted layer sum of batch-mean squared action errors.

    Returns the total plus the per-layer values for reporting.
    """
    _, preds = probe_layer_outputs(probe, hidden, gs, train_mode, rng)
    total = None
    per_layer: list[float] = []
    for pred in preds:
        err = T.sub(pred, actions)
        layer_loss = T.sumsq(err, axis=-1).mean()
        per_layer.append(layer_loss.item())
        total = layer_loss if total is None else T.add(total, layer_loss)
    return total, per_layer


def probe_tensors(probe: TeacherProbe, prefix: str = "probe") -> dict[str, object]:
    out: dict[str, object] = {}
    for i, (params, head) in enumerate(zip(probe.capsules, probe.heads)):
        out.update(capsule_tensors(f"{prefix}/layer{i}", params))
        out[f"{prefix}/layer{i}/head_w1"] = head.w1
        out[f"{prefix}/layer{i}/head_b1"] = head.b1
        out[f"{prefix}/layer{i}/head_w2"] = head.w2
        out[f"{prefix}/layer{i}/head_b2"] = head.b2
    return out


def probe_trainables(probe: TeacherProbe) -> list[Tensor]:
    out = []
    for t in probe_tensors(probe).values():
        if isinstance(t, Tensor):
            out.append(t)
    return out


def probe_hash(probe: TeacherProbe) -> str:
    return hash_arrays(
        {k: (v.data if isinstance(v, Tensor) else v) for k, v in probe_tensors(probe).items()}
    )


def teacher_hidden(teacher: Backbone, episodes: list[Episode]) -> list[Tensor]:
    """Hidden states for a batch, computed off-tape (the teacher is frozen)."""
    v, l, _ = stack_episodes(episodes)
    return forward_all_layers(teacher, encode(teacher, v, l))


def calibrate_probe(
    probe: TeacherProbe,
    teacher: Backbone,
    episodes: list[Episode],
    gs: GraphSettings,
    batch: int = 64,
) -> None:
    """One pass over the calibration set to freeze capsule standardization.

    Uses the probe's initial parameters; the stats stay fixed for the rest
    of training.
    """
    raw: list[list[np.ndarray]] = [[] for _ in probe.capsules]
    for lo in range(0, len(episodes), batch):
        hidden = teacher_hidden(teacher, episodes[lo : lo + batch])
        for i, (h, params) in enumerate(zip(hidden, probe.capsules)):
            s = encode_capsule(h, params, gs.k, gs.encoder)
            raw[i].append(s.data if s.ndim == 2 else s.data[None])
    for params, chunks in zip(probe.capsules, raw):
        set_standardization(params, np.concatenate(chunks, axis=0))


def stage1_train(
    teacher: Backbone,
    probe: TeacherProbe,
    episodes: list[Episode],
    gs: GraphSettings,
    schedule: TrainSchedule,
) -> list[tuple[int, int, float]]:
    """Optimize the probe against the frozen teacher; returns (step, layer, aux_mse) rows."""
    frozen = backbone_hash(teacher)
    sched = schedule.resolve(len(episodes))
    params = probe_trainables(probe)
    state = optim.AdamWState(lr=sched.base_lr, weight_decay=sched.weight_decay)
    rng = np.random.default_rng([sched.seed, 0x57A6])
    rows: list[tuple[int, int, float]] = []
    step = 0
    for _ in range(sched.epochs):
        order = rng.permutation(len(episodes))
        for lo in range(0, len(order), sched.batch):
            batch_eps = [episodes[i] for i in order[lo : lo + sched.batch]]
            hidden = teacher_hidden(teacher, batch_eps)
            _, _, a = stack_episodes(batch_eps)
            with T.Tape() as tape:
                total, per_layer = aux_loss(
                    probe, hidden, Tensor(a), gs, train_mode=True, rng=rng
                )
            if not math.isfinite(total.item()):
                raise NumericalError(f"stage1 loss non-finite at step {step}")
            for p in params:
                p.grad = None
            T.backward(tape, total)
            grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
            optim.clip_grads(grads, sched.clip)
            optim.adamw_step(state, params, grads, lr=optim.lr_at(step, sched))
            for layer, mse in enumerate(per_layer):
                rows.append((step, layer, mse))
            step += 1
        if backbone_hash(teacher) != frozen:
            raise FrozenTeacherError("teacher parameters changed during stage 1")
    return rows


def probe_layer_mse(
    probe: TeacherProbe,
    teacher: Backbone,
    episodes: list[Episode],
    gs: GraphSettings,
    batch: int = 64,
) -> list[float]:
    """Per-layer mean squared action error with dropout disabled."""
    sums = np.zeros(len(probe.capsules))
    for lo in range(0, len(episodes), batch):
        chunk = episodes[lo : lo + batch]
        hidden = teacher_hidden(teacher, chunk)
        _, _, a = stack_episodes(chunk)
        _, preds = probe_layer_outputs(probe, hidden, gs)
        for i, pred in enumerate(preds):
            sums[i] += float(((pred.data - a) ** 2).sum())
    return list(sums / len(episodes))


@dataclass
class CapsuleCache:
    """Per-episode, per-layer teacher capsules and action predictions."""

    s: np.ndarray  # [n_episodes, L, d_c]
    a: np.ndarray  # [n_episodes, L, 7]
    manifest: dict[str, str]


def export_teacher_capsules(
    probe: TeacherProbe,
    teacher: Backbone,
    episodes: list[Episode],
    gs: GraphSettings,
    extra_manifest: dict[str, str] | None = None,
    batch: int = 64,
) -> CapsuleCache:
    """Deterministic dropout-free capsule cache for stage 2 supervision."""
    L = len(probe.capsules)
    d_c = probe.capsules[0].proj.shape[-1]
    s = np.zeros((len(episodes), L, d_c))
    a = np.zeros((len(episodes), L, ACTION_DIM))
    for lo in range(0, len(episodes), batch):
        chunk = episodes[lo : lo + batch]
        hidden = teacher_hidden(teacher, chunk)
        capsules, preds = probe_layer_outputs(probe, hidden, gs)
        for i in range(L):
            s[lo : lo + len(chunk), i] = capsules[i].data
            a[lo : lo + len(chunk), i] = preds[i].data
    manifest = {
        "kind": "capsule_cache",
        "n_episodes": str(len(episodes)),
        "probe_hash": probe_hash(probe),
        "teacher_hash": backbone_hash(teacher),
    }
    manifest.update(extra_manifest or {})
    return CapsuleCache(s=s, a=a, manifest=manifest)
