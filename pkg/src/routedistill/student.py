"""Self-derived student with a per-layer sigmoid router.

The student starts as a bit-identical copy of the teacher backbone, plus
its own graph encoders and heads taken from the trained stage-1 probe.
Training blends each layer's output with its input through a continuous
gate; inference discretizes the same gates at a threshold and executes
only the surviving layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import (
    Backbone,
    EncoderOutputs,
    MLPHead,
    backbone_tensors,
    clone_backbone,
    encode,
    fuse,
    layer_forward,
    pooled_head_forward,
)
from .checkpoint import hash_arrays
from .graph import CapsuleParams, capsule_tensors, clone_capsule_params, encode_capsule
from .probe import GraphSettings, TeacherProbe, aux_head_forward
from .tensor import Tensor


@dataclass
class RouterParams:
    """One (weight, bias) pair per layer over the pooled [v; l] embedding."""

    w: list[Tensor]  # each [2d]
    b: list[Tensor]  # each [1]


def init_router(n_layers: int, d: int, bias_init: float) -> RouterParams:
    # Zero weights + negative bias start every gate at the same low score.
    return RouterParams(
        w=[Tensor(np.zeros(2 * d), requires_grad=True) for _ in range(n_layers)],
        b=[Tensor(np.full(1, bias_init), requires_grad=True) for _ in range(n_layers)],
    )


@dataclass
class GateVector:
    g: np.ndarray  # [L] in [0, 1]
    mask: np.ndarray  # [L] bool, g >= tau
    tau: float


@dataclass
class StudentModel:
    backbone: Backbone
    capsules: list[CapsuleParams]
    heads: list[MLPHead]
    router: RouterParams
    final_head: MLPHead


def _clone_head(h: MLPHead) -> MLPHead:
    return MLPHead(
        w1=Tensor(h.w1.data.copy(), requires_grad=True),
        b1=Tensor(h.b1.data.copy(), requires_grad=True),
        w2=Tensor(h.w2.data.copy(), requires_grad=True),
        b2=Tensor(h.b2.data.copy(), requires_grad=True),
    )


def init_student(teacher: Backbone, probe: TeacherProbe, bias_init: float) -> StudentModel:
    """Self-derivation: replicate the teacher and its trained probes.

    The backbone copy is bit-identical; the final head starts from the
    teacher's native action head.
    """
    replica = clone_backbone(teacher)
    return StudentModel(
        backbone=replica,
        capsules=[clone_capsule_params(p) for p in probe.capsules],
        heads=[_clone_head(h) for h in probe.heads],
        router=init_router(teacher.cfg.layers, teacher.cfg.width, bias_init),
        final_head=_clone_head(teacher.head),
    )


def compute_gates(student: StudentModel, enc: EncoderOutputs) -> Tensor:
    """Sigmoid gate per layer from mean-pooled visual and instruction embeddings."""
    d = enc.v_e.shape[-1]
    v_bar = enc.v_e.mean(axis=-2)  # [..., d]
    l_bar = T.reshape(enc.l_e, enc.l_e.shape[:-2] + (d,))
    x = T.concat([v_bar, l_bar], axis=-1)  # [..., 2d]
    x_row = T.reshape(x, x.shape[:-1] + (1, 2 * d))
    cols = []
    for w, b in zip(student.router.w, student.router.b):
        w_col = T.reshape(w, (2 * d, 1))
        pre = T.add(T.matmul(x_row, w_col), b)  # [..., 1, 1]
        cols.append(T.reshape(pre, pre.shape[:-2] + (1,)))
    return T.sigmoid(T.concat(cols, axis=-1))  # [..., L]


def gate_vector(student: StudentModel, enc: EncoderOutputs, tau: float) -> GateVector:
    g = compute_gates(student, enc).data
    return GateVector(g=g, mask=g >= tau, tau=tau)


def soft_gated_forward(
    student: StudentModel,
    enc: EncoderOutputs,
    gates: Tensor,
    gs: GraphSettings,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor], list[Tensor]]:
    """Training forward: z_l = g_l layer(z_{l-1}) + (1 - g_l) z_{l-1}.

    Returns the final state plus per-layer capsules and head predictions.
    Gates that are exactly 0 or 1 short-circuit the blend so binary gates
    reproduce hard routing bit for bit (their sigmoid derivative is zero
    there anyway).
    """
    z = fuse(enc)
    lead = gates.shape[:-1]
    capsules: list[Tensor] = []
    preds: list[Tensor] = []
    for l, lp in enumerate(student.backbone.layers):
        g_l = T.slice_axis(gates, -1, l, l + 1)  # [..., 1]
        z_tmp = layer_forward(lp, z)
        gval = g_l.data
        if np.all(gval == 1.0):
            z = z_tmp
        elif np.all(gval == 0.0):
            z = z
        else:
            g_b = T.reshape(g_l, lead + (1, 1))
            one_minus = T.sub(Tensor(1.0), g_b)
            z = T.add(T.mul(z_tmp, g_b), T.mul(z, one_minus))
        s = encode_capsule(z, student.capsules[l], gs.k, gs.encoder, train_mode, rng, gs.dropout)
        capsules.append(s)
        preds.append(aux_head_forward(student.heads[l], s, train_mode, rng, gs.dropout))
    return z, capsules, preds


@dataclass
class RouteTrace:
    gates: np.ndarray  # [L]
    mask: np.ndarray  # [L] bool
    executed: int


def hard_routed_forward(
    student: StudentModel, enc: EncoderOutputs, tau: float
) -> tuple[Tensor, RouteTrace]:
    """Inference forward: execute layers with g >= tau, copy states otherwise.

    Graph encoders and auxiliary heads are never touched here. Single
    episode only; routing decisions are per input.
    """
    gv = gate_vector(student, enc, tau)
    z = fuse(enc)
    for l, lp in enumerate(student.backbone.layers):
        if gv.mask[l]:
            z = layer_forward(lp, z)
    trace = RouteTrace(gates=gv.g, mask=gv.mask, executed=int(gv.mask.sum()))
    return z, trace


def predict_action(student: StudentModel, z: Tensor) -> Tensor:
    return pooled_head_forward(student.final_head, z)


def routed_predict(student: StudentModel, v, l, tau: float) -> tuple[np.ndarray, RouteTrace]:
    enc = encode(student.backbone, v, l)
    z, trace = hard_routed_forward(student, enc, tau)
    return predict_action(student, z).data, trace


# ---------------------------------------------------------------------------
# parameter registry


def student_tensors(student: StudentModel) -> dict[str, object]:
    out: dict[str, object] = dict(backbone_tensors(student.backbone, prefix="student"))
    for i, (params, head) in enumerate(zip(student.capsules, student.heads)):
        out.update(capsule_tensors(f"student/probe/layer{i}", params))
        out[f"student/probe/layer{i}/head_w1"] = head.w1
        out[f"student/probe/layer{i}/head_b1"] = head.b1
        out[f"student/probe/layer{i}/head_w2"] = head.w2
        out[f"student/probe/layer{i}/head_b2"] = head.b2
    out["student/final_head/w1"] = student.final_head.w1
    out["student/final_head/b1"] = student.final_head.b1
    out["student/final_head/w2"] = student.final_head.w2
    out["student/final_head/b2"] = student.final_head.b2
    for i, (w, b) in enumerate(zip(student.router.w, student.router.b)):
        out[f"router/layer{i}/w"] = w
        out[f"router/layer{i}/b"] = b
    return out


def student_trainables(student: StudentModel) -> list[Tensor]:
    return [t for t in student_tensors(student).values() if isinstance(t, Tensor)]


def student_hash(student: StudentModel) -> str:
    return hash_arrays(
        {k: (v.data if isinstance(v, Tensor) else v) for k, v in student_tensors(student).items()}
    )
