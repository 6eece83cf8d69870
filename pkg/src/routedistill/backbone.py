"""Toy multimodal trunk: linear encoders, pre-norm attention blocks, action head.

The trunk is rank-polymorphic: every function below accepts a single
[N, d] token matrix or a batched [B, N, d] stack, because the underlying
primitives broadcast over leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import hash_arrays
from .config import Config
from .tensor import Tensor
from .world import ACTION_DIM, INSTRUCTION_DIM

LN_EPS = 1e-5


class NumericalError(RuntimeError):
    """Training or inference hit a non-finite value; CLI exit code 4."""


@dataclass(frozen=True)
class BackboneConfig:
    layers: int
    width: int
    n_heads: int
    d_in: int
    d_l: int
    capsule_dim: int
    ff_mult: int
    head_hidden: int
    seed: int

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError(f"layers must be >= 2, got {self.layers}")
        if self.width % self.n_heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.capsule_dim > self.width:
            raise ValueError("capsule_dim must be <= width")

    @property
    def d_ff(self) -> int:
        return self.width * self.ff_mult

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads


def backbone_config_from(cfg: Config) -> BackboneConfig:
    return BackboneConfig(
        layers=cfg["backbone.layers"],
        width=cfg["backbone.width"],
        n_heads=cfg["backbone.heads"],
        d_in=cfg["world.token_dim"],
        d_l=INSTRUCTION_DIM,
        capsule_dim=cfg["backbone.capsule_dim"],
        ff_mult=cfg["backbone.ff_mult"],
        head_hidden=cfg["backbone.head_hidden"],
        seed=cfg["backbone.seed"],
    )


@dataclass
class LayerParams:
    wq: Tensor  # [H, d, d_head]
    wk: Tensor
    wv: Tensor
    wo: Tensor  # [d, d]
    bo: Tensor  # [d]
    w1: Tensor  # [d, d_ff]
    b1: Tensor
    w2: Tensor  # [d_ff, d]
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


@dataclass
class MLPHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class Backbone:
    cfg: BackboneConfig
    enc_v_w: Tensor  # [d_in, d]
    enc_v_b: Tensor
    enc_l_w: Tensor  # [d_l, d]
    enc_l_b: Tensor
    layers: list[LayerParams] = field(default_factory=list)
    head: MLPHead | None = None


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_layer(rng: np.random.Generator, cfg: BackboneConfig) -> LayerParams:
    d, dh, h = cfg.width, cfg.head_dim, cfg.n_heads
    # Residual-branch output projections shrink with depth so the stream
    # stays well-conditioned at init.
    res = 1.0 / math.sqrt(2.0 * cfg.layers)
    wo = T.kaiming_uniform(rng, (d, d), fan_in=d)
    wo.data *= res
    w2 = T.kaiming_uniform(rng, (cfg.d_ff, d), fan_in=cfg.d_ff)
    w2.data *= res
    return LayerParams(
        wq=T.kaiming_uniform(rng, (h, d, dh), fan_in=d),
        wk=T.kaiming_uniform(rng, (h, d, dh), fan_in=d),
        wv=T.kaiming_uniform(rng, (h, d, dh), fan_in=d),
        wo=wo,
        bo=_zeros(d),
        w1=T.kaiming_uniform(rng, (d, cfg.d_ff), fan_in=d),
        b1=_zeros(cfg.d_ff),
        w2=w2,
        b2=_zeros(d),
        ln1_g=_ones(d),
        ln1_b=_zeros(d),
        ln2_g=_ones(d),
        ln2_b=_zeros(d),
    )


def init_mlp_head(rng: np.random.Generator, d_in: int, hidden: int, d_out: int) -> MLPHead:
    return MLPHead(
        w1=T.kaiming_uniform(rng, (d_in, hidden), fan_in=d_in),
        b1=_zeros(hidden),
        w2=T.kaiming_uniform(rng, (hidden, d_out), fan_in=hidden),
        b2=_zeros(d_out),
    )


def init_backbone(cfg: BackboneConfig) -> Backbone:
    rng = np.random.default_rng(cfg.seed)
    head = init_mlp_head(rng, cfg.width, cfg.head_hidden, ACTION_DIM)
    # Zero output layer: the first prediction is the zero action instead of
    # a Kaiming-scale vector, which skips a long shrink-the-output phase.
    head.w2.data[...] = 0.0
    return Backbone(
        cfg=cfg,
        enc_v_w=T.kaiming_uniform(rng, (cfg.d_in, cfg.width), fan_in=cfg.d_in),
        enc_v_b=_zeros(cfg.width),
        enc_l_w=T.kaiming_uniform(rng, (cfg.d_l, cfg.width), fan_in=cfg.d_l),
        enc_l_b=_zeros(cfg.width),
        layers=[init_layer(rng, cfg) for _ in range(cfg.layers)],
        head=head,
    )


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = T.sub(x, mu)
    var = T.scale(T.sumsq(centered, axis=-1, keepdims=True), 1.0 / x.shape[-1])
    inv = T.pow_scalar(T.add(var, T.Tensor(LN_EPS)), -0.5)
    return T.add(T.mul(T.mul(centered, inv), gain), bias)


def attention(x: Tensor, lp: LayerParams) -> Tensor:
    """Multi-head self-attention over the token axis (no masking)."""
    dh = lp.wq.shape[-1]
    xh = T.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])  # [..., 1, N, d]
    q = T.matmul(xh, lp.wq)  # [..., H, N, dh]
    k = T.matmul(xh, lp.wk)
    v = T.matmul(xh, lp.wv)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores)
    ctx = T.matmul(attn, v)  # [..., H, N, dh]
    merged = T.swapaxes(ctx, -3, -2)  # [..., N, H, dh]
    flat = T.reshape(merged, merged.shape[:-2] + (merged.shape[-2] * merged.shape[-1],))
    return T.add(T.matmul(flat, lp.wo), lp.bo)


def attention_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head aggregation softmax(q k^T / sqrt(dh)) v, pre output-projection."""
    dh = wq.shape[-1]
    q = T.matmul(x, wq)
    k = T.matmul(x, wk)
    v = T.matmul(x, wv)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    return T.matmul(T.softmax(scores), v)


def feed_forward(x: Tensor, lp: LayerParams) -> Tensor:
    h = T.relu(T.add(T.matmul(x, lp.w1), lp.b1))
    return T.add(T.matmul(h, lp.w2), lp.b2)


def layer_forward(lp: LayerParams, x: Tensor) -> Tensor:
    """Pre-norm residual block: x + Attn(LN(x)), then + FFN(LN(.))."""
    x = T.add(x, attention(layernorm(x, lp.ln1_g, lp.ln1_b), lp))
    x = T.add(x, feed_forward(layernorm(x, lp.ln2_g, lp.ln2_b), lp))
    return x


@dataclass
class EncoderOutputs:
    v_e: Tensor  # [..., N_v, d]
    l_e: Tensor  # [..., 1, d]


def encode(bb: Backbone, v, l) -> EncoderOutputs:
    v = v if isinstance(v, Tensor) else Tensor(v)
    l = l if isinstance(l, Tensor) else Tensor(l)
    if v.shape[-1] != bb.cfg.d_in:
        raise T.ShapeError(f"encode: visual width {v.shape[-1]} != d_in {bb.cfg.d_in}")
    if l.shape[-1] != bb.cfg.d_l:
        raise T.ShapeError(f"encode: instruction width {l.shape[-1]} != d_l {bb.cfg.d_l}")
    v_e = T.add(T.matmul(v, bb.enc_v_w), bb.enc_v_b)
    l_row = T.reshape(l, l.shape[:-1] + (1, l.shape[-1]))
    l_e = T.add(T.matmul(l_row, bb.enc_l_w), bb.enc_l_b)
    return EncoderOutputs(v_e=v_e, l_e=l_e)


def fuse(enc: EncoderOutputs) -> Tensor:
    return T.concat([enc.v_e, enc.l_e], axis=-2)


def forward_all_layers(bb: Backbone, enc: EncoderOutputs) -> list[Tensor]:
    """Hidden states h_1 .. h_L from h_0 = [v_e; l_e]."""
    h = fuse(enc)
    states: list[Tensor] = []
    for i, lp in enumerate(bb.layers):
        try:
            h = layer_forward(lp, h)
        except T.NonFiniteError as e:
            raise NumericalError(f"non-finite activation in layer {i}: {e}") from e
        states.append(h)
    return states


def mlp_head_forward(head: MLPHead, x: Tensor) -> Tensor:
    h = T.relu(T.add(T.matmul(x, head.w1), head.b1))
    return T.add(T.matmul(h, head.w2), head.b2)


def pooled_head_forward(head: MLPHead, tokens: Tensor) -> Tensor:
    """Mean-pool tokens, then the two-layer perceptron."""
    pooled = tokens.mean(axis=-2)
    flat = T.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1]))
    out = mlp_head_forward(head, flat)
    return T.reshape(out, out.shape[:-2] + (out.shape[-1],))


def native_action_head(bb: Backbone, h_last: Tensor) -> Tensor:
    return pooled_head_forward(bb.head, h_last)


def predict_native(bb: Backbone, v, l) -> Tensor:
    states = forward_all_layers(bb, encode(bb, v, l))
    return native_action_head(bb, states[-1])


# ---------------------------------------------------------------------------
# parameter registry


def _layer_tensors(prefix: str, lp: LayerParams) -> dict[str, Tensor]:
    return {
        f"{prefix}/wq": lp.wq,
        f"{prefix}/wk": lp.wk,
        f"{prefix}/wv": lp.wv,
        f"{prefix}/wo": lp.wo,
        f"{prefix}/bo": lp.bo,
        f"{prefix}/ffn_w1": lp.w1,
        f"{prefix}/ffn_b1": lp.b1,
        f"{prefix}/ffn_w2": lp.w2,
        f"{prefix}/ffn_b2": lp.b2,
        f"{prefix}/ln1_g": lp.ln1_g,
        f"{prefix}/ln1_b": lp.ln1_b,
        f"{prefix}/ln2_g": lp.ln2_g,
        f"{prefix}/ln2_b": lp.ln2_b,
    }


def backbone_tensors(bb: Backbone, prefix: str = "backbone") -> dict[str, Tensor]:
    out = {
        f"{prefix}/enc_v/w": bb.enc_v_w,
        f"{prefix}/enc_v/b": bb.enc_v_b,
        f"{prefix}/enc_l/w": bb.enc_l_w,
        f"{prefix}/enc_l/b": bb.enc_l_b,
    }
    for i, lp in enumerate(bb.layers):
        out.update(_layer_tensors(f"{prefix}/layer{i}", lp))
    out.update(
        {
            f"{prefix}/head/w1": bb.head.w1,
            f"{prefix}/head/b1": bb.head.b1,
            f"{prefix}/head/w2": bb.head.w2,
            f"{prefix}/head/b2": bb.head.b2,
        }
    )
    return out


def backbone_hash(bb: Backbone) -> str:
    return hash_arrays({k: t.data for k, t in backbone_tensors(bb).items()})


# ---------------------------------------------------------------------------
# teacher pretraining


def train_teacher(
    bb: Backbone,
    episodes,
    schedule,
) -> list[tuple[int, float]]:
    """Minimize mean squared action error of the native head over the dataset.

    Returns the (step, loss) curve. The caller freezes the result; nothing
    here persists state. Raises NumericalError with the step index if the
    loss ever goes non-finite.
    """
    from . import optim
    from .world import stack_episodes

    sched = schedule.resolve(len(episodes))
    params = list(backbone_tensors(bb).values())
    state = optim.AdamWState(lr=sched.base_lr, weight_decay=sched.weight_decay)
    rng = np.random.default_rng([sched.seed, 0x7EAC])
    curve: list[tuple[int, float]] = []
    step = 0
    for _ in range(sched.epochs):
        order = rng.permutation(len(episodes))
        for lo in range(0, len(order), sched.batch):
            batch = [episodes[i] for i in order[lo : lo + sched.batch]]
            v, l, a = stack_episodes(batch)
            with T.Tape() as tape:
                pred = predict_native(bb, v, l)
                err = T.sub(pred, Tensor(a))
                loss = T.sumsq(err, axis=-1).mean()
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericalError(f"teacher training diverged at step {step}")
            for p in params:
                p.grad = None
            T.backward(tape, loss)
            grads = [p.grad for p in params]
            optim.clip_grads(grads, sched.clip)
            optim.adamw_step(state, params, grads, lr=optim.lr_at(step, sched))
            curve.append((step, loss_val))
            step += 1
    return curve


def clone_backbone(bb: Backbone) -> Backbone:
    def c(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=True)

    return Backbone(
        cfg=bb.cfg,
        enc_v_w=c(bb.enc_v_w),
        enc_v_b=c(bb.enc_v_b),
        enc_l_w=c(bb.enc_l_w),
        enc_l_b=c(bb.enc_l_b),
        layers=[
            LayerParams(**{f.name: c(getattr(lp, f.name)) for f in lp.__dataclass_fields__.values()})
            for lp in bb.layers
        ],
        head=MLPHead(w1=c(bb.head.w1), b1=c(bb.head.b1), w2=c(bb.head.w2), b2=c(bb.head.b2)),
    )
