"""Analytic FLOPs model, routed evaluation, and the sweep experiments.

Counting convention: one multiply-accumulate is two FLOPs. Attention
costs 4*N*d^2 + 2*N^2*d MACs per layer (projections plus score/mix),
the feed-forward 2*N*d*d_ff. Encoders, the action head, and the router
are input-independent fixed costs paid once per episode, so a full
execution mask gives a ratio of exactly 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig
from .student import StudentModel, routed_predict
from .world import Episode, is_success


@dataclass(frozen=True)
class FlopsModel:
    per_layer: int
    fixed: int
    n_layers: int

    @property
    def dense_total(self) -> int:
        return self.fixed + self.n_layers * self.per_layer


def build_flops_model(cfg: BackboneConfig, n_visual_tokens: int) -> FlopsModel:
    n = n_visual_tokens + 1  # instruction token joins the trunk
    d = cfg.width
    attn_macs = 4 * n * d * d + 2 * n * n * d
    ffn_macs = 2 * n * d * cfg.d_ff
    enc_macs = n_visual_tokens * cfg.d_in * d + cfg.d_l * d
    head_macs = d * cfg.head_hidden + cfg.head_hidden * 7
    router_macs = cfg.layers * 2 * d
    return FlopsModel(
        per_layer=2 * (attn_macs + ffn_macs),
        fixed=2 * (enc_macs + head_macs + router_macs),
        n_layers=cfg.layers,
    )


def count_flops(fm: FlopsModel, executed_mask) -> tuple[int, int, float]:
    """(routed FLOPs, dense FLOPs, ratio) for one execution mask."""
    mask = np.asarray(executed_mask, dtype=bool)
    if mask.shape != (fm.n_layers,):
        raise ValueError(f"count_flops: mask length {mask.shape} != layers {fm.n_layers}")
    routed = fm.fixed + int(mask.sum()) * fm.per_layer
    dense = fm.dense_total
    return routed, dense, routed / dense


@dataclass
class EvalReport:
    tau: float
    success_rate: float
    action_mse: float
    mean_executed: float
    flops_ratio: float
    wallclock_per_episode: float


def evaluate(
    student: StudentModel,
    episodes: list[Episode],
    tau: float,
    fm: FlopsModel,
) -> tuple[EvalReport, list[tuple[int, int, float, int]]]:
    """Routed inference over a dataset.

    Returns the aggregate report plus per-episode gate rows
    (episode, layer, g, executed).
    """
    successes = 0
    mse_sum = 0.0
    executed_sum = 0
    routed_sum = 0
    gate_rows: list[tuple[int, int, float, int]] = []
    t0 = time.perf_counter()
    for i, ep in enumerate(episodes):
        pred, trace = routed_predict(student, ep.visual, ep.instruction, tau)
        successes += is_success(pred, ep.action)
        mse_sum += float(((pred - ep.action) ** 2).sum())
        executed_sum += trace.executed
        routed_sum += count_flops(fm, trace.mask)[0]
        for layer in range(fm.n_layers):
            gate_rows.append((i, layer, float(trace.gates[layer]), int(trace.mask[layer])))
    elapsed = time.perf_counter() - t0
    n = len(episodes)
    report = EvalReport(
        tau=tau,
        success_rate=successes / n,
        action_mse=mse_sum / n,
        mean_executed=executed_sum / n,
        flops_ratio=routed_sum / (n * fm.dense_total),
        wallclock_per_episode=elapsed / n,
    )
    return report, gate_rows


def sweep_tau(
    student: StudentModel,
    episodes: list[Episode],
    taus: list[float],
    fm: FlopsModel,
) -> list[tuple[float, float, float, float]]:
    """(tau, success, flops_ratio, speedup) rows; speedup = dense / routed."""
    rows = []
    for tau in taus:
        if not 0.0 < tau < 1.0:
            raise ValueError(f"sweep_tau: tau {tau} outside (0, 1)")
        report, _ = evaluate(student, episodes, tau, fm)
        rows.append((tau, report.success_rate, report.flops_ratio, 1.0 / report.flops_ratio))
    return rows


def _forced_skip_predict(student: StudentModel, ep: Episode, n_skip: int, fm: FlopsModel):
    from .backbone import encode, fuse, layer_forward
    from .student import gate_vector, predict_action

    enc = encode(student.backbone, ep.visual, ep.instruction)
    gv = gate_vector(student, enc, tau=0.5)
    # Skip the n lowest-gated layers for this input; ties skip the lower index.
    order = np.argsort(gv.g, kind="stable")
    mask = np.ones(fm.n_layers, dtype=bool)
    mask[order[:n_skip]] = False
    z = fuse(enc)
    for l, lp in enumerate(student.backbone.layers):
        if mask[l]:
            z = layer_forward(lp, z)
    return predict_action(student, z).data, mask


def sweep_skip_n(
    student: StudentModel,
    episodes: list[Episode],
    skip_counts: list[int],
    fm: FlopsModel,
) -> list[tuple[int, float, float]]:
    """Force-skip the n lowest-gate layers per input; (n, success, flops_ratio) rows."""
    rows = []
    for n_skip in skip_counts:
        if not 0 <= n_skip < fm.n_layers:
            raise ValueError(f"sweep_skip_n: n {n_skip} outside [0, {fm.n_layers})")
        successes = 0
        routed_sum = 0
        for ep in episodes:
            pred, mask = _forced_skip_predict(student, ep, n_skip, fm)
            successes += is_success(pred, ep.action)
            routed_sum += count_flops(fm, mask)[0]
        rows.append(
            (
                n_skip,
                successes / len(episodes),
                routed_sum / (len(episodes) * fm.dense_total),
            )
        )
    return rows


def activation_histogram(
    student: StudentModel,
    episodes: list[Episode],
    tau: float,
) -> list[tuple[int, float]]:
    """Per-layer fraction of episodes whose gate clears the threshold."""
    from .backbone import encode
    from .student import gate_vector

    counts = np.zeros(len(student.backbone.layers))
    for ep in episodes:
        enc = encode(student.backbone, ep.visual, ep.instruction)
        counts += gate_vector(student, enc, tau).mask
    freqs = counts / len(episodes)
    return [(layer, float(freq)) for layer, freq in enumerate(freqs)]
