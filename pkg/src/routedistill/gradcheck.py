"""Registered finite-difference checks for every loss and the capsule pipeline.

Each check draws deterministic small random instances, runs the taped
backward pass, and compares against the central-difference oracle with a
norm-relative tolerance of 1e-5. Instances are rejected (and resampled
deterministically) when they sit too close to a non-smooth boundary: a
top-k affinity tie or a ReLU kink, both of which the probe step must not
cross. At eps = 1e-5 the difference-quotient roundoff stays around 1e-9
per coordinate, far below tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, encode, init_backbone, init_mlp_head
from .graph import build_affinity, encapsulate, init_capsule_params, topk_normalize
from .losses import LossWeights, action_loss, load_balance, semantic_loss, total_loss
from .probe import GraphSettings, aux_head_forward, init_probe
from .student import compute_gates, init_student, soft_gated_forward
from .tensor import Tensor

TOLERANCE = 1e-5
FD_EPS = 1e-5
RELU_MARGIN = 1e-3
TIE_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _check_param(
    f: Callable[[], Tensor],
    param: Tensor,
    f_fd: Callable[[], Tensor] | None = None,
) -> float:
    """Rel err between taped and finite-difference gradients of f wrt param.

    Objectives containing stop-gradient need a separate probe function
    f_fd that holds the detached values frozen at the base point; the
    naive difference quotient of f would otherwise measure the paths the
    stop-gradient deliberately blocks.
    """
    param.grad = None
    with T.Tape() as tape:
        loss = f()
    T.backward(tape, loss)
    analytic = param.grad if param.grad is not None else np.zeros(param.shape)
    probe = f_fd if f_fd is not None else f
    fd = T.finite_diff_grad(lambda _: probe().item(), param, eps=FD_EPS)
    return T.rel_err(analytic, fd.data)


def _smooth_enough(forward: Callable[[], Tensor]) -> bool:
    with T.relu_margin_probe() as margins:
        forward()
    return not margins or min(margins) > RELU_MARGIN


def _coupling(f: Callable[[], Tensor], param: Tensor) -> float:
    """Analytic gradient norm of f wrt param; a-priori conditioning filter.

    Central differences cannot certify couplings much below their own
    roundoff, so samplers reject targets whose true gradient is tiny
    (e.g. a pooling weight when all message rows are parallel).
    """
    param.grad = None
    with T.Tape() as tape:
        loss = f()
    T.backward(tape, loss)
    return float(np.linalg.norm(param.grad)) if param.grad is not None else 0.0


def _tie_gap_ok(h: Tensor, params, k: int) -> bool:
    aff = build_affinity(h, params.phi, params.psi).data
    if k >= aff.shape[-1]:
        return True
    ranked = np.sort(aff, axis=-1)[..., ::-1]
    gap = float((ranked[..., k - 1] - ranked[..., k]).min())
    return gap > TIE_MARGIN * max(float(ranked[..., 0].max()), 1.0)


def _capsule_instance(seed: int, batch: int = 1):
    """Random (h, params, k) away from top-k ties and ReLU kinks.

    k starts at 2: with k = 1 the single kept weight is v / (v + 1e-12),
    constant up to the epsilon, so the affinity gradient sits below what
    central differences can resolve.
    """
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        n = int(rng.integers(3, 7))
        d = int(rng.integers(4, 9))
        d_a = int(rng.integers(2, 5))
        d_c = int(rng.integers(2, 6))
        k = int(rng.integers(2, n + 1))
        shape = (batch, n, d) if batch > 1 else (n, d)
        h = Tensor(0.7 * rng.standard_normal(shape))
        params = init_capsule_params(rng, d, d_a, d_c)
        if not _tie_gap_ok(h, params, k):
            continue
        if not _smooth_enough(lambda: encapsulate(h, params, k)[1]):
            continue
        _, s = encapsulate(h, params, k)
        if float(np.abs(np.linalg.norm(s.data, axis=-1)).min()) < 1e-2:
            continue  # near-zero capsule: cosine losses degenerate
        return h, params, k
    raise RuntimeError(f"could not build a well-conditioned capsule instance for seed {seed}")


def check_capsule_pipeline(n_instances: int, seed: int = 0) -> CheckResult:
    """Gradients of ||capsule||^2 through affinity, top-k, passing, pooling."""
    worst = 0.0
    for i in range(n_instances):
        h, params, k = _capsule_instance(seed * 1000 + i)
        target = [params.phi, params.psi, params.w1, params.w2, params.wp, params.proj][i % 6]

        def f():
            _, s = encapsulate(h, params, k)
            return T.sumsq(s)

        worst = max(worst, _check_param(f, target))
    return CheckResult("capsule_pipeline", n_instances, worst)


def check_aux_loss(n_instances: int, seed: int = 1) -> CheckResult:
    """Per-layer auxiliary action loss wrt pooling and head weights."""
    worst = 0.0
    for i in range(n_instances):
        for attempt in range(64):
            h, params, k = _capsule_instance(seed * 1000 + i + 7919 * attempt)
            rng = np.random.default_rng([seed, i, attempt, 7])
            d_c = params.proj.shape[-1]
            head = init_mlp_head(rng, d_c, d_c, 7)
            a = Tensor(rng.standard_normal(7))
            target = [params.wp, head.w1, head.w2][i % 3]

            def f():
                _, s = encapsulate(h, params, k)
                pred = aux_head_forward(head, s)
                return T.sumsq(T.sub(pred, a))

            if _smooth_enough(f) and _coupling(f, target) > 1e-3:
                break
        worst = max(worst, _check_param(f, target))
    return CheckResult("aux_loss", n_instances, worst)


def check_semantic_loss(n_instances: int, seed: int = 2) -> CheckResult:
    """Semantic loss wrt the projections feeding the student capsule."""
    worst = 0.0
    for i in range(n_instances):
        for attempt in range(64):
            rng = np.random.default_rng([seed, i, attempt, 11])
            batch = int(rng.integers(1, 4))
            h, params, k = _capsule_instance(seed * 1000 + i + 7919 * attempt, batch=batch)
            d_c = params.proj.shape[-1]
            s_tea = rng.standard_normal((batch, d_c))
            target = [params.phi, params.proj, params.wp][i % 3]

            def f():
                _, s = encapsulate(h, params, k)
                s_stu = T.reshape(s, (batch, d_c))
                return semantic_loss(s_stu, s_tea, eta=0.5)

            if _coupling(f, target) > 1e-3:
                break
        worst = max(worst, _check_param(f, target))
    return CheckResult("semantic_loss", n_instances, worst)


def check_action_loss(n_instances: int, seed: int = 3) -> CheckResult:
    """Triple-MSE wrt the current layer's head; stop-grad keeps prev detached."""
    worst = 0.0
    for i in range(n_instances):
        head = prev_head = s = a = a_tea = None
        for attempt in range(64):
            rng = np.random.default_rng([seed, i, attempt])
            d_c = int(rng.integers(3, 7))
            batch = int(rng.integers(1, 4))
            head = init_mlp_head(rng, d_c, d_c, 7)
            prev_head = init_mlp_head(rng, d_c, d_c, 7)
            s = Tensor(rng.standard_normal((batch, d_c)))
            a = rng.standard_normal((batch, 7))
            a_tea = rng.standard_normal((batch, 7))
            if _smooth_enough(lambda: aux_head_forward(head, s)):
                break

        def f():
            pred = aux_head_forward(head, s)
            prev = aux_head_forward(prev_head, s)
            return action_loss(pred, a, a_tea, prev, layer_index=2)

        target = [head.w1, head.w2, head.b1][i % 3]
        worst = max(worst, _check_param(f, target))
    return CheckResult("action_loss", n_instances, worst)


def _student_instance(seed: int):
    """Small two-layer student away from every kink, complete-graph capsules.

    k = N keeps the adjacency normalization smooth; top-k selection
    gradients are covered by the capsule checks.
    """
    cfg = BackboneConfig(
        layers=2, width=8, n_heads=2, d_in=11, d_l=17,
        capsule_dim=4, ff_mult=2, head_hidden=6, seed=seed,
    )
    gs = GraphSettings(k=5, affinity_dim=3, dropout=0.0, encoder="gat")
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt, 21])
        teacher = init_backbone(
            BackboneConfig(**{**cfg.__dict__, "seed": seed + 131 * attempt})
        )
        probe = init_probe(cfg.layers, cfg.width, 3, cfg.capsule_dim, seed=seed + attempt)
        student = init_student(teacher, probe, bias_init=-0.5)
        for w in student.router.w:
            w.data[:] = 0.3 * rng.standard_normal(w.shape)
        v = 0.7 * rng.standard_normal((4, cfg.d_in))
        l = 0.7 * rng.standard_normal(cfg.d_l)
        a = rng.standard_normal((1, 7))
        s_tea = rng.standard_normal((1, cfg.capsule_dim))
        a_tea = rng.standard_normal((1, 7))

        def forward():
            enc = encode(student.backbone, v, l)
            gates = compute_gates(student, enc)
            _, capsules, preds = soft_gated_forward(student, enc, gates, gs)
            return preds[-1]

        if not _smooth_enough(forward):
            continue
        enc = encode(student.backbone, v, l)
        gates = compute_gates(student, enc)
        _, capsules, _ = soft_gated_forward(student, enc, gates, gs)
        if min(float(np.linalg.norm(s.data)) for s in capsules) < 1e-2:
            continue
        return student, v, l, a, gs, s_tea, a_tea
    raise RuntimeError(f"could not build a well-conditioned student instance for seed {seed}")


def check_load_balance(n_instances: int, seed: int = 4) -> CheckResult:
    """Gate variance penalty wrt router weights and biases."""
    worst = 0.0
    for i in range(n_instances):
        student, v, l, _, _, _, _ = _student_instance(seed * 1000 + i)

        def f():
            enc = encode(student.backbone, v, l)
            return load_balance(compute_gates(student, enc))

        target = student.router.w[i % 2] if i % 3 else student.router.b[i % 2]
        worst = max(worst, _check_param(f, target))
    return CheckResult("load_balance", n_instances, worst)


def check_total_loss(n_instances: int, seed: int = 5) -> CheckResult:
    """Full objective wrt router, backbone, graph, and head parameters.

    The finite-difference probe freezes the previous-layer predictions at
    the base point: the stop-gradient in the action loss defines the
    gradient as "previous prediction held constant", and the naive
    quotient of the live objective would measure the blocked path too.
    """
    worst = 0.0
    weights = LossWeights(alpha=1.0, beta=1.0, eta=0.5, gamma=0.05, kappa=2.0)
    for i in range(n_instances):
        student, v, l, a, gs, s_tea, a_tea = _student_instance(seed * 1000 + i)

        def run(frozen_prev: list[np.ndarray] | None):
            enc = encode(student.backbone, v, l)
            gates = compute_gates(student, enc)
            _, capsules, preds = soft_gated_forward(student, enc, gates, gs)
            sem = [
                semantic_loss(T.reshape(s, (1, s.shape[-1])), s_tea, weights.eta)
                for s in capsules
            ]
            act = []
            for j, p in enumerate(preds):
                if j == 0:
                    prev = None
                elif frozen_prev is not None:
                    prev = Tensor(frozen_prev[j - 1].reshape(1, 7))
                else:
                    prev = T.reshape(preds[j - 1], (1, 7))
                act.append(action_loss(T.reshape(p, (1, 7)), a, a_tea, prev, j + 1))
            gates_row = T.reshape(gates, (1, gates.shape[-1]))
            loss, _ = total_loss(sem, act, gates_row, weights)
            return loss, preds

        def f():
            return run(None)[0]

        _, base_preds = run(None)
        snapshot = [p.data.copy() for p in base_preds]

        def f_fd():
            return run(snapshot)[0]

        pool = [
            student.router.w[0],
            student.router.b[1],
            student.backbone.layers[0].wq,
            student.backbone.layers[1].w1,
            student.capsules[0].phi,
            student.capsules[1].wp,
            student.heads[0].w1,
            student.backbone.enc_v_w,
        ]
        worst = max(worst, _check_param(f, pool[i % len(pool)], f_fd=f_fd))
    return CheckResult("total_loss", n_instances, worst)


def check_primitives(n_instances: int, seed: int = 6) -> CheckResult:
    """Randomized composite of the primitive set on shapes up to 16 x 16."""
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(2, 17))
        m = int(rng.integers(2, 17))
        p = int(rng.integers(2, 9))
        x = Tensor(rng.standard_normal((n, m)) * 0.8, requires_grad=True)
        w = Tensor(rng.standard_normal((m, p)) * 0.8, requires_grad=True)
        b = Tensor(rng.standard_normal(p) * 0.5, requires_grad=True)

        def f():
            z = T.add(T.matmul(x, w), b)
            z = T.softmax(T.relu(z))
            z = T.l1_normalize(T.exp(T.scale(z, 0.5)))
            s = T.sigmoid(z.mean(axis=-1))
            return T.add(T.sumsq(s), T.sumsq(z).mean())

        if not _smooth_enough(f):
            continue
        target = [x, w, b][i % 3]
        worst = max(worst, _check_param(f, target))
    return CheckResult("primitives", n_instances, worst)


ALL_CHECKS: dict[str, Callable[[int], CheckResult]] = {
    "primitives": check_primitives,
    "capsule_pipeline": check_capsule_pipeline,
    "aux_loss": check_aux_loss,
    "semantic_loss": check_semantic_loss,
    "action_loss": check_action_loss,
    "load_balance": check_load_balance,
    "total_loss": check_total_loss,
}


def run_all(n_instances: int = 50) -> list[CheckResult]:
    return [fn(n_instances) for fn in ALL_CHECKS.values()]
