"""Stage II: joint optimization of the student replica, router, graph params,
and heads against frozen teacher supervision, plus checkpoint round-trips."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import optim
from . import tensor as T
from .backbone import Backbone, NumericalError, backbone_hash, backbone_tensors, encode, init_backbone
from .checkpoint import IntegrityError, load_container, save_container
from .config import Config, config_hash
from .graph import CapsuleParams
from .losses import LossReport, LossWeights, action_loss, semantic_loss, total_loss
from .optim import TrainSchedule, lr_at
from .probe import CapsuleCache, GraphSettings, TeacherProbe, export_teacher_capsules, probe_hash, probe_tensors
from .student import (
    StudentModel,
    compute_gates,
    init_student,
    predict_action,
    soft_gated_forward,
    student_tensors,
    student_trainables,
)
from .tensor import Tensor
from .world import Episode, stack_episodes


@dataclass
class RunManifest:
    config_hash: str
    dataset_hash: str
    teacher_hash: str
    probe_hash: str
    stage: str
    version: str = "1"

    def as_dict(self) -> dict[str, str]:
        return {
            "run/config_hash": self.config_hash,
            "run/dataset_hash": self.dataset_hash,
            "run/teacher_hash": self.teacher_hash,
            "run/probe_hash": self.probe_hash,
            "run/stage": self.stage,
            "run/version": self.version,
        }


def schedule_from(cfg: Config, epochs_key: str = "train.epochs") -> TrainSchedule:
    return TrainSchedule(
        epochs=cfg[epochs_key],
        batch=cfg["train.batch"],
        base_lr=cfg["train.lr"],
        warmup=cfg["train.warmup"],
        cosine=cfg["train.cosine"],
        clip=cfg["train.clip"],
        seed=cfg["train.seed"],
        weight_decay=cfg["train.wd"],
    )


def teacher_schedule_from(cfg: Config) -> TrainSchedule:
    sched = schedule_from(cfg, "train.teacher_epochs")
    sched.batch = cfg["train.teacher_batch"]
    sched.base_lr = cfg["train.teacher_lr"]
    return sched


def loss_weights_from(cfg: Config) -> LossWeights:
    return LossWeights(
        alpha=cfg["loss.alpha"],
        beta=cfg["loss.beta"],
        eta=cfg["loss.eta"],
        gamma=cfg["loss.gamma"],
        kappa=cfg["loss.kappa"],
    )


@dataclass
class Stage2Options:
    """Desk-scale training controls around the core distillation objective.

    The router learns at lr * router_lr_mult (no weight decay: decay would
    drag every bias toward gate 0.5). A routed_frac share of steps runs the
    forward with threshold-binarized gates, which is exactly the inference
    function; the rest use the continuous gates that carry the router's
    gradient. final_weight aligns the final head with the gated stream and
    exec_cost puts a price on the mean gate so the executed set stays
    compact instead of saturating.
    """

    tau: float = 0.5
    router_lr_mult: float = 6.0
    routed_frac: float = 0.6
    final_weight: float = 2.0
    exec_cost: float = 0.25


def stage2_options_from(cfg: Config) -> Stage2Options:
    return Stage2Options(
        tau=cfg["router.tau"],
        router_lr_mult=cfg["router.lr_mult"],
        routed_frac=cfg["router.routed_frac"],
        final_weight=cfg["loss.final"],
        exec_cost=cfg["loss.exec_cost"],
    )


@dataclass
class Stage2State:
    main: optim.AdamWState
    router: optim.AdamWState
    main_params: list[Tensor]
    router_params: list[Tensor]


def init_stage2_state(student: StudentModel, sched: TrainSchedule) -> Stage2State:
    params = student_trainables(student)
    router_ids = {id(t) for t in student.router.w} | {id(t) for t in student.router.b}
    return Stage2State(
        main=optim.AdamWState(lr=sched.base_lr, weight_decay=sched.weight_decay),
        router=optim.AdamWState(lr=sched.base_lr, weight_decay=0.0),
        main_params=[p for p in params if id(p) not in router_ids],
        router_params=[p for p in params if id(p) in router_ids],
    )


def stage2_step(
    student: StudentModel,
    batch: list[Episode],
    cache_s: np.ndarray,  # [B, L, d_c] teacher capsules for this batch
    cache_a: np.ndarray,  # [B, L, 7] teacher per-layer predictions
    weights: LossWeights,
    gs: GraphSettings,
    state: Stage2State,
    lr: float,
    clip: float,
    rng: np.random.Generator,
    opts: Stage2Options,
    binarize: bool = False,
    batch_id: int = 0,
) -> LossReport:
    """One optimizer step on the student's trainable set.

    The teacher enters only through the cached arrays, so no gradient can
    reach it. A non-finite loss aborts before any parameter is touched.
    """
    v, l, a = stack_episodes(batch)
    with T.Tape() as tape:
        enc = encode(student.backbone, v, l)
        gates = compute_gates(student, enc)
        if binarize:
            run_gates = Tensor((gates.data >= opts.tau).astype(np.float64))
        else:
            run_gates = gates
        z_last, capsules, preds = soft_gated_forward(
            student, enc, run_gates, gs, train_mode=True, rng=rng
        )
        sem_terms = [
            semantic_loss(s, cache_s[:, i], weights.eta) for i, s in enumerate(capsules)
        ]
        act_terms = [
            action_loss(pred, a, cache_a[:, i], preds[i - 1] if i > 0 else None, i + 1)
            for i, pred in enumerate(preds)
        ]
        loss, report = total_loss(sem_terms, act_terms, gates, weights)
        if opts.final_weight > 0.0:
            final_err = T.sub(predict_action(student, z_last), Tensor(a))
            loss = T.add(loss, T.scale(T.sumsq(final_err, axis=-1).mean(), opts.final_weight))
        if opts.exec_cost > 0.0:
            loss = T.add(loss, T.scale(gates.mean(), opts.exec_cost))
    if not math.isfinite(loss.item()):
        raise NumericalError(f"stage2 loss non-finite in batch {batch_id}")
    for p in state.main_params + state.router_params:
        p.grad = None
    T.backward(tape, loss)
    g_main = [p.grad if p.grad is not None else np.zeros(p.shape) for p in state.main_params]
    g_router = [p.grad if p.grad is not None else np.zeros(p.shape) for p in state.router_params]
    report.grad_norm = optim.clip_grads(g_main + g_router, clip)
    optim.adamw_step(state.main, state.main_params, g_main, lr=lr)
    optim.adamw_step(state.router, state.router_params, g_router, lr=lr * opts.router_lr_mult)
    return report


def stage2_train(
    student: StudentModel,
    teacher: Backbone,
    probe: TeacherProbe,
    episodes: list[Episode],
    cache: CapsuleCache,
    weights: LossWeights,
    gs: GraphSettings,
    schedule: TrainSchedule,
    opts: Stage2Options | None = None,
) -> list[tuple[int, int, float, float, float, float, float]]:
    """Full stage-2 run; returns (step, layer, sem, act, lambda, lb, total) rows.

    Teacher and probe hashes are checked after every epoch. Batches whose
    loss goes non-finite are rolled back (the step is skipped) and the run
    continues.
    """
    opts = opts or Stage2Options()
    t_hash, p_hash = backbone_hash(teacher), probe_hash(probe)
    if cache.manifest.get("teacher_hash") not in ("", None, t_hash):
        raise IntegrityError("capsule cache was built from a different teacher")
    if cache.manifest.get("probe_hash") not in ("", None, p_hash):
        raise IntegrityError("capsule cache was built from a different probe")
    sched = schedule.resolve(len(episodes))
    state = init_stage2_state(student, sched)
    rng = np.random.default_rng([sched.seed, 0x57A2])
    rows = []
    step = 0
    for _ in range(sched.epochs):
        order = rng.permutation(len(episodes))
        for lo in range(0, len(order), sched.batch):
            take = order[lo : lo + sched.batch]
            batch = [episodes[i] for i in take]
            binarize = rng.random() < opts.routed_frac
            try:
                report = stage2_step(
                    student,
                    batch,
                    cache.s[take],
                    cache.a[take],
                    weights,
                    gs,
                    state,
                    lr=lr_at(step, sched),
                    clip=sched.clip,
                    rng=rng,
                    opts=opts,
                    binarize=binarize,
                    batch_id=step,
                )
            except NumericalError:
                step += 1
                continue
            for layer in range(len(report.sem)):
                rows.append(
                    (
                        step,
                        layer,
                        report.sem[layer],
                        report.act[layer],
                        report.lambdas[layer],
                        report.lb,
                        report.total,
                    )
                )
            step += 1
        if backbone_hash(teacher) != t_hash or probe_hash(probe) != p_hash:
            raise IntegrityError("frozen teacher or probe changed during stage 2")
    return rows


# ---------------------------------------------------------------------------
# checkpoint round-trips


def _tensor_payload(named: dict[str, object]) -> dict[str, np.ndarray]:
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in named.items()}


def save_model(path, named: dict[str, object], manifest: dict[str, str]) -> None:
    save_container(path, manifest, _tensor_payload(named))


def _restore(named: dict[str, object], stored: dict[str, np.ndarray], what: str) -> None:
    for name, slot in named.items():
        if name not in stored:
            raise T.ShapeError(f"{what}: missing tensor {name!r} in checkpoint")
        arr = stored[name]
        target = slot.data if isinstance(slot, Tensor) else slot
        if arr.shape != target.shape:
            raise T.ShapeError(
                f"{what}: tensor {name!r} has shape {arr.shape}, expected {target.shape}"
            )
        target[...] = arr


def save_teacher(path, teacher: Backbone, manifest: dict[str, str]) -> None:
    save_model(path, backbone_tensors(teacher), {"kind": "teacher", **manifest})


def load_teacher(path, cfg: Config) -> tuple[Backbone, dict[str, str]]:
    from .backbone import backbone_config_from

    manifest, stored = load_container(path)
    if manifest.get("kind") != "teacher":
        raise IntegrityError(f"{path} is not a teacher checkpoint")
    teacher = init_backbone(backbone_config_from(cfg))
    _restore(backbone_tensors(teacher), stored, "load_teacher")
    return teacher, manifest


def save_probe(path, probe: TeacherProbe, manifest: dict[str, str]) -> None:
    save_model(path, probe_tensors(probe), {"kind": "probe", **manifest})


def load_probe(path, cfg: Config) -> tuple[TeacherProbe, dict[str, str]]:
    from .probe import init_probe

    manifest, stored = load_container(path)
    if manifest.get("kind") != "probe":
        raise IntegrityError(f"{path} is not a probe checkpoint")
    probe = init_probe(
        cfg["backbone.layers"],
        cfg["backbone.width"],
        cfg["graph.affinity_dim"],
        cfg["backbone.capsule_dim"],
        seed=cfg["train.seed"],
    )
    _restore(probe_tensors(probe), stored, "load_probe")
    for p in probe.capsules:
        p.calibrated = True  # stored stats are the frozen calibration
    return probe, manifest


def save_student(path, student: StudentModel, manifest: dict[str, str]) -> None:
    save_model(path, student_tensors(student), {"kind": "student", **manifest})


def load_student(path, cfg: Config, teacher: Backbone, probe: TeacherProbe) -> tuple[StudentModel, dict[str, str]]:
    manifest, stored = load_container(path)
    if manifest.get("kind") != "student":
        raise IntegrityError(f"{path} is not a student checkpoint")
    student = init_student(teacher, probe, cfg["router.bias_init"])
    _restore(student_tensors(student), stored, "load_student")
    for p in student.capsules:
        p.calibrated = True
    return student, manifest


def save_capsule_cache(path, cache: CapsuleCache) -> None:
    save_container(path, cache.manifest, {"capsules/s": cache.s, "capsules/a": cache.a})


def load_capsule_cache(path, expect_teacher: str | None = None, expect_probe: str | None = None) -> CapsuleCache:
    manifest, tensors = load_container(path)
    if manifest.get("kind") != "capsule_cache":
        raise IntegrityError(f"{path} is not a capsule cache")
    if expect_teacher is not None and manifest.get("teacher_hash") != expect_teacher:
        raise IntegrityError("capsule cache teacher hash mismatch")
    if expect_probe is not None and manifest.get("probe_hash") != expect_probe:
        raise IntegrityError("capsule cache probe hash mismatch")
    return CapsuleCache(s=tensors["capsules/s"], a=tensors["capsules/a"], manifest=manifest)
