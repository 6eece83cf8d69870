"""Command-line pipeline: data generation, three training stages, evaluation,
sweeps, and the gradient-check suite.

Every subcommand reads its inputs from --out (or explicit paths.* keys),
writes CSV artifacts plus companion PNG figures there, and is byte-
reproducible in its CSVs for a fixed seed. Exit codes: 0 success,
2 config error, 3 integrity error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .backbone import NumericalError, backbone_config_from, init_backbone, train_teacher
from .checkpoint import IntegrityError, hash_file
from .config import Config, ConfigError, apply_overrides, config_hash, default_config, load_config_file
from .flops import activation_histogram, build_flops_model, evaluate, sweep_skip_n, sweep_tau
from .gradcheck import run_all
from .optim import TrainSchedule
from .probe import calibrate_probe, export_teacher_capsules, graph_settings_from, init_probe, probe_hash, stage1_train
from .student import init_student, student_hash
from .trainer import (
    RunManifest,
    load_capsule_cache,
    load_probe,
    load_student,
    load_teacher,
    loss_weights_from,
    save_capsule_cache,
    save_probe,
    save_student,
    save_teacher,
    schedule_from,
    stage2_options_from,
    stage2_train,
    teacher_schedule_from,
)
from .world import load_dataset, make_dataset, save_dataset, world_config_from

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_NUMERICAL = 4


def _resolve(cfg: Config, key: str, out: Path, default_name: str) -> Path:
    explicit = cfg[key]
    return Path(explicit) if explicit else out / default_name


def _load_inputs(cfg: Config, out: Path, *names: str) -> dict[str, object]:
    """Load the pipeline artifacts a subcommand depends on."""
    result: dict[str, object] = {}
    if "train_data" in names:
        result["train_data"] = load_dataset(_resolve(cfg, "paths.train_data", out, "train.ds"))
    if "test_data" in names:
        result["test_data"] = load_dataset(_resolve(cfg, "paths.test_data", out, "test.ds"))
    if "teacher" in names:
        result["teacher"], _ = load_teacher(_resolve(cfg, "paths.teacher", out, "teacher.ckpt"), cfg)
    if "probe" in names:
        result["probe"], _ = load_probe(_resolve(cfg, "paths.probe", out, "probe.ckpt"), cfg)
    if "student" in names:
        result["student"], _ = load_student(
            _resolve(cfg, "paths.student", out, "student.ckpt"), cfg,
            result["teacher"], result["probe"],
        )
    return result


def cmd_gen_data(cfg: Config, out: Path) -> int:
    wc = world_config_from(cfg)
    train = make_dataset(wc, cfg["world.n_train"], start_index=0)
    test = make_dataset(wc, cfg["world.n_test"], start_index=cfg["world.n_train"])
    train_hash = save_dataset(out / "train.ds", train)
    test_hash = save_dataset(out / "test.ds", test)
    report.write_csv(
        out / "dataset.csv",
        ["split", "n_episodes", "content_hash"],
        [("train", cfg["world.n_train"], train_hash), ("test", cfg["world.n_test"], test_hash)],
    )
    print(f"train {train_hash}  test {test_hash}")
    return EXIT_OK


def cmd_train_teacher(cfg: Config, out: Path) -> int:
    data = _load_inputs(cfg, out, "train_data")["train_data"]
    teacher = init_backbone(backbone_config_from(cfg))
    sched = teacher_schedule_from(cfg)
    curve = train_teacher(teacher, data.episodes, sched)
    manifest = RunManifest(
        config_hash=config_hash(cfg),
        dataset_hash=data.manifest.get("world_hash", ""),
        teacher_hash="",
        probe_hash="",
        stage="teacher",
    )
    save_teacher(out / "teacher.ckpt", teacher, manifest.as_dict())
    report.write_csv(out / "teacher_loss.csv", ["step", "loss"], curve)
    report.loss_curve_plot(out / "teacher_loss.png", curve, label="action mse")
    if curve:
        print(f"teacher final loss {curve[-1][1]:.6g}")
    return EXIT_OK


def cmd_stage1(cfg: Config, out: Path) -> int:
    loaded = _load_inputs(cfg, out, "train_data", "teacher")
    data, teacher = loaded["train_data"], loaded["teacher"]
    gs = graph_settings_from(cfg)
    probe = init_probe(
        cfg["backbone.layers"],
        cfg["backbone.width"],
        cfg["graph.affinity_dim"],
        cfg["backbone.capsule_dim"],
        seed=cfg["train.seed"],
    )
    calibrate_probe(probe, teacher, data.episodes, gs)
    sched = schedule_from(cfg, "train.stage1_epochs")
    rows = stage1_train(teacher, probe, data.episodes, gs, sched)
    manifest = RunManifest(
        config_hash=config_hash(cfg),
        dataset_hash=data.manifest.get("world_hash", ""),
        teacher_hash="",
        probe_hash="",
        stage="stage1",
    )
    save_probe(out / "probe.ckpt", probe, manifest.as_dict())
    report.write_csv(out / "stage1_loss.csv", ["step", "layer", "aux_mse"], rows)
    report.per_layer_curve_plot(out / "stage1_loss.png", rows, ylabel="aux mse")
    cache = export_teacher_capsules(probe, teacher, data.episodes, gs)
    save_capsule_cache(_resolve(cfg, "paths.capsules", out, "capsules.ckpt"), cache)
    return EXIT_OK


def cmd_stage2(cfg: Config, out: Path) -> int:
    loaded = _load_inputs(cfg, out, "train_data", "teacher", "probe")
    data, teacher, probe = loaded["train_data"], loaded["teacher"], loaded["probe"]
    gs = graph_settings_from(cfg)
    cache_path = _resolve(cfg, "paths.capsules", out, "capsules.ckpt")
    if cache_path.exists():
        cache = load_capsule_cache(cache_path, expect_probe=probe_hash(probe))
    else:
        cache = export_teacher_capsules(probe, teacher, data.episodes, gs)
    student = init_student(teacher, probe, cfg["router.bias_init"])
    sched = schedule_from(cfg, "train.epochs")
    rows = stage2_train(
        student, teacher, probe, data.episodes, cache,
        loss_weights_from(cfg), gs, sched, opts=stage2_options_from(cfg),
    )
    manifest = RunManifest(
        config_hash=config_hash(cfg),
        dataset_hash=data.manifest.get("world_hash", ""),
        teacher_hash="",
        probe_hash=probe_hash(probe),
        stage="stage2",
    )
    save_student(out / "student.ckpt", student, manifest.as_dict())
    report.write_csv(
        out / "stage2_loss.csv",
        ["step", "layer", "sem", "act", "lambda", "lb", "total"],
        rows,
    )
    if rows:
        steps = sorted({r[0] for r in rows})
        totals = {r[0]: r[6] for r in rows}
        report.loss_curve_plot(
            out / "stage2_loss.png", [(s, totals[s]) for s in steps], label="total loss"
        )
        print(f"stage2 final total loss {rows[-1][6]:.6g}  student {student_hash(student)[:12]}")
    return EXIT_OK


def cmd_eval(cfg: Config, out: Path) -> int:
    loaded = _load_inputs(cfg, out, "test_data", "teacher", "probe", "student")
    data, student = loaded["test_data"], loaded["student"]
    fm = build_flops_model(backbone_config_from(cfg), cfg["world.n_tokens"])
    tau = cfg["router.tau"]
    rep, gate_rows = evaluate(student, data.episodes, tau, fm)
    report.write_csv(
        out / "eval.csv",
        ["tau", "success_rate", "action_mse", "mean_executed_layers", "flops_ratio"],
        [(rep.tau, rep.success_rate, rep.action_mse, rep.mean_executed, rep.flops_ratio)],
    )
    report.write_csv(out / "gates.csv", ["episode", "layer", "g", "executed"], gate_rows)
    # Wall-clock is informational and run-dependent; it stays out of the CSVs
    # so fixed-seed reruns are byte-identical.
    (out / "eval_timing.txt").write_text(
        f"wallclock_per_episode_s {rep.wallclock_per_episode:.6g}\n", encoding="utf-8"
    )
    report.gate_heatmap(out / "gates.png", gate_rows, fm.n_layers, len(data.episodes))
    print(
        f"tau={tau} success={rep.success_rate:.4f} mse={rep.action_mse:.6g} "
        f"flops_ratio={rep.flops_ratio:.4f} mean_layers={rep.mean_executed:.2f}"
    )
    return EXIT_OK


def cmd_sweep_tau(cfg: Config, out: Path, taus: list[float]) -> int:
    loaded = _load_inputs(cfg, out, "test_data", "teacher", "probe", "student")
    data, student = loaded["test_data"], loaded["student"]
    fm = build_flops_model(backbone_config_from(cfg), cfg["world.n_tokens"])
    rows = sweep_tau(student, data.episodes, taus, fm)
    report.write_csv(out / "sweep_tau.csv", ["tau", "success_rate", "flops_ratio", "speedup"], rows)
    report.tradeoff_plot(
        out / "sweep_tau.png",
        [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows],
        xlabel="routing threshold",
    )
    return EXIT_OK


def cmd_sweep_skip(cfg: Config, out: Path, skips: list[int]) -> int:
    loaded = _load_inputs(cfg, out, "test_data", "teacher", "probe", "student")
    data, student = loaded["test_data"], loaded["student"]
    fm = build_flops_model(backbone_config_from(cfg), cfg["world.n_tokens"])
    rows = sweep_skip_n(student, data.episodes, skips, fm)
    report.write_csv(out / "sweep_skip.csv", ["n_skipped", "success_rate", "flops_ratio"], rows)
    report.tradeoff_plot(
        out / "sweep_skip.png",
        [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows],
        xlabel="layers force-skipped",
    )
    return EXIT_OK


def cmd_activation_hist(cfg: Config, out: Path) -> int:
    loaded = _load_inputs(cfg, out, "test_data", "teacher", "probe", "student")
    data, student = loaded["test_data"], loaded["student"]
    rows = activation_histogram(student, data.episodes, cfg["router.tau"])
    report.write_csv(out / "activation_hist.csv", ["layer", "frequency"], rows)
    report.bar_plot(
        out / "activation_hist.png",
        [r[0] + 1 for r in rows], [r[1] for r in rows],
        xlabel="layer", ylabel="activation frequency",
    )
    return EXIT_OK


def cmd_gradcheck(cfg: Config, out: Path, instances: int) -> int:
    results = run_all(instances)
    report.write_csv(
        out / "gradcheck.csv",
        ["check", "instances", "max_rel_err", "passed"],
        [(r.name, r.instances, r.max_rel_err, int(r.passed)) for r in results],
    )
    for r in results:
        print(f"{r.name}: max_rel_err={r.max_rel_err:.3e} {'ok' if r.passed else 'FAIL'}")
    if not all(r.passed for r in results):
        raise NumericalError("gradient check failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routedistill")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="config file path")
    common.add_argument("--seed", type=int, default=None, help="override world/backbone/train seeds")
    common.add_argument("--out", type=str, default="out", help="artifact directory")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common])
    sub.add_parser("train-teacher", parents=[common])
    sub.add_parser("stage1", parents=[common])
    sub.add_parser("stage2", parents=[common])
    sub.add_parser("eval", parents=[common])
    p = sub.add_parser("sweep-tau", parents=[common])
    p.add_argument("--taus", type=str, default="0.4,0.5,0.6,0.7")
    p = sub.add_parser("sweep-skip", parents=[common])
    p.add_argument("--skips", type=str, default=None, help="comma list, default 0..L-1")
    sub.add_parser("activation-hist", parents=[common])
    p = sub.add_parser("gradcheck", parents=[common])
    p.add_argument("--instances", type=int, default=50)
    return parser


def _build_config(args) -> Config:
    cfg = load_config_file(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = apply_overrides(
            cfg,
            [f"world.seed={args.seed}", f"backbone.seed={args.seed}", f"train.seed={args.seed}"],
        )
    return apply_overrides(cfg, args.overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _build_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out)
        if args.command == "train-teacher":
            return cmd_train_teacher(cfg, out)
        if args.command == "stage1":
            return cmd_stage1(cfg, out)
        if args.command == "stage2":
            return cmd_stage2(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "sweep-tau":
            taus = [float(x) for x in args.taus.split(",") if x]
            return cmd_sweep_tau(cfg, out, taus)
        if args.command == "sweep-skip":
            if args.skips is None:
                skips = list(range(cfg["backbone.layers"]))
            else:
                skips = [int(x) for x in args.skips.split(",") if x]
            return cmd_sweep_skip(cfg, out, skips)
        if args.command == "activation-hist":
            return cmd_activation_hist(cfg, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out, args.instances)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: code={EXIT_CONFIG} kind=config msg={e}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as e:
        print(f"error: code={EXIT_INTEGRITY} kind=integrity msg={e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (NumericalError, FloatingPointError) as e:
        print(f"error: code={EXIT_NUMERICAL} kind=numerical msg={e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as e:
        print(f"error: code={EXIT_INTEGRITY} kind=integrity msg=missing artifact: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ValueError as e:
        print(f"error: code={EXIT_CONFIG} kind=config msg={e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
