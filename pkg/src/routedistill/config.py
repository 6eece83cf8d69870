"""Flat namespaced configuration with documented defaults.

Config files are UTF-8 "key = value" lines with '#' comments. Unknown
keys are rejected, every key has a default, and --set overrides reuse
the same parser.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .checkpoint import hash_bytes


class ConfigError(Exception):
    """Invalid key, type, or invariant; CLI maps this to exit code 2."""


# key -> (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "world.n_tokens": (8, "visual tokens per episode"),
    "world.token_dim": (16, "raw visual token width (>= 11: 8 id + 3 position dims)"),
    "world.n_objects": (4, "object vocabulary size (2..8, <= n_tokens)"),
    "world.noise_std": (0.1, "distractor token noise standard deviation"),
    "world.seed": (1234, "episode stream seed"),
    "world.n_train": (4096, "training episodes emitted by gen-data"),
    "world.n_test": (512, "held-out episodes emitted by gen-data"),
    "backbone.layers": (6, "trunk depth L"),
    "backbone.width": (64, "hidden width d"),
    "backbone.heads": (4, "attention heads (must divide width)"),
    "backbone.ff_mult": (4, "feed-forward expansion factor"),
    "backbone.capsule_dim": (32, "semantic capsule width d_c (<= width)"),
    "backbone.head_hidden": (64, "action-head hidden width"),
    "backbone.seed": (7, "weight initialization seed"),
    "graph.k": (8, "neighbors kept per token row"),
    "graph.affinity_dim": (16, "affinity projection width"),
    "graph.dropout": (0.1, "dropout inside graph encoders and auxiliary heads"),
    "graph.encoder": ("gat", "capsule encoder: 'gat' or 'mlp' (ablation)"),
    "loss.alpha": (1.0, "semantic loss weight"),
    "loss.beta": (1.0, "action loss weight"),
    "loss.eta": (0.5, "relational (Gram) term weight inside the semantic loss"),
    "loss.gamma": (0.05, "load-balancing regularizer weight"),
    "loss.kappa": (2.0, "depth power-law exponent for per-layer weights"),
    "loss.final": (2.0, "final-head alignment weight in stage 2 (0 disables)"),
    "loss.exec_cost": (0.25, "mean-gate execution cost in stage 2 (0 disables)"),
    "router.tau": (0.5, "gate threshold for routed inference, in (0, 1)"),
    "router.bias_init": (-1.0, "initial router bias (low activation start)"),
    "router.lr_mult": (6.0, "router learning-rate multiplier in stage 2"),
    "router.routed_frac": (0.6, "fraction of stage-2 steps run with threshold-binarized gates"),
    "train.lr": (1e-3, "base learning rate"),
    "train.epochs": (5, "distillation (stage 2) epochs"),
    "train.batch": (16, "mini-batch size"),
    "train.warmup": (100, "linear warmup steps"),
    "train.cosine": (True, "cosine-anneal the learning rate after warmup"),
    "train.clip": (1.0, "global gradient-norm clip"),
    "train.seed": (0, "training seed (shuffling, dropout, fresh parameters)"),
    "train.wd": (0.01, "AdamW decoupled weight decay"),
    "train.teacher_epochs": (24, "teacher pretraining epochs"),
    "train.teacher_batch": (32, "teacher pretraining batch size"),
    "train.teacher_lr": (1.4e-3, "teacher pretraining learning rate"),
    "train.stage1_epochs": (6, "graph-probe (stage 1) epochs"),
    "paths.train_data": ("", "training dataset path (default: <out>/train.ds)"),
    "paths.test_data": ("", "test dataset path (default: <out>/test.ds)"),
    "paths.teacher": ("", "teacher checkpoint path (default: <out>/teacher.ckpt)"),
    "paths.probe": ("", "probe checkpoint path (default: <out>/probe.ckpt)"),
    "paths.student": ("", "student checkpoint path (default: <out>/student.ckpt)"),
    "paths.capsules": ("", "teacher capsule cache path (default: <out>/capsules.ckpt)"),
}


@dataclass
class Config:
    values: dict[str, object]

    def __getitem__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def instruction_dim(self) -> int:
        # two 8-dim object codes plus the gripper bit
        return 17


def default_config() -> Config:
    return Config({k: v for k, (v, _) in DEFAULTS.items()})


def _parse_value(key: str, text: str, lineno: int | None = None) -> object:
    default = DEFAULTS[key][0]
    where = f" (line {lineno})" if lineno is not None else ""
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text, 0)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(
            f"bad value {text!r} for {key} (expected {type(default).__name__}){where}"
        ) from None


def parse_config(text: str, base: Config | None = None) -> Config:
    """Merge "key = value" lines over the defaults and validate."""
    cfg = Config(dict((base or default_config()).values))
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value' (line {lineno}): {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        cfg.values[key] = _parse_value(key, val, lineno)
    validate_config(cfg)
    return cfg


def load_config_file(path: str | Path, base: Config | None = None) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply repeated --set key=value flags over an existing config."""
    out = Config(dict(cfg.values))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} in --set")
        out.values[key] = _parse_value(key, val)
    validate_config(out)
    return out


def validate_config(cfg: Config) -> None:
    v = cfg.values

    def require(cond: bool, msg: str) -> None:
        if not cond:
            raise ConfigError(msg)

    require(v["world.n_tokens"] >= 2, "world.n_tokens must be >= 2")
    require(v["world.token_dim"] >= 11, "world.token_dim must be >= 11 (8 id + 3 position)")
    require(2 <= v["world.n_objects"] <= 8, "world.n_objects must be in [2, 8]")
    require(v["world.n_objects"] <= v["world.n_tokens"], "world.n_objects must be <= world.n_tokens")
    require(v["world.noise_std"] >= 0.0, "world.noise_std must be >= 0")
    require(v["world.n_train"] >= 1, "world.n_train must be >= 1")
    require(v["world.n_test"] >= 1, "world.n_test must be >= 1")
    require(v["backbone.layers"] >= 2, "backbone.layers must be >= 2")
    require(v["backbone.width"] >= 1, "backbone.width must be >= 1")
    require(v["backbone.heads"] >= 1, "backbone.heads must be >= 1")
    require(
        v["backbone.width"] % v["backbone.heads"] == 0,
        "backbone.width must be divisible by backbone.heads",
    )
    require(v["backbone.ff_mult"] >= 1, "backbone.ff_mult must be >= 1")
    require(
        1 <= v["backbone.capsule_dim"] <= v["backbone.width"],
        "backbone.capsule_dim must be in [1, backbone.width]",
    )
    require(v["backbone.head_hidden"] >= 1, "backbone.head_hidden must be >= 1")
    n_total = v["world.n_tokens"] + 1  # language token joins the trunk
    require(1 <= v["graph.k"] <= n_total, f"graph.k must be in [1, {n_total}]")
    require(v["graph.affinity_dim"] >= 1, "graph.affinity_dim must be >= 1")
    require(0.0 <= v["graph.dropout"] < 1.0, "graph.dropout must be in [0, 1)")
    require(v["graph.encoder"] in ("gat", "mlp"), "graph.encoder must be 'gat' or 'mlp'")
    for key in ("loss.alpha", "loss.beta", "loss.eta", "loss.gamma", "loss.kappa",
                "loss.final", "loss.exec_cost"):
        require(v[key] >= 0.0, f"{key} must be non-negative")
    require(0.0 < v["router.tau"] < 1.0, "router.tau must be in (0, 1)")
    require(v["router.lr_mult"] > 0.0, "router.lr_mult must be positive")
    require(0.0 <= v["router.routed_frac"] <= 1.0, "router.routed_frac must be in [0, 1]")
    require(v["train.lr"] > 0.0, "train.lr must be positive")
    require(v["train.epochs"] >= 0, "train.epochs must be >= 0")
    require(v["train.batch"] >= 1, "train.batch must be >= 1")
    require(v["train.warmup"] >= 0, "train.warmup must be >= 0")
    require(v["train.clip"] > 0.0, "train.clip must be positive")
    require(v["train.wd"] >= 0.0, "train.wd must be >= 0")
    require(v["train.teacher_epochs"] >= 0, "train.teacher_epochs must be >= 0")
    require(v["train.teacher_batch"] >= 1, "train.teacher_batch must be >= 1")
    require(v["train.teacher_lr"] > 0.0, "train.teacher_lr must be positive")
    require(v["train.stage1_epochs"] >= 0, "train.stage1_epochs must be >= 0")


def config_hash(cfg: Config) -> str:
    text = "".join(f"{k}={cfg.values[k]}\n" for k in sorted(cfg.values))
    return hash_bytes(text.encode("utf-8"))
