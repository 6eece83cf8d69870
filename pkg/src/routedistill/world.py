"""Deterministic synthetic embodied episodes with an analytic action oracle.

Each episode is a bag of visual tokens plus a pooled instruction vector.
Exactly two tokens carry object-id codes named by the instruction (the
target and the receptacle); the rest are Gaussian distractors. The
ground-truth 7-DoF action is a pure function of those two tokens and the
gripper bit, so an oracle can recompute it without any learned model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import hash_file, load_container, save_container
from .config import Config

ID_DIM = 8
POS_DIM = 3
ACTION_DIM = 7
INSTRUCTION_DIM = 2 * ID_DIM + 1
ROTATION_SCALE = 0.1
SUCCESS_THRESHOLD = 0.05  # infinity-norm bound on the action error

_CODE_SEED = 90135  # object codes are universal constants, not per-world


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_tokens: int
    token_dim: int
    n_objects: int
    noise_std: float
    seed: int

    def __post_init__(self):
        if self.token_dim < ID_DIM + POS_DIM:
            raise WorldError(f"token_dim must be >= {ID_DIM + POS_DIM}, got {self.token_dim}")
        if not 2 <= self.n_objects <= ID_DIM:
            raise WorldError(f"n_objects must be in [2, {ID_DIM}], got {self.n_objects}")
        if self.n_objects > self.n_tokens:
            raise WorldError("n_objects cannot exceed n_tokens")
        if self.noise_std < 0:
            raise WorldError("noise_std must be non-negative")


def world_config_from(cfg: Config) -> WorldConfig:
    return WorldConfig(
        n_tokens=cfg["world.n_tokens"],
        token_dim=cfg["world.token_dim"],
        n_objects=cfg["world.n_objects"],
        noise_std=cfg["world.noise_std"],
        seed=cfg["world.seed"],
    )


@dataclass
class Episode:
    visual: np.ndarray  # [n_tokens, token_dim]
    instruction: np.ndarray  # [INSTRUCTION_DIM]
    action: np.ndarray  # [ACTION_DIM]


def object_codes(n_objects: int) -> np.ndarray:
    """Fixed orthonormal 8-dim id codes, identical across all worlds."""
    rng = np.random.default_rng(_CODE_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((ID_DIM, ID_DIM)))
    return q[:n_objects].copy()


def _compose_action(pos_target: np.ndarray, pos_recept: np.ndarray, gripper: float) -> np.ndarray:
    delta = pos_recept - pos_target
    norm = np.linalg.norm(delta)
    rot = ROTATION_SCALE * delta / norm if norm > 0 else np.zeros(POS_DIM)
    return np.concatenate([delta, rot, [gripper]])


def gen_episode(cfg: WorldConfig, index: int) -> Episode:
    """Episode as a pure function of (cfg.seed, index)."""
    if index < 0:
        raise WorldError(f"episode index must be non-negative, got {index}")
    rng = np.random.default_rng([cfg.seed, index])
    codes = object_codes(cfg.n_objects)

    target_id, recept_id = rng.choice(cfg.n_objects, size=2, replace=False)
    positions = rng.uniform(-1.0, 1.0, size=(2, POS_DIM))
    gripper = float(rng.integers(0, 2) * 2 - 1)
    slots = rng.choice(cfg.n_tokens, size=2, replace=False)

    visual = rng.normal(0.0, cfg.noise_std, size=(cfg.n_tokens, cfg.token_dim))
    for slot, obj, pos in zip(slots, (target_id, recept_id), positions):
        token = np.zeros(cfg.token_dim)
        token[:ID_DIM] = codes[obj]
        token[ID_DIM : ID_DIM + POS_DIM] = pos
        visual[slot] = token

    instruction = np.concatenate([codes[target_id], codes[recept_id], [gripper]])
    action = _compose_action(positions[0], positions[1], gripper)
    return Episode(visual=visual, instruction=instruction, action=action)


def oracle_action(episode: Episode) -> np.ndarray:
    """Recompute the action from the instruction and the two matching tokens.

    Matching is exact on the 8 id dims, so the oracle is independent of any
    learned parameters and of every distractor token.
    """
    positions = []
    for code in (episode.instruction[:ID_DIM], episode.instruction[ID_DIM : 2 * ID_DIM]):
        hits = np.where(np.all(episode.visual[:, :ID_DIM] == code, axis=1))[0]
        if len(hits) != 1:
            raise WorldError(
                f"instruction references an object with {len(hits)} matching tokens"
            )
        positions.append(episode.visual[hits[0], ID_DIM : ID_DIM + POS_DIM])
    gripper = float(episode.instruction[-1])
    if gripper not in (-1.0, 1.0):
        raise WorldError(f"gripper bit must be +-1, got {gripper}")
    return _compose_action(positions[0], positions[1], gripper)


def is_success(predicted: np.ndarray, action: np.ndarray) -> bool:
    return bool(np.max(np.abs(np.asarray(predicted) - np.asarray(action))) < SUCCESS_THRESHOLD)


@dataclass
class Dataset:
    episodes: list[Episode]
    manifest: dict[str, str]


def _world_hash(cfg: WorldConfig) -> str:
    from .checkpoint import hash_bytes

    text = f"{cfg.n_tokens},{cfg.token_dim},{cfg.n_objects},{cfg.noise_std!r},{cfg.seed}"
    return hash_bytes(text.encode())


def make_dataset(cfg: WorldConfig, n_episodes: int, start_index: int = 0) -> Dataset:
    """Episodes gen_episode(cfg, start_index .. start_index + n) plus a manifest."""
    if n_episodes < 1:
        raise WorldError(f"n_episodes must be >= 1, got {n_episodes}")
    episodes = [gen_episode(cfg, start_index + i) for i in range(n_episodes)]
    manifest = {
        "kind": "dataset",
        "world_hash": _world_hash(cfg),
        "n_episodes": str(n_episodes),
        "start_index": str(start_index),
        "token_dim": str(cfg.token_dim),
        "n_tokens": str(cfg.n_tokens),
    }
    return Dataset(episodes=episodes, manifest=manifest)


def save_dataset(path, ds: Dataset) -> str:
    tensors: dict[str, np.ndarray] = {}
    for i, ep in enumerate(ds.episodes):
        tensors[f"episode/{i}/v"] = ep.visual
        tensors[f"episode/{i}/l"] = ep.instruction
        tensors[f"episode/{i}/a"] = ep.action
    save_container(path, ds.manifest, tensors)
    return hash_file(path)


def load_dataset(path) -> Dataset:
    manifest, tensors = load_container(path)
    if manifest.get("kind") != "dataset":
        raise WorldError(f"{path} is not a dataset container")
    n = int(manifest["n_episodes"])
    episodes = [
        Episode(
            visual=tensors[f"episode/{i}/v"],
            instruction=tensors[f"episode/{i}/l"],
            action=tensors[f"episode/{i}/a"],
        )
        for i in range(n)
    ]
    return Dataset(episodes=episodes, manifest=manifest)


def stack_episodes(episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    v = np.stack([ep.visual for ep in episodes])
    l = np.stack([ep.instruction for ep in episodes])
    a = np.stack([ep.action for ep in episodes])
    return v, l, a
