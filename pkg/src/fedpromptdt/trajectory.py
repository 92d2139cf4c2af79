"""Trajectories, prompts, reward-to-go and dataset shards."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import LEVEL_CODES
from .container import load_container, save_container
from .env import ACTION_PER_USER, EnvSpec

SHARD_FORMAT = "fedpromptdt-shard"
SHARD_VERSION = 1


@dataclass
class Trajectory:
    env_id: str
    states: np.ndarray  # (L, state_dim) raw, zero-padded to K_max
    actions: np.ndarray  # (L, action_dim)
    rewards: np.ndarray  # (L,)
    timesteps: np.ndarray | None = None
    episode_seed: int = -1
    policy: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.timesteps is None:
            self.timesteps = np.arange(len(self.rewards), dtype=np.int64)
        if not (len(self.states) == len(self.actions) == len(self.rewards) == len(self.timesteps)):
            raise ValueError("trajectory arrays have different lengths")
        if len(self.timesteps) and not np.array_equal(self.timesteps, np.arange(len(self.timesteps))):
            raise ValueError("timesteps must be contiguous from 0")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def ep_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def rtg(self) -> np.ndarray:
        return rewards_to_go(self.rewards)


@dataclass
class Prompt:
    rtg: np.ndarray  # (L_pr,)
    states: np.ndarray  # (L_pr, aug_state_dim)
    actions: np.ndarray  # (L_pr, action_dim)
    timesteps: np.ndarray  # (L_pr,)

    def __len__(self) -> int:
        return len(self.rtg)


@dataclass
class DatasetShard:
    mec_id: int
    env_specs: dict[str, EnvSpec]
    trajectories: dict[str, list[Trajectory]] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return sum(len(t) for ts in self.trajectories.values() for t in ts)

    @property
    def n_trajectories(self) -> int:
        return sum(len(ts) for ts in self.trajectories.values())

    def summary(self) -> dict:
        out = {}
        for env_id, ts in self.trajectories.items():
            eps = np.array([t.ep_reward for t in ts])
            out[env_id] = {
                "trajectories": len(ts),
                "ep_min": float(eps.min()) if len(eps) else None,
                "ep_mean": float(eps.mean()) if len(eps) else None,
                "ep_max": float(eps.max()) if len(eps) else None,
            }
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetShard):
            return NotImplemented
        if self.mec_id != other.mec_id or self.env_specs != other.env_specs:
            return False
        if list(self.trajectories) != list(other.trajectories):
            return False
        for k, ts in self.trajectories.items():
            os_ = other.trajectories[k]
            if len(ts) != len(os_):
                return False
            for a, b in zip(ts, os_):
                if (a.env_id, a.episode_seed, a.policy) != (b.env_id, b.episode_seed, b.policy):
                    return False
                for x, y in ((a.states, b.states), (a.actions, b.actions), (a.rewards, b.rewards),
                             (a.timesteps, b.timesteps)):
                    if x.shape != y.shape or x.tobytes() != y.tobytes():
                        return False
        return True


def rewards_to_go(rewards: Sequence[float]) -> np.ndarray:
    """Undiscounted suffix sums."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("rewards_to_go of an empty sequence")
    return np.cumsum(r[::-1])[::-1].copy()


def top1(trajs: Sequence[Trajectory]) -> Trajectory:
    if not trajs:
        raise ValueError("top1 of an empty list")
    eps = [t.ep_reward for t in trajs]
    return trajs[int(np.argmax(eps))]  # argmax returns the first maximum


def user_info(levels: Sequence[str], K_max: int) -> np.ndarray:
    U = np.zeros(K_max)
    U[: len(levels)] = [LEVEL_CODES[lv] for lv in levels]
    return U


def augment_state(states: np.ndarray, levels: Sequence[str], K_max: int) -> np.ndarray:
    """Append the user-info vector (0.6/0.4/0.2 per level, 0 for empty slots)."""
    states = np.asarray(states, dtype=np.float64)
    U = user_info(levels, K_max)
    if states.ndim == 1:
        return np.concatenate([states, U])
    return np.concatenate([states, np.broadcast_to(U, (states.shape[0], K_max))], axis=1)


def sample_training_prompt(top: Trajectory, L_pr: int, rng: np.random.Generator,
                           levels: Sequence[str], K_max: int) -> Prompt:
    L = len(top)
    if L < L_pr:
        raise ValueError(f"trajectory of length {L} shorter than prompt length {L_pr}")
    i = int(rng.integers(0, L - L_pr)) if L > L_pr else 0
    sl = slice(i, i + L_pr)
    return Prompt(
        rtg=top.rtg[sl],
        states=augment_state(top.states[sl], levels, K_max),
        actions=top.actions[sl].copy(),
        timesteps=top.timesteps[sl].copy(),
    )


def preferred_action(K_e: int, K_max: int) -> np.ndarray:
    if K_e > K_max:
        raise ValueError(f"K_e={K_e} exceeds K_max={K_max}")
    a = np.zeros((K_max, ACTION_PER_USER))
    a[:K_e] = 1.0
    return a.reshape(-1)


def build_execution_prompt(rtg_target: float, s0: np.ndarray, K_e: int, K_max: int, L_pr: int) -> Prompt:
    """``L_pr`` copies of (target return, augmented initial state, all-ones preferred action)."""
    a = preferred_action(K_e, K_max)
    s0 = np.asarray(s0, dtype=np.float64)
    return Prompt(
        rtg=np.full(L_pr, float(rtg_target)),
        states=np.tile(s0, (L_pr, 1)),
        actions=np.tile(a, (L_pr, 1)),
        timesteps=np.zeros(L_pr, dtype=np.int64),
    )


# --------------------------------------------------------------------------
# serialization


def save_shard(shard: DatasetShard, path: str | Path) -> str:
    """Write a shard; returns its content checksum.

    Arrays ``t``, ``R``, ``S``, ``A`` hold all trajectories concatenated in
    (env order, trajectory order); ``offsets`` holds the start row of each
    trajectory plus a final end row. Per-trajectory env_id, seed and policy
    live in the JSON metadata.
    """
    index, ts, rs, ss, as_ = [], [], [], [], []
    offsets = [0]
    for env_id, trajs in shard.trajectories.items():
        for tr in trajs:
            index.append({"env_id": env_id, "episode_seed": tr.episode_seed, "policy": tr.policy})
            ts.append(tr.timesteps)
            rs.append(tr.rewards)
            ss.append(tr.states)
            as_.append(tr.actions)
            offsets.append(offsets[-1] + len(tr))
    meta = {
        "mec_id": shard.mec_id,
        "env_specs": [s.to_dict() for s in shard.env_specs.values()],
        "env_order": list(shard.trajectories),
        "trajectories": index,
    }

    def cat(parts, dtype, width=None):
        if parts:
            return np.concatenate(parts).astype(dtype)
        return np.zeros((0,) if width is None else (0, width), dtype=dtype)

    arrays = {
        "offsets": np.asarray(offsets, dtype=np.int64),
        "t": cat(ts, np.int64),
        "R": cat(rs, np.float64),
        "S": cat(ss, np.float64, 0),
        "A": cat(as_, np.float64, 0),
    }
    return save_container(path, SHARD_FORMAT, SHARD_VERSION, meta, arrays)


def load_shard(path: str | Path) -> DatasetShard:
    meta, arr = load_container(path, SHARD_FORMAT, SHARD_VERSION)
    specs = {d["env_id"]: EnvSpec.from_dict(d) for d in meta["env_specs"]}
    trajs: dict[str, list[Trajectory]] = {e: [] for e in meta["env_order"]}
    off = arr["offsets"]
    for i, info in enumerate(meta["trajectories"]):
        sl = slice(int(off[i]), int(off[i + 1]))
        trajs[info["env_id"]].append(Trajectory(
            env_id=info["env_id"], states=arr["S"][sl], actions=arr["A"][sl], rewards=arr["R"][sl],
            timesteps=arr["t"][sl], episode_seed=info["episode_seed"], policy=info["policy"],
        ))
    return DatasetShard(mec_id=meta["mec_id"], env_specs=specs, trajectories=trajs)


def shard_checksum(path: str | Path) -> str:
    meta, _ = load_container(path, SHARD_FORMAT, SHARD_VERSION)
    return meta["checksum"]
