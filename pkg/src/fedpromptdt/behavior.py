"""Scripted behaviour policies and offline dataset collection."""
from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from .config import SystemConfig
from .env import ACTION_PER_USER, USER_FEATURES, EnvSpec, MECEnv, UserProfile, pad_action
from .trajectory import DatasetShard, Trajectory

log = logging.getLogger(__name__)

POLICIES = ("random", "proportional", "hillclimb")


def random_policy(state: np.ndarray, K_e: int, rng: np.random.Generator, K_max: int) -> np.ndarray:
    return pad_action(rng.uniform(0.0, 1.0, size=(K_e, ACTION_PER_USER)), K_max)


def current_attention(state: np.ndarray, K_e: int, K_max: int) -> np.ndarray:
    per_user = np.asarray(state)[: K_max * USER_FEATURES].reshape(K_max, USER_FEATURES)
    return per_user[:K_e, 4:7]


def demand_proportional_policy(
    state: np.ndarray, profiles: Sequence[UserProfile], K_e: int, cfg: SystemConfig
) -> np.ndarray:
    """Full resolution; bandwidth/CPU shares proportional to bit/cycle demand.

    Shares are scaled so the most demanding user gets 1 (the decoder
    renormalises anyway).
    """
    N = current_attention(state, K_e, cfg.K_max)
    b_th = np.array([p.b_th for p in profiles[:K_e]])
    bits = (N * b_th).sum(axis=1)
    cycles = (N * b_th * np.asarray(cfg.cycles)).sum(axis=1)
    act = np.ones((K_e, ACTION_PER_USER))
    act[:, 3] = bits / bits.max() if bits.max() > 0 else 1.0
    act[:, 4] = cycles / cycles.max() if cycles.max() > 0 else 1.0
    return pad_action(act, cfg.K_max)


def hillclimb_policy(
    env: MECEnv,
    state: np.ndarray,
    K_e: int,
    iters: int,
    rng: np.random.Generator,
    sigma: float = 0.25,
    lattice: Sequence[float] | None = None,
    start: np.ndarray | None = None,
) -> np.ndarray:
    """Greedy coordinate search on the one-step reward of the pending step.

    Each iteration perturbs one active coordinate (Gaussian with std
    ``sigma`` clipped to [0, 1], or a uniformly drawn ``lattice`` value) and
    keeps it if the counterfactual reward strictly improves.
    """
    cfg = env.cfg
    best = demand_proportional_policy(state, env.profiles, K_e, cfg) if start is None else np.array(start, dtype=float)
    best_r = env.peek(best).reward
    n_coords = K_e * ACTION_PER_USER
    grid = None if lattice is None else np.asarray(lattice, dtype=float)
    for _ in range(iters):
        i = int(rng.integers(n_coords))
        cand = best.copy()
        if grid is None:
            cand[i] = float(np.clip(cand[i] + rng.normal(0.0, sigma), 0.0, 1.0))
        else:
            cand[i] = float(grid[rng.integers(len(grid))])
        r = env.peek(cand).reward
        if r > best_r:
            best, best_r = cand, r
    return best


def make_env(cfg: SystemConfig, spec: EnvSpec, traces=None) -> MECEnv:
    return MECEnv(cfg, spec, traces)


def run_episode(
    env: MECEnv,
    policy: str,
    episode_seed: int,
    hillclimb_iters: int = 40,
    hillclimb_sigma: float = 0.25,
) -> Trajectory:
    cfg = env.cfg
    state = env.reset(episode_seed)
    rng = np.random.default_rng([episode_seed, 101])
    states, actions, rewards = [], [], []
    done = False
    prev = None
    while not done:
        if policy == "random":
            a = random_policy(state, env.K_e, rng, cfg.K_max)
        elif policy == "proportional":
            a = demand_proportional_policy(state, env.profiles, env.K_e, cfg)
        elif policy == "hillclimb":
            # warm start: the search budget accumulates over the episode
            a = hillclimb_policy(env, state, env.K_e, hillclimb_iters, rng, hillclimb_sigma, start=prev)
            prev = a
        else:
            raise ValueError(f"unknown policy {policy!r}")
        states.append(state)
        actions.append(a)
        state, r, done, _ = env.step(a)
        rewards.append(r)
    return Trajectory(
        env_id=env.spec.env_id,
        states=np.asarray(states),
        actions=np.asarray(actions),
        rewards=np.asarray(rewards),
        episode_seed=int(episode_seed),
        policy=policy,
    )


def policy_schedule(policy_mix: dict[str, float], n: int) -> list[str]:
    """Deterministic per-episode policy assignment matching the mix fractions."""
    names = [p for p in policy_mix if policy_mix[p] > 0]
    unknown = set(names) - set(POLICIES)
    if unknown:
        raise ValueError(f"unknown policies in mix: {sorted(unknown)}")
    w = np.array([policy_mix[p] for p in names], dtype=float)
    w = w / w.sum()
    counts = np.floor(w * n).astype(int)
    # largest remainder
    for i in np.argsort(-(w * n - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [name for name, c in zip(names, counts) for _ in range(c)]


def episode_seed(env_seed: int, episode: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([env_seed, salt, episode]).generate_state(1)[0])


def collect_env(
    cfg: SystemConfig,
    spec: EnvSpec,
    policy_mix: dict[str, float],
    episodes: int,
    hillclimb_iters: int = 40,
    hillclimb_sigma: float = 0.25,
    traces=None,
) -> list[Trajectory]:
    env = make_env(cfg, spec, traces)
    return [
        run_episode(env, pol, episode_seed(spec.seed, i), hillclimb_iters, hillclimb_sigma)
        for i, pol in enumerate(policy_schedule(policy_mix, episodes))
    ]


def collect_dataset(
    cfg: SystemConfig,
    env_specs: Sequence[EnvSpec],
    policy_mix: dict[str, float] | None = None,
    episodes_per_env: int = 100,
    mec_id: int = 0,
    hillclimb_iters: int = 40,
    hillclimb_sigma: float = 0.25,
    trace_provider: Callable[[EnvSpec], list] | None = None,
) -> DatasetShard:
    """Roll out behaviour episodes for each spec. Episode seeds derive from the spec seed."""
    policy_mix = policy_mix or {"random": 0.3, "proportional": 0.3, "hillclimb": 0.4}
    trajs: dict[str, list[Trajectory]] = {}
    for spec in env_specs:
        traces = trace_provider(spec) if trace_provider else None
        trajs[spec.env_id] = collect_env(
            cfg, spec, policy_mix, episodes_per_env, hillclimb_iters, hillclimb_sigma, traces
        )
        eps = [t.ep_reward for t in trajs[spec.env_id]]
        log.info("collected %s: %d episodes, EP reward min/mean/max %.2f/%.2f/%.2f",
                 spec.env_id, len(eps), min(eps), float(np.mean(eps)), max(eps))
    return DatasetShard(mec_id=mec_id, env_specs={s.env_id: s for s in env_specs}, trajectories=trajs)
