"""Online execution of trained policies, summary metrics and parameter sweeps."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .behavior import demand_proportional_policy, episode_seed, hillclimb_policy, policy_schedule, random_policy
from .config import LEVELS, DataConfig, EvalConfig, SystemConfig
from .env import EnvSpec, MECEnv, level_tuple_code
from .model import PromptDT, predict_next_action
from .trajectory import Trajectory, augment_state, build_execution_prompt

log = logging.getLogger(__name__)

EPISODE_COLUMNS = ["episode", "step", "reward", "rtg", "min_qoe", "hfqoe"]
INDEX_COLUMNS = ["episode", "method", "env_id", "mec_id", "seed", "EP", "MA", "min_qoe", "error"]
SWEEP_COLUMNS = ["axis", "axis_value", "mec_id", "MA", "EP", "min_qoe"]
AXES = ("qoe_th", "hfqoe_th", "bandwidth", "frequency", "rtg", "prompt_len")


def _arange(lo: float, hi: float, step: float) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


DEFAULT_GRIDS = {
    "qoe_th": _arange(0.90, 1.10, 0.05),
    "hfqoe_th": _arange(0.70, 0.90, 0.05),
    "bandwidth": _arange(6, 14, 2),  # MHz
    "frequency": _arange(11, 19, 2),  # GHz
    "rtg": _arange(500, 1100, 50),
    "prompt_len": [1, 3, 5, 7, 9],
}


# --------------------------------------------------------------------------
# environment split


@dataclass
class EnvSplit:
    train: list[list[EnvSpec]]  # per MEC
    heldout: list[EnvSpec]
    heldout_mec: list[int]

    @property
    def all_train(self) -> list[EnvSpec]:
        return [s for mec in self.train for s in mec]


def _spec_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def make_env_split(data: DataConfig, E: int, seed: int) -> EnvSplit:
    """Hold out level tuples per user count; training envs cycle the remaining tuples.

    For each user count every ordered level tuple is enumerated and
    shuffled. The first ``holdout`` tuples (at most a third of them) become
    evaluation envs and never appear in training data. Training envs are
    dealt to MECs round-robin.
    """
    counts = list(data.user_counts)
    hold = data.holdout_per_count
    hold = list(hold) if isinstance(hold, (list, tuple)) else [hold] * len(counts)
    if len(hold) != len(counts):
        raise ValueError("holdout_per_count must match user_counts in length")
    train: list[list[EnvSpec]] = [[] for _ in range(E)]
    heldout, heldout_mec = [], []
    g = 0
    for ci, K in enumerate(counts):
        tuples = list(itertools.product(LEVELS, repeat=K))
        rng = np.random.default_rng([seed, K, 7])
        order = rng.permutation(len(tuples))
        h = min(int(hold[ci]), len(tuples) // 3)
        if h < hold[ci]:
            log.warning("user count %d: only %d held-out tuples possible (asked %d)", K, h, hold[ci])
        held = [tuples[i] for i in order[:h]]
        pool = [tuples[i] for i in order[h:]]
        for j, lv in enumerate(held):
            heldout.append(EnvSpec(f"eval-k{K}-{j:02d}-{level_tuple_code(lv)}", tuple(lv), _spec_seed(seed, K, j, 2)))
            heldout_mec.append(len(heldout_mec) % E)
        for i in range(data.envs_per_count):
            lv = pool[i % len(pool)]
            spec = EnvSpec(f"k{K}-{i:03d}-{level_tuple_code(lv)}", tuple(lv), _spec_seed(seed, K, i, 1))
            train[g % E].append(spec)
            g += 1
    return EnvSplit(train, heldout, heldout_mec)


# --------------------------------------------------------------------------
# agents


class Agent(Protocol):
    name: str

    def reset(self, env: MECEnv, s0: np.ndarray, rtg_target: float, seed: int) -> None: ...

    def act(self, env: MECEnv, ctx: "Context") -> np.ndarray: ...


@dataclass
class Context:
    rtg: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)  # augmented
    actions: list[np.ndarray] = field(default_factory=list)
    timesteps: list[int] = field(default_factory=list)
    raw_state: np.ndarray | None = None


class DTAgent:
    """Greedy decision-transformer controller."""

    def __init__(self, model: PromptDT, L_tr: int, L_pr: int, use_prompt: bool | None = None, name: str | None = None):
        self.model = model.eval()
        self.L_tr = L_tr
        self.L_pr = L_pr
        self.use_prompt = model.cfg.use_prompt if use_prompt is None else use_prompt
        self.K_max = model.cfg.action_dim // 5
        self.name = name or ("fedpromptdt" if self.use_prompt else "feddt")
        self.prompt = None

    def augment(self, env: MECEnv, s: np.ndarray) -> np.ndarray:
        return augment_state(s, env.spec.levels if self.use_prompt else (), self.K_max)

    def reset(self, env, s0, rtg_target, seed):
        self.prompt = None
        if self.use_prompt and self.L_pr > 0:
            self.prompt = build_execution_prompt(rtg_target, self.augment(env, s0), env.K_e, self.K_max, self.L_pr)

    def act(self, env, ctx):
        n = len(ctx.rtg)
        acts = np.zeros((n, self.K_max * 5))
        if n > 1:
            acts[:-1] = np.asarray(ctx.actions)
        t = np.minimum(np.asarray(ctx.timesteps), self.model.cfg.max_timestep - 1)
        return predict_next_action(self.model, self.prompt, ctx.rtg, np.asarray(ctx.states), acts, t, self.L_tr)


class ConstantAgent:
    def __init__(self, action: np.ndarray, name: str = "constant"):
        self.action = np.asarray(action, dtype=float)
        self.name = name

    def reset(self, env, s0, rtg_target, seed):
        pass

    def act(self, env, ctx):
        return self.action


class BehaviorAgent:
    """One of the scripted data-collection policies."""

    def __init__(self, policy: str, hillclimb_iters: int = 40, hillclimb_sigma: float = 0.25):
        self.policy = policy
        self.name = policy
        self.iters = hillclimb_iters
        self.sigma = hillclimb_sigma

    def reset(self, env, s0, rtg_target, seed):
        self.rng = np.random.default_rng([seed, 101])
        self.prev = None

    def act(self, env, ctx):
        s = ctx.raw_state
        if self.policy == "random":
            return random_policy(s, env.K_e, self.rng, env.cfg.K_max)
        if self.policy == "proportional":
            return demand_proportional_policy(s, env.profiles, env.K_e, env.cfg)
        if self.policy == "hillclimb":
            self.prev = hillclimb_policy(env, s, env.K_e, self.iters, self.rng, self.sigma, start=self.prev)
            return self.prev
        raise ValueError(f"unknown policy {self.policy!r}")


class BehaviorMix:
    """Assigns episodes to behaviour policies by the data-collection mix."""

    name = "behavior"

    def __init__(self, policy_mix: dict[str, float], hillclimb_iters: int = 40, hillclimb_sigma: float = 0.25):
        self.mix = policy_mix
        self.agents = {p: BehaviorAgent(p, hillclimb_iters, hillclimb_sigma) for p in policy_mix}

    def for_episodes(self, n: int) -> list[BehaviorAgent]:
        return [self.agents[p] for p in policy_schedule(self.mix, n)]


# --------------------------------------------------------------------------
# rollout


@dataclass
class RolloutResult:
    EP: float
    MA: float
    min_qoe: float
    rewards: np.ndarray
    rtg: np.ndarray  # conditioning value before each step
    step_min_qoe: np.ndarray
    step_hfqoe: np.ndarray
    trajectory: Trajectory | None
    error: str = ""


def moving_average(rewards: np.ndarray, window: int | None) -> float:
    if len(rewards) == 0:
        return float("nan")
    if window is None:
        return float(np.mean(rewards))
    return float(np.mean(rewards[-window:]))


def rollout(agent: Agent, cfg: SystemConfig, spec: EnvSpec, rtg_target: float, T_te: int, seed: int,
            ma_window: int | None = None, traces=None) -> RolloutResult:
    """Run one execution episode, conditioning on a telescoping reward-to-go.

    Failures inside the environment or agent are recorded in ``error``
    rather than raised.
    """
    env = MECEnv(dataclasses.replace(cfg, episode_len=T_te), spec, traces)
    ctx = Context()
    rewards, rtgs, mins, hfs, raw_states, actions = [], [], [], [], [], []
    try:
        s = env.reset(seed)
        agent.reset(env, s, rtg_target, seed)
        R = float(rtg_target)
        for t in range(T_te):
            ctx.rtg.append(R)
            ctx.states.append(agent.augment(env, s) if hasattr(agent, "augment") else s)
            ctx.timesteps.append(t)
            ctx.raw_state = s
            a = np.asarray(agent.act(env, ctx), dtype=float)
            ctx.actions.append(a)
            raw_states.append(s)
            actions.append(a)
            s, r, _, rep = env.step(a)
            rewards.append(r)
            rtgs.append(R)
            mins.append(float(np.min(rep.qoe)))
            hfs.append(float(rep.hfqoe))
            R = R - r
    except Exception as exc:  # noqa: BLE001 - recorded as a failed episode
        log.warning("episode on %s (seed %d) failed: %s", spec.env_id, seed, exc)
        rw = np.asarray(rewards)
        return RolloutResult(float("nan"), float("nan"), float("nan"), rw, np.asarray(rtgs), np.asarray(mins),
                             np.asarray(hfs), None, error=f"{type(exc).__name__}: {exc}")
    rw = np.asarray(rewards)
    traj = Trajectory(spec.env_id, np.asarray(raw_states), np.asarray(actions), rw, episode_seed=seed,
                      policy=agent.name)
    return RolloutResult(
        EP=float(rw.sum()),
        MA=moving_average(rw, ma_window),
        min_qoe=float(np.min(mins)),
        rewards=rw,
        rtg=np.asarray(rtgs),
        step_min_qoe=np.asarray(mins),
        step_hfqoe=np.asarray(hfs),
        trajectory=traj,
    )


# --------------------------------------------------------------------------
# suites


@dataclass
class EpisodeRecord:
    episode: int
    method: str
    env_id: str
    mec_id: int
    seed: int
    result: RolloutResult


def mean_std(x: Sequence[float]) -> dict[str, float]:
    a = np.asarray(x, dtype=float)
    a = a[np.isfinite(a)]
    if a.size == 0:
        return {"mean": float("nan"), "std": float("nan")}
    return {"mean": float(a.mean()), "std": float(a.std())}


def summarize(records: Sequence[EpisodeRecord]) -> dict:
    """Mean and population standard deviation of MA, EP and min QoE."""
    ok = [r for r in records if not r.result.error]
    out = {
        "episodes": len(records),
        "failed": len(records) - len(ok),
        "MA": mean_std([r.result.MA for r in ok]),
        "EP": mean_std([r.result.EP for r in ok]),
        "min_qoe": mean_std([r.result.min_qoe for r in ok]),
    }
    per_mec = {}
    for mec in sorted({r.mec_id for r in ok}):
        sub = [r for r in ok if r.mec_id == mec]
        per_mec[str(mec)] = {k: mean_std([getattr(r.result, k) for r in sub]) for k in ("MA", "EP", "min_qoe")}
    out["per_mec"] = per_mec
    return out


@dataclass
class SuiteResult:
    method: str
    records: list[EpisodeRecord]
    summary: dict


def evaluate_suite(agent: Agent | BehaviorMix, cfg: SystemConfig, specs: Sequence[EnvSpec],
                   ev: EvalConfig | None = None, mec_ids: Sequence[int] | None = None,
                   episodes: int | None = None, rtg: float | None = None, trace_provider=None) -> SuiteResult:
    """``episodes`` rollouts per spec with episode seeds shared across methods."""
    ev = ev or EvalConfig()
    if not specs:
        raise ValueError("no environments to evaluate")
    n = ev.episodes if episodes is None else episodes
    target = ev.rtg if rtg is None else rtg
    mec_ids = list(mec_ids) if mec_ids is not None else [0] * len(specs)
    records = []
    for spec, mec in zip(specs, mec_ids):
        agents = agent.for_episodes(n) if isinstance(agent, BehaviorMix) else [agent] * n
        traces = trace_provider(spec) if trace_provider else None
        for i, ag in enumerate(agents):
            seed = episode_seed(spec.seed, i, salt=ev.seed)
            res = rollout(ag, cfg, spec, target, ev.T_te, seed, ev.ma_window, traces)
            records.append(EpisodeRecord(len(records), agent.name, spec.env_id, mec, seed, res))
    return SuiteResult(agent.name, records, {"method": agent.name, "rtg": target, **summarize(records)})


def pooled_se(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b)))


def apply_axis(cfg: SystemConfig, ev: EvalConfig, agent, axis: str, value: float):
    """Copies of (system config, eval config) with one swept parameter changed."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")
    if axis == "qoe_th":
        cfg = dataclasses.replace(cfg, qoe_th=float(value))
    elif axis == "hfqoe_th":
        cfg = dataclasses.replace(cfg, hfqoe_th=float(value))
    elif axis == "bandwidth":
        cfg = dataclasses.replace(cfg, B_max=float(value) * 1e6)
    elif axis == "frequency":
        cfg = dataclasses.replace(cfg, f_max=float(value) * 1e9)
    elif axis == "rtg":
        ev = dataclasses.replace(ev, rtg=float(value))
    elif axis == "prompt_len":
        if not isinstance(agent, DTAgent):
            raise ValueError("prompt_len sweeps need a decision-transformer agent")
        if int(value) < 0 or int(value) != value:
            raise ValueError(f"invalid prompt length {value}")
        agent.L_pr = int(value)
    cfg.validate()
    return cfg, ev


def sweep(agent, cfg: SystemConfig, specs: Sequence[EnvSpec], axis: str, grid: Sequence[float] | None = None,
          ev: EvalConfig | None = None, mec_ids: Sequence[int] | None = None, trace_provider=None) -> list[dict]:
    """Long-format table (axis_value, mec_id, MA, EP, min_qoe) of per-MEC means."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")
    grid = DEFAULT_GRIDS[axis] if grid is None else list(grid)
    if not grid:
        raise ValueError("empty sweep grid")
    ev = ev or EvalConfig()
    saved_L_pr = getattr(agent, "L_pr", None)
    rows = []
    try:
        for v in grid:
            c, e = apply_axis(cfg, ev, agent, axis, v)
            res = evaluate_suite(agent, c, specs, e, mec_ids, trace_provider=trace_provider)
            for mec, m in res.summary["per_mec"].items():
                rows.append({"axis": axis, "axis_value": v, "mec_id": int(mec), "MA": m["MA"]["mean"],
                             "EP": m["EP"]["mean"], "min_qoe": m["min_qoe"]["mean"]})
    finally:
        if saved_L_pr is not None:
            agent.L_pr = saved_L_pr
    return rows


# --------------------------------------------------------------------------
# report files


def write_episode_csv(records: Sequence[EpisodeRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for rec in records:
            r = rec.result
            for t in range(len(r.rewards)):
                w.writerow([rec.episode, t, repr(float(r.rewards[t])), repr(float(r.rtg[t])),
                            repr(float(r.step_min_qoe[t])), repr(float(r.step_hfqoe[t]))])


def write_index_csv(records: Sequence[EpisodeRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_COLUMNS)
        for rec in records:
            r = rec.result
            w.writerow([rec.episode, rec.method, rec.env_id, rec.mec_id, rec.seed,
                        repr(r.EP), repr(r.MA), repr(r.min_qoe), r.error])


def write_summary_json(summaries: dict[str, dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")


def write_sweep_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def summary_from_csv(episode_csv: str | Path, index_csv: str | Path, ma_window: int | None = None) -> dict:
    """Recompute a method summary from the raw report files."""
    rewards: dict[int, list[float]] = {}
    mins: dict[int, list[float]] = {}
    with open(episode_csv) as fh:
        for row in csv.DictReader(fh):
            ep = int(row["episode"])
            rewards.setdefault(ep, []).append(float(row["reward"]))
            mins.setdefault(ep, []).append(float(row["min_qoe"]))
    with open(index_csv) as fh:
        index = [row for row in csv.DictReader(fh)]
    ok = [int(r["episode"]) for r in index if not r["error"]]
    return {
        "EP": mean_std([sum(rewards[e]) for e in ok]),
        "MA": mean_std([moving_average(np.asarray(rewards[e]), ma_window) for e in ok]),
        "min_qoe": mean_std([min(mins[e]) for e in ok]),
    }
