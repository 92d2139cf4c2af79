"""Single-server MEC simulation: channel, latency, QoE, hfQoE, reward and step.

State layout (raw, before user-info augmentation), for ``K_max`` user slots::

    per user k: N1, N2, N3, QoE   (previous decision time)
                N1, N2, N3, QoE   (current decision time)
                T_d, T_r, T       (latest completed GoP)
    server:     hfQoE (previous), hfQoE (current)

The "current" record holds the attention counts of the GoP about to be
served and the QoE of the last completed GoP. Inactive slots are zero.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import LEVEL_CODES, SystemConfig
from .gaze import AttentionMap, GazeTrace, attention_map, synth_gaze

USER_FEATURES = 11
ACTION_PER_USER = 5

REPORT_COLUMNS = [
    "step", "user", "level", "N1", "N2", "N3", "b1", "b2", "b3",
    "B", "f", "rate", "T_d", "T_r", "T", "qoe", "hfqoe", "reward",
]


class InfeasibleError(ArithmeticError):
    """Non-positive effective rate or CPU frequency after bias correction."""


@dataclass(frozen=True)
class UserProfile:
    level: str
    b_th: tuple[float, float, float]
    gaze: GazeTrace | None = None

    def __post_init__(self):
        if self.level not in LEVEL_CODES:
            raise ValueError(f"unknown user level {self.level!r}")
        if not (0 < self.b_th[0] < self.b_th[1] < self.b_th[2]):
            raise ValueError("b_th must be positive and strictly increasing")

    @property
    def level_code(self) -> float:
        return LEVEL_CODES[self.level]

    @classmethod
    def from_level(cls, level: str, cfg: SystemConfig, gaze: GazeTrace | None = None) -> "UserProfile":
        return cls(level, tuple(cfg.level_thresholds[level]), gaze)


@dataclass(frozen=True)
class ChannelState:
    h: float
    d: float
    interference: float = 0.0


# --------------------------------------------------------------------------
# scalar physics


def noise_power(cfg: SystemConfig, B_k: float) -> float:
    return cfg.noise_psd * B_k if cfg.noise_model == "psd" else cfg.noise_psd


def transmission_rate(cfg: SystemConfig, B_k: float, ch: ChannelState) -> float:
    """Shannon rate in bit/s of a sub-channel of ``B_k`` Hz."""
    if B_k < 0:
        raise ValueError(f"bandwidth must be nonnegative, got {B_k}")
    if B_k == 0:
        return 0.0
    snr = cfg.P * ch.h * ch.d ** (-cfg.alpha) / (ch.interference + noise_power(cfg, B_k))
    return B_k * math.log2(1.0 + snr)


def tile_bits(profile: UserProfile, ratios: Sequence[float], amap: AttentionMap, F: int):
    """Returns (b_a, g_a, G): per-tile bits, per-level GoP bits and GoP bits."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or np.any(r > 1):
        raise ValueError("ratios must be three values in [0, 1]")
    b = np.asarray(profile.b_th, dtype=np.float64) * r
    g = amap.counts * b * F
    return b, g, float(g.sum())


def download_latency(G: float, omega: float, rate: float, delta_R: float = 0.0) -> float:
    eff = rate - delta_R
    if eff <= 0:
        raise InfeasibleError(f"effective rate {eff} <= 0")
    return G / (omega * eff)


def render_latency(g: Sequence[float], cfg: SystemConfig, f_k: float, delta_f: float = 0.0) -> float:
    eff = f_k - delta_f
    if eff <= 0:
        raise InfeasibleError(f"effective frequency {eff} <= 0")
    work = sum(ga * ca for ga, ca in zip(g, cfg.cycles))
    return work / (cfg.effective_render_scale * eff)


def total_latency(T_d: float, T_r: float) -> float:
    return T_d + T_r


def qoe(T: float, cfg: SystemConfig, profile: UserProfile, amap: AttentionMap, b: Sequence[float]) -> float:
    if T < 0:
        raise ValueError("latency must be nonnegative")
    weights = np.arange(1, 4) * amap.counts / cfg.N
    res = np.log1p(np.asarray(b, dtype=np.float64) / np.asarray(profile.b_th))
    return (1.0 - T / cfg.T_th) * float(np.dot(weights, res))


def hfqoe(avg_qoe: Sequence[float], K_e: int | None = None) -> float:
    """Horizon-fair QoE: ``1 - std(avg_qoe) / sqrt(K_e)`` (population std)."""
    x = np.asarray(avg_qoe, dtype=np.float64)
    if x.size == 0:
        raise ValueError("hfqoe needs at least one user")
    K_e = x.size if K_e is None else K_e
    if K_e != x.size:
        raise ValueError("K_e must equal the number of averages")
    return 1.0 - float(np.std(x)) / math.sqrt(K_e)


def reward(qoe_k: Sequence[float], hfqoe_val: float, cfg: SystemConfig) -> float:
    q = np.asarray(qoe_k, dtype=np.float64)
    K_e = q.size
    qoe_pen = np.where(q < cfg.qoe_th, cfg.qoe_th, 0.0).sum()
    hf_pen = cfg.hfqoe_th if hfqoe_val < cfg.hfqoe_th else 0.0
    return float(q.sum() - cfg.penalty_1 * qoe_pen - cfg.penalty_2_for(K_e) * hf_pen)


# --------------------------------------------------------------------------
# actions


@dataclass
class Allocation:
    """Physical allocation for the active users."""

    b: np.ndarray  # (K_e, 3) bits per tile
    ratios: np.ndarray  # (K_e, 3)
    B: np.ndarray  # (K_e,) Hz
    f: np.ndarray  # (K_e,) Hz


def _normalized_shares(x: np.ndarray) -> np.ndarray:
    total = x.sum()
    if total <= 0:
        return np.full(x.shape, 1.0 / x.size)
    return x / total


def decode_action(raw: np.ndarray, K_e: int, cfg: SystemConfig, profiles: Sequence[UserProfile]) -> Allocation:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if K_e < 1 or K_e > cfg.K_max:
        raise ValueError(f"K_e={K_e} outside [1, {cfg.K_max}]")
    if raw.size != cfg.action_dim:
        raise ValueError(f"action has {raw.size} entries, expected {cfg.action_dim}")
    if np.any(raw < 0) or np.any(raw > 1) or not np.all(np.isfinite(raw)):
        raise ValueError("action entries must lie in [0, 1]")
    a = raw.reshape(cfg.K_max, ACTION_PER_USER)[:K_e]
    b_th = np.array([p.b_th for p in profiles[:K_e]], dtype=np.float64)
    return Allocation(
        b=b_th * a[:, :3],
        ratios=a[:, :3].copy(),
        B=cfg.B_max * _normalized_shares(a[:, 3]),
        f=cfg.f_max * _normalized_shares(a[:, 4]),
    )


def pad_action(active: np.ndarray, K_max: int) -> np.ndarray:
    """Zero-pad a (K_e, 5) block to the flat ``5*K_max`` action."""
    out = np.zeros((K_max, ACTION_PER_USER))
    out[: len(active)] = active
    return out.reshape(-1)


# --------------------------------------------------------------------------
# environment


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    levels: tuple[str, ...]
    seed: int

    @property
    def K_e(self) -> int:
        return len(self.levels)

    def to_dict(self) -> dict:
        return {"env_id": self.env_id, "levels": list(self.levels), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(d["env_id"], tuple(d["levels"]), int(d["seed"]))


@dataclass
class StepReport:
    step: int
    levels: tuple[str, ...]
    N: np.ndarray  # (K_e, 3)
    b: np.ndarray  # (K_e, 3)
    g: np.ndarray  # (K_e, 3)
    G: np.ndarray
    B: np.ndarray
    f: np.ndarray
    rate: np.ndarray
    T_d: np.ndarray
    T_r: np.ndarray
    T: np.ndarray
    qoe: np.ndarray
    hfqoe: float
    reward: float
    qoe_penalized: np.ndarray
    hfqoe_penalized: bool
    infeasible: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def rows(self) -> list[list]:
        out = []
        for k in range(len(self.qoe)):
            out.append([
                self.step, k, self.levels[k], *self.N[k].astype(int).tolist(), *self.b[k].tolist(),
                self.B[k], self.f[k], self.rate[k], self.T_d[k], self.T_r[k], self.T[k],
                self.qoe[k], self.hfqoe, self.reward,
            ])
        return out


def write_reports_csv(reports: Iterable[StepReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            w.writerows(rep.rows())


def make_profiles(levels: Sequence[str], cfg: SystemConfig, traces: Sequence[GazeTrace]) -> list[UserProfile]:
    return [UserProfile.from_level(lv, cfg, tr) for lv, tr in zip(levels, traces)]


def gaze_seed(env_seed: int, user: int) -> int:
    return int(np.random.SeedSequence([env_seed, 7919, user]).generate_state(1)[0])


class MECEnv:
    """One MEC server with ``K_e`` users; owns its RNG.

    Channel gains for the upcoming step are drawn before the step so
    :meth:`peek` can evaluate counterfactual actions on the same draw.
    """

    def __init__(self, cfg: SystemConfig, spec: EnvSpec, traces: Sequence[GazeTrace] | None = None):
        if not 1 <= spec.K_e <= cfg.K_max:
            raise ValueError(f"K_e={spec.K_e} outside [1, {cfg.K_max}]")
        self.cfg = cfg
        self.spec = spec
        self.K_e = spec.K_e
        if traces is None:
            trace_len = cfg.episode_len * cfg.F * 4
            traces = [synth_gaze(gaze_seed(spec.seed, k), trace_len, cfg.gaze_step_sigma) for k in range(self.K_e)]
        if len(traces) != self.K_e:
            raise ValueError("need one gaze trace per user")
        self.profiles = make_profiles(spec.levels, cfg, traces)
        self._b_th = np.array([p.b_th for p in self.profiles])
        self.t = 0
        self.done = True

    # -- helpers ---------------------------------------------------------
    def _attention(self, t: int) -> np.ndarray:
        cfg = self.cfg
        return np.array([
            attention_map(p.gaze, self._gop_offset[k] + t, cfg.I, cfg.J, cfg.F).counts
            for k, p in enumerate(self.profiles)
        ])

    def _draw_channel(self) -> None:
        self._h = self.rng.exponential(1.0, size=self.K_e)

    def user_codes(self) -> np.ndarray:
        U = np.zeros(self.cfg.K_max)
        U[: self.K_e] = [p.level_code for p in self.profiles]
        return U

    def observe(self) -> np.ndarray:
        cfg = self.cfg
        per_user = np.zeros((cfg.K_max, USER_FEATURES))
        K = self.K_e
        per_user[:K, 0:3] = self._N_prev
        per_user[:K, 3] = self._q_prev
        per_user[:K, 4:7] = self._N_cur
        per_user[:K, 7] = self._q_cur
        per_user[:K, 8:11] = self._lat
        return np.concatenate([per_user.reshape(-1), [self._hf_prev, self._hf_cur]])

    # -- API -------------------------------------------------------------
    def reset(self, seed: int) -> np.ndarray:
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        (x0, x1), (y0, y1) = cfg.user_box
        xy = np.column_stack([self.rng.uniform(x0, x1, self.K_e), self.rng.uniform(y0, y1, self.K_e)])
        self.d = np.hypot(xy[:, 0], xy[:, 1])
        # start each user's GoP cursor somewhere along its trace
        self._gop_offset = [
            int(self.rng.integers(0, max(len(p.gaze) // cfg.F, 1))) for p in self.profiles
        ]
        self.t = 0
        self.done = False
        self._qoe_sum = np.zeros(self.K_e)
        self._N_cur = self._attention(0)
        self._N_prev = self._N_cur.copy()
        self._q_prev = np.zeros(self.K_e)
        self._q_cur = np.zeros(self.K_e)
        self._lat = np.zeros((self.K_e, 3))
        self._hf_prev = 1.0
        self._hf_cur = 1.0
        self._draw_channel()
        return self.observe()

    def peek(self, action: np.ndarray) -> StepReport:
        """Evaluate ``action`` on the pending step without advancing."""
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        cfg = self.cfg
        alloc = decode_action(action, self.K_e, cfg, self.profiles)
        N = self._N_cur
        g = N * alloc.b * cfg.F
        G = g.sum(axis=1)
        if cfg.noise_model == "psd":
            noise = cfg.noise_psd * alloc.B
        else:
            noise = np.full(self.K_e, cfg.noise_psd)
        with np.errstate(divide="ignore", invalid="ignore"):
            snr = cfg.P * self._h * self.d ** (-cfg.alpha) / (cfg.interference + noise)
            rate = np.where(alloc.B > 0, alloc.B * np.log2(1.0 + snr), 0.0)
        eff_rate = rate * (1.0 - cfg.delta_R_frac)
        eff_f = alloc.f * (1.0 - cfg.delta_f_frac)
        sat = 2.0 * cfg.T_th
        work = g @ np.asarray(cfg.cycles)
        with np.errstate(divide="ignore", invalid="ignore"):
            T_d = np.where(G == 0, 0.0, np.where(eff_rate > 0, G / (cfg.omega * eff_rate), sat))
            T_r = np.where(work == 0, 0.0,
                           np.where(eff_f > 0, work / (cfg.effective_render_scale * eff_f), sat))
        infeasible = ((G > 0) & (eff_rate <= 0)) | ((work > 0) & (eff_f <= 0))
        T = T_d + T_r
        weights = np.arange(1, 4) * N / cfg.N
        q = (1.0 - T / cfg.T_th) * (weights * np.log1p(alloc.b / self._b_th)).sum(axis=1)
        avg = (self._qoe_sum + q) / (self.t + 1)
        hf = hfqoe(avg)
        r = reward(q, hf, cfg)
        return StepReport(
            step=self.t, levels=self.spec.levels, N=N.copy(), b=alloc.b, g=g, G=G,
            B=alloc.B, f=alloc.f, rate=rate, T_d=T_d, T_r=T_r, T=T, qoe=q, hfqoe=hf, reward=r,
            qoe_penalized=q < cfg.qoe_th, hfqoe_penalized=hf < cfg.hfqoe_th, infeasible=infeasible,
        )

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, StepReport]:
        rep = self.peek(action)
        self._qoe_sum += rep.qoe
        self.t += 1
        self._N_prev, self._q_prev = self._N_cur, self._q_cur
        self._N_cur = self._attention(self.t)
        self._q_cur = rep.qoe.copy()
        self._lat = np.column_stack([rep.T_d, rep.T_r, rep.T])
        self._hf_prev, self._hf_cur = self._hf_cur, rep.hfqoe
        self.done = self.t >= self.cfg.episode_len
        self._draw_channel()
        return self.observe(), rep.reward, self.done, rep


def level_tuple_code(levels: Sequence[str]) -> str:
    return "".join(lv[0] for lv in levels)

