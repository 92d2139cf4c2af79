"""Federated training: local prompt-conditioned updates and weighted averaging."""
from __future__ import annotations

import dataclasses
import json
import logging
import re
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .config import FLConfig, ModelConfig
from .model import (
    PromptDT,
    SequenceBatch,
    build_model,
    check_finite,
    clone_params,
    load_checkpoint,
    loss_fn,
    make_batch,
    save_checkpoint,
)
from .trajectory import DatasetShard, Trajectory, augment_state, sample_training_prompt, top1

log = logging.getLogger(__name__)

Params = "OrderedDict[str, torch.Tensor]"
CKPT_RE = re.compile(r"round_(\d+)\.ckpt$")


class FederatedError(RuntimeError):
    pass


def lr_at(round_idx: int, step: int, fl: FLConfig) -> float:
    if round_idx < 0 or step < 0:
        raise ValueError("round and step must be nonnegative")
    lr = fl.lr * (1.0 - fl.lr_decay) ** round_idx
    if step < fl.warmup_steps:
        lr *= (step + 1) / fl.warmup_steps
    return lr


# --------------------------------------------------------------------------
# client data


@dataclass
class EnvData:
    env_id: str
    levels: tuple[str, ...]
    trajs: list[Trajectory]
    aug_states: list[np.ndarray]
    rtgs: list[np.ndarray]
    top: Trajectory


def prepare_client(shard: DatasetShard, L_tr: int, L_pr: int, K_max: int, use_prompt: bool = True) -> list[EnvData]:
    """Per-environment training views of a shard.

    Environments whose trajectories are all shorter than ``max(L_tr, L_pr)``
    are skipped with a warning. Without prompts the user-info slots are zeroed.
    """
    need = max(L_tr, L_pr)
    out = []
    for env_id, trajs in shard.trajectories.items():
        ok = [t for t in trajs if len(t) >= need]
        if not ok:
            log.warning("MEC %d: skipping %s, no trajectory reaches length %d", shard.mec_id, env_id, need)
            continue
        levels = tuple(shard.env_specs[env_id].levels)
        info_levels = levels if use_prompt else ()
        out.append(EnvData(
            env_id=env_id,
            levels=levels,
            trajs=ok,
            aug_states=[augment_state(t.states, info_levels, K_max) for t in ok],
            rtgs=[t.rtg for t in ok],
            top=top1(ok),
        ))
    if not out:
        raise FederatedError(f"MEC {shard.mec_id}: no usable environment in shard")
    return out


def sample_batch(env: EnvData, batch_size: int, L_tr: int, L_pr: int, K_max: int, rng: np.random.Generator,
                 use_prompt: bool = True, dtype=torch.float32) -> SequenceBatch:
    """``batch_size`` windows of ``L_tr`` steps from one environment.

    Window starts are uniform in ``[1 - L_tr, L - L_tr]``; the part before
    step 0 is left-padded and masked out.
    """
    prompt = sample_training_prompt(env.top, L_pr, rng, env.levels, K_max) if use_prompt else None
    sd = env.aug_states[0].shape[1]
    ad = env.trajs[0].actions.shape[1]
    R = np.zeros((batch_size, L_tr))
    S = np.zeros((batch_size, L_tr, sd))
    A = np.zeros((batch_size, L_tr, ad))
    T = np.zeros((batch_size, L_tr), dtype=np.int64)
    M = np.zeros((batch_size, L_tr), dtype=np.int64)
    for b in range(batch_size):
        j = int(rng.integers(len(env.trajs)))
        tr = env.trajs[j]
        start = int(rng.integers(1 - L_tr, len(tr) - L_tr + 1))
        lo = max(start, 0)
        pad = lo - start
        sl = slice(lo, start + L_tr)
        R[b, pad:] = env.rtgs[j][sl]
        S[b, pad:] = env.aug_states[j][sl]
        A[b, pad:] = tr.actions[sl]
        T[b, pad:] = tr.timesteps[sl]
        M[b, pad:] = 1
    prompts = [prompt] * batch_size if prompt is not None else None
    return make_batch(R, S, A, T, M, prompts, dtype)


# --------------------------------------------------------------------------
# local training


@dataclass
class LocalResult:
    params: Params
    losses: list[float]
    optimizer_state: dict | None


def make_optimizer(model: PromptDT, fl: FLConfig, state: dict | None = None) -> torch.optim.AdamW:
    opt = torch.optim.AdamW(model.parameters(), lr=fl.lr, weight_decay=fl.weight_decay)
    if state:
        opt.load_state_dict(state)
    return opt


def local_training(
    global_params: Mapping[str, torch.Tensor],
    shard: DatasetShard | list[EnvData],
    fl: FLConfig,
    model_cfg: ModelConfig,
    rng: np.random.Generator,
    round_idx: int = 0,
    optimizer_state: dict | None = None,
    torch_seed: int | None = None,
    steps: int | None = None,
) -> LocalResult:
    """``local_epochs * local_iters`` AdamW steps starting from ``global_params``.

    Each step samples one environment uniformly, a top-1 prompt segment and
    a batch of context windows, then minimizes the masked MSE over prompt and
    context action predictions.
    """
    n_steps = fl.local_epochs * fl.local_iters if steps is None else steps
    if n_steps == 0:
        return LocalResult(clone_params(global_params), [], optimizer_state)
    envs = shard if isinstance(shard, list) else prepare_client(
        shard, fl.L_tr, fl.L_pr, _k_max(model_cfg), model_cfg.use_prompt)
    if torch_seed is not None:
        torch.manual_seed(torch_seed)
    dtype = next(iter(global_params.values())).dtype
    model = PromptDT(model_cfg).to(dtype)
    model.load_state_dict(global_params)
    model.train()
    opt = make_optimizer(model, fl, optimizer_state)
    losses = []
    for m in range(n_steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(round_idx, m, fl)
        env = envs[int(rng.integers(len(envs)))]
        batch = sample_batch(env, fl.batch_size, fl.L_tr, fl.L_pr, _k_max(model_cfg), rng,
                             model_cfg.use_prompt, dtype)
        opt.zero_grad(set_to_none=True)
        loss = loss_fn(model, batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at local step {m}")
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return LocalResult(clone_params(model.state_dict()), losses, opt.state_dict())


def _k_max(model_cfg: ModelConfig) -> int:
    return model_cfg.action_dim // 5


# --------------------------------------------------------------------------
# aggregation


def aggregate(locals_: Sequence[Mapping[str, torch.Tensor]], weights: Sequence[float]) -> Params:
    """Elementwise weighted mean, accumulated in 64-bit."""
    if not locals_:
        raise ValueError("nothing to aggregate")
    if len(weights) != len(locals_):
        raise ValueError(f"{len(weights)} weights for {len(locals_)} parameter sets")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
    names = list(locals_[0])
    for i, p in enumerate(locals_[1:], 1):
        if list(p) != names:
            raise ValueError(f"parameter set {i} has different names")
        for n in names:
            if p[n].shape != locals_[0][n].shape:
                raise ValueError(f"shape mismatch for {n}: {tuple(p[n].shape)} vs {tuple(locals_[0][n].shape)}")
    out = OrderedDict()
    for n in names:
        acc = torch.zeros(locals_[0][n].shape, dtype=torch.float64)
        for wi, p in zip(w, locals_):
            acc += float(wi) * p[n].detach().to(torch.float64)
        out[n] = acc.to(locals_[0][n].dtype)
    return out


# --------------------------------------------------------------------------
# orchestration


def client_rngs(seed: int, round_idx: int, client: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence([seed, round_idx, client])
    return np.random.default_rng(ss), int(ss.generate_state(1, np.uint64)[0] >> 1)


def checkpoint_path(out_dir: Path, round_idx: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"round_{round_idx:04d}.ckpt"


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    d = Path(out_dir) / "checkpoints"
    if not d.is_dir():
        return None
    found = [(int(m.group(1)), p) for p in d.iterdir() if (m := CKPT_RE.search(p.name))]
    return max(found)[1] if found else None


@dataclass
class FederatedResult:
    params: Params
    rounds_done: int
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_checksum: str | None = None


def train_federated(
    fl: FLConfig,
    model_cfg: ModelConfig,
    shards: Sequence[DatasetShard],
    out_dir: str | Path | None = None,
    resume: bool = True,
    stop_after: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> FederatedResult:
    """Synchronous FedAvg with full participation.

    With ``out_dir`` set, writes ``rounds.jsonl`` and checkpoints every
    ``checkpoint_every`` rounds and at the last round, and resumes from the
    newest checkpoint. ``stop_after`` ends the run early after that many
    rounds in total (used to simulate interruptions).
    """
    if len(shards) != fl.E:
        raise FederatedError(f"expected {fl.E} shards, got {len(shards)}")
    K_max = _k_max(model_cfg)
    clients = [prepare_client(s, fl.L_tr, fl.L_pr, K_max, model_cfg.use_prompt) for s in shards]
    n_e = np.array([s.n_samples for s in shards], dtype=np.float64)
    weights = n_e / n_e.sum()

    out = Path(out_dir) if out_dir is not None else None
    start = 0
    opt_states: dict[str, dict] = {}
    params = clone_params(build_model(model_cfg, seed=fl.seed, dtype=dtype).state_dict())
    ckpt = latest_checkpoint(out) if (out is not None and resume) else None
    if ckpt is not None:
        c = load_checkpoint(ckpt, expected=model_cfg)
        params, start, opt_states = c.params, c.round, c.optimizer_states
        log.info("resuming from %s (round %d)", ckpt, start)
    history: list[dict] = []
    written: list[Path] = []
    log_path = out / "rounds.jsonl" if out is not None else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if log_path.exists():
            kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["round"] < start]
        log_path.write_text("".join(ln + "\n" for ln in kept))
    extra = {"fl_config": dataclasses.asdict(fl), "n_e": n_e.tolist()}

    def save(r: int) -> str | None:
        if out is None:
            return None
        p = checkpoint_path(out, r)
        digest = save_checkpoint(p, model_cfg, params, r, opt_states, extra)
        written.append(p)
        return digest

    checksum = None
    if fl.rounds == 0:
        checksum = save(0)
    last = fl.rounds if stop_after is None else min(fl.rounds, stop_after)
    for r in range(start, last):
        t0 = time.perf_counter()
        results = []
        for e, client in enumerate(clients):
            rng, tseed = client_rngs(fl.seed, r, e)
            try:
                res = local_training(params, client, fl, model_cfg, rng, r, opt_states.get(str(e)), tseed)
                check_finite(res.params)
            except Exception as exc:
                raise FederatedError(f"round {r}: client {e} failed: {exc}") from exc
            results.append(res)
        params = aggregate([res.params for res in results], weights)
        for e, res in enumerate(results):
            if res.optimizer_state is not None:
                opt_states[str(e)] = res.optimizer_state
        client_loss = [float(np.mean(res.losses)) if res.losses else float("nan") for res in results]
        rec = {
            "round": r,
            "per_client_loss": client_loss,
            "global_loss": float(np.dot(weights, client_loss)),
            "lr": lr_at(r, max(fl.warmup_steps, 0), fl),
            "wall_time": time.perf_counter() - t0,
        }
        history.append(rec)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
        log.info("round %d: global loss %.5f", r, rec["global_loss"])
        done = r + 1
        if done == fl.rounds or (fl.checkpoint_every > 0 and done % fl.checkpoint_every == 0):
            checksum = save(done)
    return FederatedResult(params=params, rounds_done=max(start, last), history=history,
                           checkpoints=written, final_checksum=checksum)
