"""Shared builders for model-level tests."""
import numpy as np
import torch

from fedpromptdt.config import ModelConfig
from fedpromptdt.model import PromptDT, make_batch
from fedpromptdt.trajectory import Prompt


def tiny_config(K_max=2, embed_dim=16, layers=2, dropout=0.0, **kw):
    return ModelConfig(embed_dim=embed_dim, layers=layers, dropout=dropout, state_dim=12 * K_max + 2,
                       action_dim=5 * K_max, max_timestep=kw.pop("max_timestep", 20), **kw)


def tiny_model(cfg=None, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return PromptDT(cfg or tiny_config()).to(dtype).eval()


def random_prompt(rng, cfg, L_pr):
    return Prompt(rng.normal(size=L_pr), rng.normal(size=(L_pr, cfg.state_dim)),
                  rng.uniform(size=(L_pr, cfg.action_dim)), np.arange(L_pr))


def random_batch(rng, cfg, B=3, L_tr=4, L_pr=2, pad=None, dtype=torch.float64):
    R = rng.normal(size=(B, L_tr)) * 50
    S = rng.normal(size=(B, L_tr, cfg.state_dim))
    A = rng.uniform(size=(B, L_tr, cfg.action_dim))
    T = np.tile(np.arange(L_tr), (B, 1)) + rng.integers(0, 5, size=(B, 1))
    M = np.ones((B, L_tr), dtype=np.int64)
    if pad is not None:
        for b, p in enumerate(pad):
            M[b, :p] = 0
    prompts = [random_prompt(rng, cfg, L_pr) for _ in range(B)] if L_pr else None
    return make_batch(R, S, A, T, M, prompts, dtype)


def tiny_shards(E=2, K_max=2, episode_len=12, episodes=4, seed=0):
    from fedpromptdt.behavior import collect_dataset
    from fedpromptdt.config import SystemConfig
    from fedpromptdt.env import EnvSpec

    sys_cfg = SystemConfig(E=E, K_max=K_max, episode_len=episode_len)
    levels = [("premium",), ("standard", "advanced"), ("advanced", "advanced"), ("standard",)]
    shards = []
    for e in range(E):
        specs = [EnvSpec(f"m{e}-{i}", levels[(e + i) % len(levels)], seed * 100 + e * 10 + i) for i in range(2)]
        shards.append(collect_dataset(sys_cfg, specs, {"random": 0.5, "proportional": 0.5}, episodes, mec_id=e))
    return sys_cfg, shards
