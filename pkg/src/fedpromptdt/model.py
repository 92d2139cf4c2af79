"""Prompt-conditioned decision transformer.

Each timestep contributes three tokens (reward-to-go, state, action). The
return, state and action projections plus a timestep embedding (added to
all three tokens of a step) are followed by layer normalization, a stack
of pre-LN causal transformer blocks with a single attention head, a final
layer norm and a sigmoid action head read out at every state token.
Prompt steps are prepended to the context steps and share the same
embedding layers.
"""
from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .container import IntegrityError, load_container, save_container
from .trajectory import Prompt

CKPT_FORMAT = "fedpromptdt-checkpoint"
CKPT_VERSION = 1


class ConfigMismatchError(IntegrityError):
    pass


def causal_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     key_mask: torch.Tensor | None = None, dropout: nn.Module | None = None) -> torch.Tensor:
    """Masked softmax attention over positions ``j <= i``.

    ``key_mask`` (B, T) marks valid keys; a position always attends to
    itself so padded queries stay finite.
    """
    T = q.shape[-2]
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    allowed = torch.ones(T, T, dtype=torch.bool, device=q.device).tril()
    if key_mask is not None:
        eye = torch.eye(T, dtype=torch.bool, device=q.device)
        allowed = (allowed & key_mask[:, None, :].bool()) | eye
    scores = scores.masked_fill(~allowed, float("-inf"))
    w = torch.softmax(scores, dim=-1)
    if dropout is not None:
        w = dropout(w)
    return w @ v


class SelfAttention(nn.Module):
    def __init__(self, dim: int, dropout: float):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.resid_drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        y = causal_attention(self.q(x), self.k(x), self.v(x), key_mask, self.attn_drop)
        return self.resid_drop(self.proj(y))


class Block(nn.Module):
    def __init__(self, dim: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.ReLU(),
            nn.Linear(4 * dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.mlp(self.ln2(x))


@dataclass
class SequenceBatch:
    """Model input. Prompt fields are ``None`` for the prompt-free variant.

    Shapes: rtg (B, T, 1), states (B, T, state_dim), actions (B, T,
    action_dim), timesteps (B, T) long, mask (B, T) with 1 for real steps.
    """

    rtg: torch.Tensor
    states: torch.Tensor
    actions: torch.Tensor
    timesteps: torch.Tensor
    mask: torch.Tensor
    prompt_rtg: torch.Tensor | None = None
    prompt_states: torch.Tensor | None = None
    prompt_actions: torch.Tensor | None = None
    prompt_timesteps: torch.Tensor | None = None
    prompt_mask: torch.Tensor | None = None

    @property
    def has_prompt(self) -> bool:
        return self.prompt_rtg is not None

    def full(self) -> tuple[torch.Tensor, ...]:
        """Prompt and context concatenated along time."""
        if not self.has_prompt:
            return self.rtg, self.states, self.actions, self.timesteps, self.mask
        return (
            torch.cat([self.prompt_rtg, self.rtg], 1),
            torch.cat([self.prompt_states, self.states], 1),
            torch.cat([self.prompt_actions, self.actions], 1),
            torch.cat([self.prompt_timesteps, self.timesteps], 1),
            torch.cat([self.prompt_mask, self.mask], 1),
        )

    def targets(self) -> tuple[torch.Tensor, torch.Tensor]:
        _, _, a, _, m = self.full()
        return a, m

    @property
    def n_tokens(self) -> int:
        return 3 * self.full()[0].shape[1]


class PromptDT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.heads != 1:
            raise ValueError("only single-head attention is supported")
        self.cfg = cfg
        h = cfg.embed_dim
        self.embed_timestep = nn.Embedding(cfg.max_timestep, h)
        self.embed_return = nn.Linear(cfg.rtg_dim, h)
        self.embed_state = nn.Linear(cfg.state_dim, h)
        self.embed_action = nn.Linear(cfg.action_dim, h)
        self.embed_ln = nn.LayerNorm(h)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList([Block(h, cfg.dropout) for _ in range(cfg.layers)])
        self.ln_f = nn.LayerNorm(h)
        self.predict_action = nn.Linear(h, cfg.action_dim)
        self.apply(self._init)

    def _init(self, m: nn.Module) -> None:
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, 0.0, self.cfg.init_std)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def embed(self, batch: SequenceBatch, normalize: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """Interleaved (R, S, A) tokens (B, 3T, h) and their validity mask (B, 3T)."""
        rtg, states, actions, timesteps, mask = batch.full()
        B, T = timesteps.shape
        t_emb = self.embed_timestep(timesteps.clamp(0, self.cfg.max_timestep - 1))
        r = self.embed_return(rtg / self.cfg.rtg_scale) + t_emb
        s = self.embed_state(states) + t_emb
        a = self.embed_action(actions) + t_emb
        tokens = torch.stack([r, s, a], dim=2).reshape(B, 3 * T, -1)
        if normalize:
            tokens = self.embed_ln(tokens)
        return tokens, mask.repeat_interleave(3, dim=1)

    def forward(self, batch: SequenceBatch) -> torch.Tensor:
        """Action predictions (B, T_prompt + T_context, action_dim), one per state token."""
        x, tok_mask = self.embed(batch)
        x = self.drop(x)
        for blk in self.blocks:
            x = blk(x, tok_mask)
        x = self.ln_f(x)
        return torch.sigmoid(self.predict_action(x[:, 1::3]))


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over unmasked steps (and all action dimensions)."""
    if pred.shape != target.shape or pred.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
                         f"mask {tuple(mask.shape)}")
    m = mask.to(pred.dtype)[..., None]
    denom = m.sum() * pred.shape[-1]
    return ((pred - target) ** 2 * m).sum() / denom.clamp_min(1.0)


def loss_fn(model: PromptDT, batch: SequenceBatch) -> torch.Tensor:
    pred = model(batch)
    target, mask = batch.targets()
    return masked_mse(pred, target, mask)


def grad(model: PromptDT, batch: SequenceBatch) -> dict[str, torch.Tensor]:
    """Exact loss gradients for every named parameter (reverse-mode autodiff)."""
    for p in model.parameters():
        p.grad = None
    loss = loss_fn(model, batch)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    loss.backward()
    return {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in model.named_parameters()}


def build_model(cfg: ModelConfig, seed: int | None = None, dtype: torch.dtype = torch.float32) -> PromptDT:
    if seed is not None:
        torch.manual_seed(seed)
    return PromptDT(cfg).to(dtype)


def check_finite(params: Mapping[str, torch.Tensor]) -> None:
    for n, p in params.items():
        if not torch.all(torch.isfinite(p)):
            raise FloatingPointError(f"non-finite values in parameter {n}")


# --------------------------------------------------------------------------
# batching


def _t(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def prompt_tensors(prompts: list[Prompt], dtype=torch.float32) -> dict[str, torch.Tensor]:
    return {
        "prompt_rtg": _t(np.stack([p.rtg for p in prompts]), dtype)[..., None],
        "prompt_states": _t(np.stack([p.states for p in prompts]), dtype),
        "prompt_actions": _t(np.stack([p.actions for p in prompts]), dtype),
        "prompt_timesteps": _t(np.stack([p.timesteps for p in prompts]), torch.long),
        "prompt_mask": torch.ones(len(prompts), len(prompts[0]), dtype=torch.long),
    }


def make_batch(rtg, states, actions, timesteps, mask, prompts: list[Prompt] | None = None,
               dtype=torch.float32) -> SequenceBatch:
    kw = prompt_tensors(prompts, dtype) if prompts else {}
    return SequenceBatch(
        rtg=_t(rtg, dtype)[..., None],
        states=_t(states, dtype),
        actions=_t(actions, dtype),
        timesteps=_t(timesteps, torch.long),
        mask=_t(mask, torch.long),
        **kw,
    )


@torch.no_grad()
def predict_next_action(model: PromptDT, prompt: Prompt | None, rtg, states, actions, timesteps,
                        L_tr: int) -> np.ndarray:
    """Action for the last context step (whose action slot is a placeholder).

    The context is truncated to its most recent ``L_tr`` steps.
    """
    n = len(rtg)
    if n == 0:
        raise ValueError("empty context")
    sl = slice(max(0, n - L_tr), n)
    dtype = next(model.parameters()).dtype
    batch = make_batch(
        np.asarray(rtg, dtype=float)[None, sl],
        np.asarray(states, dtype=float)[None, sl],
        np.asarray(actions, dtype=float)[None, sl],
        np.asarray(timesteps)[None, sl],
        np.ones((1, len(range(n)[sl]))),
        [prompt] if prompt is not None else None,
        dtype,
    )
    was_training = model.training
    model.eval()
    try:
        out = model(batch)[0, -1]
    finally:
        model.train(was_training)
    return out.double().numpy()


# --------------------------------------------------------------------------
# checkpoints


def _flatten_optimizer(states: Mapping[str, Any] | None) -> tuple[dict, dict[str, np.ndarray]]:
    meta, arrays = {}, {}
    for client, sd in (states or {}).items():
        meta[client] = {"param_groups": sd["param_groups"], "state_keys": {}}
        for idx, st in sd["state"].items():
            meta[client]["state_keys"][str(idx)] = sorted(st)
            for key, val in st.items():
                arrays[f"opt/{client}/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return meta, arrays


def _unflatten_optimizer(meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> dict[str, Any]:
    out = {}
    for client, info in meta.items():
        state = {}
        for idx, keys in info["state_keys"].items():
            state[int(idx)] = {k: torch.from_numpy(np.array(arrays[f"opt/{client}/{idx}/{k}"])) for k in keys}
        out[client] = {"state": state, "param_groups": info["param_groups"]}
    return out


def params_digest(params: Mapping[str, torch.Tensor]) -> str:
    from .container import content_digest
    return content_digest({n: p.detach().cpu().numpy() for n, p in params.items()}, {})


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: Mapping[str, torch.Tensor], round_idx: int,
                    optimizer_states: Mapping[str, Any] | None = None, extra: Mapping[str, Any] | None = None) -> str:
    opt_meta, opt_arrays = _flatten_optimizer(optimizer_states)
    arrays = {f"param/{n}": p.detach().cpu().numpy() for n, p in params.items()}
    arrays.update(opt_arrays)
    meta = {
        "model_config": dataclasses.asdict(cfg),
        "round": int(round_idx),
        "param_names": list(params),
        "param_shapes": {n: list(p.shape) for n, p in params.items()},
        "optimizer": opt_meta,
        "params_digest": params_digest(params),
        "extra": dict(extra or {}),
    }
    return save_container(path, CKPT_FORMAT, CKPT_VERSION, meta, arrays)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, torch.Tensor]"
    round: int
    optimizer_states: dict[str, Any]
    checksum: str
    params_digest: str
    extra: dict[str, Any]

    def model(self, dtype: torch.dtype | None = None) -> PromptDT:
        m = PromptDT(self.config)
        first = next(iter(self.params.values()))
        m = m.to(dtype or first.dtype)
        m.load_state_dict(self.params)
        m.eval()
        return m


def dim_diff(expected: ModelConfig, found: ModelConfig) -> str:
    diffs = [f"{k}: expected {getattr(expected, k)}, checkpoint has {getattr(found, k)}"
             for k in ("state_dim", "action_dim", "embed_dim", "layers", "heads", "max_timestep")
             if getattr(expected, k) != getattr(found, k)]
    return "; ".join(diffs)


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    meta, arrays = load_container(path, CKPT_FORMAT, CKPT_VERSION)
    cfg = ModelConfig(**meta["model_config"])
    if expected is not None:
        diff = dim_diff(expected, cfg)
        if diff:
            raise ConfigMismatchError(f"{path}: model config mismatch ({diff})")
    params = OrderedDict(
        (n, torch.from_numpy(np.array(arrays[f"param/{n}"]))) for n in meta["param_names"]
    )
    for n, shape in meta["param_shapes"].items():
        if list(params[n].shape) != shape:
            raise IntegrityError(f"{path}: parameter {n} has shape {list(params[n].shape)}, expected {shape}")
    return Checkpoint(
        config=cfg,
        params=params,
        round=meta["round"],
        optimizer_states=_unflatten_optimizer(meta["optimizer"], arrays),
        checksum=meta["checksum"],
        params_digest=meta["params_digest"],
        extra=meta.get("extra", {}),
    )


def clone_params(params: Mapping[str, torch.Tensor]) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((n, p.detach().clone()) for n, p in params.items())
