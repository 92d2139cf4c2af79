import math

import numpy as np
import pytest
import torch

from fedpromptdt.config import ModelConfig, SystemConfig
from fedpromptdt.container import IntegrityError
from fedpromptdt.model import (
    ConfigMismatchError,
    causal_attention,
    grad,
    load_checkpoint,
    loss_fn,
    make_batch,
    masked_mse,
    predict_next_action,
    save_checkpoint,
)
from fedpromptdt.trajectory import build_execution_prompt

from helpers import random_batch, random_prompt, tiny_config, tiny_model


# ---- attention -------------------------------------------------------------


def test_single_token_returns_value():
    q, k, v = torch.randn(3, 1, 1, 8, dtype=torch.float64).unbind(0)
    assert torch.equal(causal_attention(q, k, v), v)


def test_three_token_attention_matches_hand_rolled():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(1, 3, 4, dtype=torch.float64, generator=g) for _ in range(3))
    out = causal_attention(q, k, v)[0]
    d = 4
    for i in range(3):
        scores = [sum(q[0, i, c].item() * k[0, j, c].item() for c in range(d)) / math.sqrt(d) for j in range(i + 1)]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        expect = [sum(w[j] / z * v[0, j, c].item() for j in range(i + 1)) for c in range(d)]
        assert out[i].tolist() == pytest.approx(expect, abs=1e-10)


def test_attention_key_mask_excludes_padding():
    q, k, v = torch.randn(3, 1, 4, 5, dtype=torch.float64).unbind(0)
    mask = torch.tensor([[0, 1, 1, 1]])
    full = causal_attention(q, k, v, mask)
    sub = causal_attention(q[:, 1:], k[:, 1:], v[:, 1:])
    assert torch.allclose(full[:, 1:], sub, atol=1e-14)
    assert torch.equal(full[:, 0], v[:, 0])  # padded query only sees itself


def test_position_zero_ignores_later_tokens():
    q, k, v = torch.randn(3, 1, 5, 4, dtype=torch.float64).unbind(0)
    out1 = causal_attention(q, k, v)
    k2, v2 = k.clone(), v.clone()
    k2[:, 1:] += 10
    v2[:, 1:] -= 10
    assert torch.equal(causal_attention(q, k2, v2)[:, 0], out1[:, 0])


# ---- embedding and forward -------------------------------------------------


def test_token_counts_reference_setting():
    sys_cfg = SystemConfig()
    cfg = ModelConfig.for_system(sys_cfg, embed_dim=16, layers=1)
    assert (cfg.state_dim, cfg.action_dim) == (98, 40)
    m = tiny_model(cfg)
    batch = random_batch(np.random.default_rng(0), cfg, B=2, L_tr=10, L_pr=5)
    tokens, mask = m.embed(batch)
    assert tokens.shape == (2, 45, 16) and mask.shape == (2, 45)
    assert batch.n_tokens == 45
    assert m(batch).shape == (2, 15, 40)


def test_embedding_interleaves_and_shares_timestep():
    cfg = tiny_config()
    m = tiny_model(cfg)
    rng = np.random.default_rng(1)
    b = random_batch(rng, cfg, B=1, L_tr=2, L_pr=0)
    # same (R, S, A) at both steps, different timesteps
    b.rtg[:, 1] = b.rtg[:, 0]
    b.states[:, 1] = b.states[:, 0]
    b.actions[:, 1] = b.actions[:, 0]
    b.timesteps[:] = torch.tensor([[3, 7]])
    raw, _ = m.embed(b, normalize=False)
    dt = m.embed_timestep.weight[7] - m.embed_timestep.weight[3]
    for j in range(3):
        assert torch.allclose(raw[0, 3 + j] - raw[0, j], dt, atol=1e-14)
    r0 = m.embed_return(b.rtg[0, :1] / cfg.rtg_scale) + m.embed_timestep.weight[3]
    s0 = m.embed_state(b.states[0, :1]) + m.embed_timestep.weight[3]
    assert torch.allclose(raw[0, 0], r0[0]) and torch.allclose(raw[0, 1], s0[0])


def test_prompt_tokens_come_first():
    cfg = tiny_config()
    m = tiny_model(cfg)
    rng = np.random.default_rng(2)
    b = random_batch(rng, cfg, B=1, L_tr=3, L_pr=2)
    raw, _ = m.embed(b, normalize=False)
    pr = m.embed_return(b.prompt_rtg[0, 0:1] / cfg.rtg_scale) + m.embed_timestep(b.prompt_timesteps[0, 0:1])
    assert torch.allclose(raw[0, 0], pr[0])


def test_zero_inputs_and_weights_give_zero_tokens():
    cfg = tiny_config()
    m = tiny_model(cfg)
    for p in m.parameters():
        torch.nn.init.zeros_(p)
    b = random_batch(np.random.default_rng(0), cfg, B=1, L_tr=3, L_pr=2)
    for t in (b.rtg, b.states, b.actions, b.prompt_rtg, b.prompt_states, b.prompt_actions):
        t.zero_()
    tokens, _ = m.embed(b)
    assert torch.all(tokens == 0)


def test_outputs_in_unit_interval_and_eval_deterministic():
    cfg = tiny_config(dropout=0.3)
    m = tiny_model(cfg)
    b = random_batch(np.random.default_rng(3), cfg)
    out = m(b)
    assert torch.all((out >= 0) & (out <= 1))
    assert torch.equal(out, m(b))
    m.train()
    torch.manual_seed(0)
    o1 = m(b)
    o2 = m(b)
    assert not torch.equal(o1, o2)


def test_causality_bitwise():
    cfg = tiny_config()
    m = tiny_model(cfg)
    rng = np.random.default_rng(4)
    b = random_batch(rng, cfg, B=1, L_tr=6, L_pr=2)
    base = m(b)
    for p in range(2, 8):  # step index in the full (prompt + context) sequence
        b2 = random_batch(np.random.default_rng(5), cfg, B=1, L_tr=6, L_pr=2)
        for f in ("rtg", "states", "actions", "timesteps"):
            src = getattr(b, f).clone()
            src[:, p - 2 + 1:] = getattr(b2, f)[:, p - 2 + 1:]
            setattr(b2, f, src)
        for f in ("prompt_rtg", "prompt_states", "prompt_actions", "prompt_timesteps"):
            setattr(b2, f, getattr(b, f).clone())
        out = m(b2)
        assert torch.equal(out[:, : p + 1], base[:, : p + 1])


def test_left_padding_does_not_change_valid_outputs():
    cfg = tiny_config()
    m = tiny_model(cfg)
    rng = np.random.default_rng(6)
    b = random_batch(rng, cfg, B=1, L_tr=5, L_pr=2, pad=[2])
    out = m(b)
    b2 = make_batch(b.rtg[:, 2:, 0].numpy(), b.states[:, 2:].numpy(), b.actions[:, 2:].numpy(),
                    b.timesteps[:, 2:].numpy(), np.ones((1, 3)), None, torch.float64)
    for f in ("prompt_rtg", "prompt_states", "prompt_actions", "prompt_timesteps", "prompt_mask"):
        setattr(b2, f, getattr(b, f))
    assert torch.allclose(out[:, 4:], m(b2)[:, 2:], atol=1e-12)


# ---- loss and gradients ----------------------------------------------------


def test_mse_examples():
    t = torch.rand(2, 3, 4, dtype=torch.float64)
    m = torch.ones(2, 3)
    assert masked_mse(t, t, m).item() == 0.0
    assert masked_mse(t + 0.25, t, m).item() == pytest.approx(0.0625, abs=1e-15)
    with pytest.raises(ValueError):
        masked_mse(t, t[:, :2], m)


def test_mse_matches_bruteforce_with_mask(rng):
    p = rng.uniform(size=(3, 5, 4))
    t = rng.uniform(size=(3, 5, 4))
    m = (rng.uniform(size=(3, 5)) > 0.3).astype(float)
    vals = [(p[i, j, k] - t[i, j, k]) ** 2 for i in range(3) for j in range(5) for k in range(4) if m[i, j]]
    got = masked_mse(torch.tensor(p), torch.tensor(t), torch.tensor(m)).item()
    assert got == pytest.approx(sum(vals) / len(vals), rel=1e-13)


def finite_difference(model, batch, h=1e-5):
    out = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn(model, batch).item()
                flat[i] = old - h
                dn = loss_fn(model, batch).item()
                flat[i] = old
                gflat[i] = (up - dn) / (2 * h)
            out[name] = g
    return out


def test_gradients_match_finite_differences():
    cfg = tiny_config(K_max=1, embed_dim=8, layers=1, max_timestep=8)
    m = tiny_model(cfg, seed=3)
    b = random_batch(np.random.default_rng(7), cfg, B=2, L_tr=3, L_pr=2, pad=[1, 0])
    analytic = grad(m, b)
    numeric = finite_difference(m, b)
    for name in analytic:
        a, n = analytic[name], numeric[name]
        rel = (a - n).norm() / max((a.norm() + n.norm()).item(), 1e-12)
        assert rel < 1e-4, name


def test_zero_loss_gives_zero_gradients():
    cfg = tiny_config()
    m = tiny_model(cfg)
    b = random_batch(np.random.default_rng(0), cfg)
    with torch.no_grad():
        pred = m(b)
    n_pr = b.prompt_actions.shape[1]
    b.prompt_actions = pred[:, :n_pr].clone()
    b.actions = pred[:, n_pr:].clone()
    # actions are also inputs; the new inputs change predictions, so solve the fixed point by iterating
    for _ in range(50):
        with torch.no_grad():
            pred = m(b)
        b.prompt_actions, b.actions = pred[:, :n_pr].clone(), pred[:, n_pr:].clone()
    assert loss_fn(m, b).item() < 1e-24
    g = grad(m, b)
    assert max(v.abs().max().item() for v in g.values()) < 1e-10


def test_masked_target_has_no_gradient_influence():
    cfg = tiny_config()
    m = tiny_model(cfg)
    b = random_batch(np.random.default_rng(8), cfg, B=2, L_tr=4, L_pr=2, pad=[2, 0])
    g1 = grad(m, b)
    b.actions[0, 0] = 0.123  # padded step: not a valid target nor a visible input
    g2 = grad(m, b)
    for n in g1:
        assert torch.allclose(g1[n], g2[n], atol=1e-15)


def test_grad_rejects_nonfinite_loss():
    cfg = tiny_config()
    m = tiny_model(cfg)
    b = random_batch(np.random.default_rng(0), cfg)
    b.states[0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        grad(m, b)


# ---- prediction --------------------------------------------------------------


def test_predict_truncates_context():
    cfg = tiny_config()
    m = tiny_model(cfg)
    rng = np.random.default_rng(9)
    prompt = random_prompt(rng, cfg, 3)
    R = rng.normal(size=50)
    S = rng.normal(size=(50, cfg.state_dim))
    A = rng.uniform(size=(50, cfg.action_dim))
    A[-1] = 0
    T = np.minimum(np.arange(50), cfg.max_timestep - 1)
    long = predict_next_action(m, prompt, R, S, A, T, 10)
    short = predict_next_action(m, prompt, R[-10:], S[-10:], A[-10:], T[-10:], 10)
    assert np.array_equal(long, short)
    assert long.shape == (cfg.action_dim,) and np.all((long >= 0) & (long <= 1))
    with pytest.raises(ValueError):
        predict_next_action(m, prompt, [], np.zeros((0, 26)), np.zeros((0, 10)), [], 10)


def test_predict_reproducible_with_length_one_context():
    cfg = tiny_config(dropout=0.2)
    s0 = np.linspace(0, 1, cfg.state_dim)
    prompt = build_execution_prompt(900, s0, 2, 2, 5)
    outs = [predict_next_action(tiny_model(cfg, seed=11), prompt, [900.0], s0[None], np.zeros((1, 10)), [0], 10)
            for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


# ---- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    m = tiny_model(cfg, dtype=torch.float32)
    opt = torch.optim.AdamW(m.parameters(), lr=1e-3)
    b = random_batch(np.random.default_rng(0), cfg, dtype=torch.float32)
    loss_fn(m, b).backward()
    opt.step()
    p = tmp_path / "m.ckpt"
    digest = save_checkpoint(p, cfg, m.state_dict(), 7, {"0": opt.state_dict()})
    ck = load_checkpoint(p, expected=cfg)
    assert ck.round == 7 and ck.checksum == digest and ck.config == cfg
    for n, v in m.state_dict().items():
        assert torch.equal(ck.params[n], v)
    opt2 = torch.optim.AdamW(ck.model().parameters(), lr=1e-3)
    opt2.load_state_dict(ck.optimizer_states["0"])
    st1, st2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    assert all(torch.equal(st1[i]["exp_avg"], st2[i]["exp_avg"]) for i in st1)
    assert torch.equal(ck.model().eval()(b), m.eval()(b))


def test_checkpoint_rejects_mismatched_config(tmp_path):
    cfg = tiny_config()
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, cfg, tiny_model(cfg).state_dict(), 0)
    with pytest.raises(ConfigMismatchError, match="state_dim: expected 98"):
        load_checkpoint(p, expected=ModelConfig.for_system(SystemConfig()))
    assert isinstance(ConfigMismatchError("x"), IntegrityError)


def test_checkpoint_corruption_detected(tmp_path):
    cfg = tiny_config()
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, cfg, tiny_model(cfg).state_dict(), 0)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0x55
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(p)
