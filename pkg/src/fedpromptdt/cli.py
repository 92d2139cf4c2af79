"""Command-line driver: gen-data, train, eval, sweep.

Exit codes: 0 success, 2 usage or configuration error, 3 data or
checkpoint integrity error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .behavior import collect_dataset
from .config import ConfigError, RunConfig, build_config, load_config
from .container import IntegrityError
from .env import EnvSpec, gaze_seed
from .evaluation import (
    AXES,
    BehaviorMix,
    DTAgent,
    evaluate_suite,
    make_env_split,
    sweep,
    write_episode_csv,
    write_index_csv,
    write_summary_json,
    write_sweep_csv,
)
from .fedavg import FederatedError, train_federated
from .gaze import ingest_gaze_csv
from .model import load_checkpoint
from .trajectory import load_shard, save_shard, shard_checksum

log = logging.getLogger("fedpromptdt")

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY = 0, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def resolve_config(path: str | None) -> RunConfig:
    return load_config(path) if path else build_config({})


def run_seed(args, cfg: RunConfig) -> int:
    return cfg.fl.seed if args.seed is None else int(args.seed)


def write_run_info(out: Path, cfg: RunConfig, seed: int, command: str, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    info = {"command": command, "seed": seed, "version": __version__, "torch": torch.__version__,
            "numpy": np.__version__, **(extra or {})}
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def gaze_provider(cfg: RunConfig):
    """Map each user of an env onto one of the CSV traces in ``data.gaze_csv_dir``."""
    if not cfg.data.gaze_csv_dir:
        return None
    files = sorted(Path(cfg.data.gaze_csv_dir).glob("*.csv"))
    if not files:
        raise ConfigError(f"no gaze CSV files in {cfg.data.gaze_csv_dir}")
    cache = {}

    def provide(spec: EnvSpec):
        out = []
        for k in range(spec.K_e):
            f = files[gaze_seed(spec.seed, k) % len(files)]
            if f not in cache:
                cache[f] = ingest_gaze_csv(f)
            out.append(cache[f])
        return out

    return provide


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, fl=dataclasses.replace(cfg.fl, seed=seed))


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config)
    seed = run_seed(args, cfg)
    cfg = with_seed(cfg, seed)
    out = Path(args.out)
    split = make_env_split(cfg.data, cfg.system.E, seed)
    provider = gaze_provider(cfg)
    shards = []
    for mec, specs in enumerate(split.train):
        shard = collect_dataset(cfg.system, specs, cfg.data.policy_mix, cfg.data.episodes_per_env, mec,
                                cfg.data.hillclimb_iters, cfg.data.hillclimb_sigma, provider)
        name = f"mec_{mec}.shard"
        digest = save_shard(shard, out / name)
        shards.append({"mec_id": mec, "file": name, "checksum": digest, "envs": len(specs),
                       "trajectories": shard.n_trajectories, "samples": shard.n_samples,
                       "summary": shard.summary()})
        log.info("MEC %d: %d envs, %d samples -> %s", mec, len(specs), shard.n_samples, name)
    manifest = {
        "version": __version__,
        "seed": seed,
        "env_count": sum(s["envs"] for s in shards),
        "shards": shards,
        "heldout": [{**s.to_dict(), "mec_id": m} for s, m in zip(split.heldout, split.heldout_mec)],
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_run_info(out, cfg, seed, "gen-data")
    return EXIT_OK


def read_manifest(data_dir: Path) -> dict:
    p = data_dir / MANIFEST
    if not p.is_file():
        raise UsageError(f"no {MANIFEST} in {data_dir}")
    return json.loads(p.read_text())


def load_shards(data_dir: Path, manifest: dict) -> list:
    shards = []
    for entry in manifest["shards"]:
        p = data_dir / entry["file"]
        if not p.is_file():
            raise UsageError(f"missing shard {p}")
        shard = load_shard(p)
        meta_sum = entry.get("checksum")
        if meta_sum and shard_checksum(p) != meta_sum:
            raise IntegrityError(f"{p}: checksum differs from manifest")
        shards.append(shard)
    return shards


def cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    seed = run_seed(args, cfg)
    cfg = with_seed(cfg, seed)
    if not args.data:
        raise UsageError("train needs --data")
    data_dir = Path(args.data)
    manifest = read_manifest(data_dir)
    shards = load_shards(data_dir, manifest)
    out = Path(args.out)
    write_run_info(out, cfg, seed, "train", {"data": str(data_dir)})
    res = train_federated(cfg.fl, cfg.model, shards, out_dir=out, resume=not args.no_resume)
    final = {"rounds": cfg.fl.rounds, "checkpoint": f"checkpoints/round_{cfg.fl.rounds:04d}.ckpt"}
    ck = load_checkpoint(out / final["checkpoint"], expected=cfg.model)
    final["checksum"] = ck.checksum
    (out / "final.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    log.info("trained %d rounds (this run: %d); final checkpoint %s", cfg.fl.rounds, len(res.history),
             final["checkpoint"])
    return EXIT_OK


def eval_envs(args, cfg: RunConfig, seed: int) -> tuple[list[EnvSpec], list[int]]:
    if args.data:
        manifest = read_manifest(Path(args.data))
        specs = [EnvSpec.from_dict(d) for d in manifest["heldout"]]
        return specs, [d["mec_id"] for d in manifest["heldout"]]
    split = make_env_split(cfg.data, cfg.system.E, seed)
    return split.heldout, split.heldout_mec


def load_agent(args, cfg: RunConfig) -> DTAgent:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    p = Path(args.checkpoint)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    ck = load_checkpoint(p, expected=cfg.model)
    return DTAgent(ck.model(), cfg.fl.L_tr, cfg.fl.L_pr)


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config)
    seed = run_seed(args, cfg)
    agent = load_agent(args, cfg)
    specs, mecs = eval_envs(args, cfg, seed)
    out = Path(args.out)
    write_run_info(out, cfg, seed, "eval", {"checkpoint": str(args.checkpoint)})
    provider = gaze_provider(cfg)
    methods = [agent]
    if args.behavior:
        methods.append(BehaviorMix(cfg.data.policy_mix, cfg.data.hillclimb_iters, cfg.data.hillclimb_sigma))
    summaries = {}
    for m in methods:
        res = evaluate_suite(m, cfg.system, specs, cfg.eval, mecs, trace_provider=provider)
        write_episode_csv(res.records, out / f"episodes_{m.name}.csv")
        write_index_csv(res.records, out / f"episodes_{m.name}_index.csv")
        summaries[m.name] = res.summary
        log.info("%s: EP %.3f (%.3f)", m.name, res.summary["EP"]["mean"], res.summary["EP"]["std"])
    write_summary_json(summaries, out / "summary.json")
    return EXIT_OK


def parse_grid(text: str | None) -> list[float] | None:
    if text is None:
        return None
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise UsageError("empty --grid")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"bad --grid value: {exc}") from exc


def cmd_sweep(args) -> int:
    cfg = resolve_config(args.config)
    seed = run_seed(args, cfg)
    grid = parse_grid(args.grid)
    agent = load_agent(args, cfg)
    specs, mecs = eval_envs(args, cfg, seed)
    out = Path(args.out)
    write_run_info(out, cfg, seed, "sweep", {"checkpoint": str(args.checkpoint), "axis": args.axis})
    rows = sweep(agent, cfg.system, specs, args.axis, grid, cfg.eval, mecs, gaze_provider(cfg))
    write_sweep_csv(rows, out / f"sweep_{args.axis}.csv")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpromptdt", description="Federated prompt decision transformer toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="run seed (default: fl.seed from the config)")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="collect behaviour datasets, one shard per MEC")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="federated training")
    common(t)
    t.add_argument("--data", help="directory written by gen-data")
    t.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out environments")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="gen-data directory whose held-out envs to use")
    e.add_argument("--behavior", action="store_true", help="also evaluate the behaviour-policy mix")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="evaluate along one parameter axis")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--grid", help="comma-separated values (default grid when omitted)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except FederatedError as exc:
        if isinstance(exc.__cause__, IntegrityError):
            print(f"integrity error: {exc}", file=sys.stderr)
            return EXIT_INTEGRITY
        raise


if __name__ == "__main__":
    sys.exit(main())
