"""Command-line entry point: ``ladder-rtb <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, agent, encoder, harness, qnet
from .simenv import World


class UsageError(Exception):
    pass


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS defaults let the flags appear before or after the subcommand
    # without the subparser overwriting values given to the main parser.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    p.add_argument(
        "--deterministic",
        action="store_true",
        default=argparse.SUPPRESS,
        help="sequential serve/observe/train loop (bit-reproducible)",
    )
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(
        prog="ladder-rtb",
        description="Desk-scale RTB simulator, Q-learning bidder and A/B harness.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("run", parents=[common], help="A/B experiment: agent arm against ECPM arm")
    p.add_argument("--preset", choices=sorted(harness.PRESETS), default="quick",
                   help="built-in config used when --config is absent (default: quick)")
    p.add_argument("--days", type=int, help="override the number of days")

    p = sub.add_parser("train", parents=[common], help="agent-only run; writes a checkpoint")
    p.add_argument("--preset", choices=sorted(harness.PRESETS), default="quick")
    p.add_argument("--days", type=int)
    p.add_argument("--max-steps", type=int, help="stop training after this many steps")

    p = sub.add_parser("replay", parents=[common], help="recompute metrics from a JSONL trace")
    p.add_argument("trace", help="trace.jsonl written by run")

    p = sub.add_parser("export-embeddings", parents=[common], help="hidden-layer outputs as CSV")
    p.add_argument("checkpoint", help="checkpoint written by train or run")
    p.add_argument("--count", type=int, default=1000, help="number of requests to embed")
    p.add_argument("--preset", choices=sorted(harness.PRESETS), default="quick")

    sub.add_parser("validate-config", parents=[common], help="check a config against the schema")

    p = sub.add_parser("bench", parents=[common], help="sparse vs dense forward timings as CSV")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--text-length", type=int, default=encoder.MAX_LEN)
    return parser


def _experiment(args) -> harness.ExperimentConfig:
    path = getattr(args, "config", None)
    if path is not None:
        cfg = harness.load_config(path)
    else:
        cfg = harness.PRESETS[getattr(args, "preset", "quick")]()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "days", None) is not None:
        if args.days < 1:
            raise UsageError("--days must be >= 1")
        cfg.days = args.days
    return cfg


def _out_dir(args, cfg: Optional[harness.ExperimentConfig] = None) -> Path:
    out = Path(getattr(args, "out", None) or (cfg.output_dir if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    deterministic = getattr(args, "deterministic", False)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    res = harness.run_experiment(cfg, out, deterministic=deterministic)
    res.agent.save(out / "agent.ckpt")
    print(f"metrics: {res.metrics_path}")
    for snap in res.book.rows():
        print(f"day {snap.day} {snap.arm:8s} profit {snap.row()[7]:>10s} impressions {snap.impressions}")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    ag = agent.LadderAgent(cfg.agent, seed=cfg.seed)
    world = World(cfg.world, seed=cfg.seed, max_action=cfg.agent.max_action)
    base = cfg.baseline.build(cfg.agent.max_action, cfg.world.day_length)
    stats = agent.run(
        ag, world, cfg.days, getattr(args, "deterministic", False), base, args.max_steps
    )
    ag.save(out / "agent.ckpt")
    ag.write_train_log(out / "train_log.csv")
    print(f"checkpoint: {out / 'agent.ckpt'} after {stats.get('train_steps', 0)} training steps")
    return 0


def cmd_replay(args) -> int:
    out = _out_dir(args)
    target = out / "metrics_replay.csv"
    harness.replay_trace(args.trace, target)
    print(f"metrics: {target}")
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg)
    params, _ = qnet.load_checkpoint(args.checkpoint)
    world = World(cfg.world, seed=cfg.seed, max_action=params.spec.n_actions - 1)
    requests = []
    while len(requests) < args.count:
        if world.is_terminal():
            world.reset()
        requests.append(world.next_auction())
    path = out / "embeddings.csv"
    n = harness.export_embeddings(params, requests, path, world.catalog)
    print(f"embeddings: {path} ({n} rows)")
    return 0


def cmd_validate_config(args) -> int:
    if getattr(args, "config", None) is None:
        raise UsageError("validate-config needs --config <path>")
    harness.load_config(args.config)
    print(f"{args.config}: ok")
    return 0


def bench_rows(batch: int, repeats: int, text_length: int, seed: int = 0) -> list[tuple[str, float]]:
    """Best-of-``repeats`` seconds per batch for each forward mode."""
    rng = np.random.default_rng(seed)
    params = qnet.init(201, rng)
    codes = np.full((batch, encoder.MAX_LEN), encoder.NULL, dtype=np.int16)
    codes[:, :text_length] = rng.integers(0, encoder.ALPHABET_SIZE, size=(batch, text_length))
    dense = np.stack([encoder.codes_to_dense(c) for c in codes])
    timings = {}
    for mode, fn, x in (
        ("dense", qnet.forward, dense),
        ("sparse", qnet.forward_codes, codes),
        ("sparse_f32", qnet.forward_codes, codes),
    ):
        p = params.astype(np.float32) if mode == "sparse_f32" else params
        fn(p, x)  # warm-up, compiles the kernels
        best = float("inf")
        for _ in range(repeats):
            t = time.perf_counter()
            fn(p, x)
            best = min(best, time.perf_counter() - t)
        timings[mode] = best
    return list(timings.items())


def cmd_bench(args) -> int:
    if args.batch < 1 or args.repeats < 1 or not 0 <= args.text_length <= encoder.MAX_LEN:
        raise UsageError("--batch and --repeats must be >= 1, --text-length within [0, 600]")
    rows = bench_rows(args.batch, args.repeats, args.text_length, getattr(args, "seed", 0))
    streams = [sys.stdout]
    fh = None
    if getattr(args, "out", None):
        fh = open(_out_dir(args) / "bench.csv", "w", newline="")
        streams.append(fh)
    try:
        for s in streams:
            w = csv.writer(s, lineterminator="\n")
            w.writerow(["mode", "seconds"])
            for mode, sec in rows:
                w.writerow([mode, f"{sec:.6f}"])
    finally:
        if fh:
            fh.close()
    return 0


COMMANDS = {
    "run": cmd_run,
    "train": cmd_train,
    "replay": cmd_replay,
    "export-embeddings": cmd_export_embeddings,
    "validate-config": cmd_validate_config,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, harness.ConfigError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"ladder-rtb {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except qnet.Divergence as exc:
        print(f"ladder-rtb {args.command}: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
