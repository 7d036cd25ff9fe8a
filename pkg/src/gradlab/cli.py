"""``gradlab`` command-line interface.

Subcommands::

    gradlab gen-corpus      --out DIR [--config CFG] [--seed N]
    gradlab train-embedder  --out CKPT [--corpus DIR] [--config CFG]
    gradlab attack          --config CFG [--out DIR] [--set key=value ...]
    gradlab sweep           --config CFG (--grid GRID | --preset NAME) [--out DIR]
    gradlab report          DIR

``CFG`` is a JSON file with :class:`~gradlab.experiment.ExperimentConfig`
fields; any field may be omitted. ``--set`` takes dotted keys with JSON
values, e.g. ``--set defense.kind='"dpsgd"' --set defense.noise_scale=1e-4``.

On failure the command exits with status 1 and prints a JSON error record
``{"error": <type>, "message": <text>}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import save_checkpoint
from .corpus import load_corpus, save_corpus, generate_corpus
from .errors import ConfigError, GradlabError
from .experiment import (
    ExperimentConfig,
    aggregate_rows,
    load_config,
    prepare,
    read_report,
    run_experiment,
    split_corpus,
    sweep,
)
from .speaker import train_embedder

SIGMAS = [0.0, 1e-4, 5e-4, 1e-3]

# Ready-made grids for the defense sweeps and the ablations.
PRESETS = {
    "dpsgd": [{"defense.kind": "dpsgd", "defense.noise_scale": s} for s in SIGMAS],
    "dropout": [{"defense.kind": "dropout", "defense.rate": r} for r in (0.0, 0.1, 0.2, 0.3)],
    "batch": [{"mode.kind": "batch", "mode.batch_size": b} for b in (2, 4, 8)],
    "multistep": [{"mode.kind": "multistep", "mode.steps": c, "schedule.samplings": 8} for c in (2, 8)],
    "wrong-length": (
        [{"mode.kind": "single"}]
        + [{"mode.kind": "wrong_length", "mode.length_offset": o} for o in (1, -1, 5, -5, 10, -10)]
        + [{"mode.kind": "wrong_length", "mode.length_factor": f} for f in (2.0, 0.5)]
    ),
    "wrong-transcript": [{"mode.kind": "single"}] + [
        {"mode.kind": "wrong_transcript", "attack_seed": s} for s in range(4)
    ],
}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_gen_corpus(args) -> dict:
    cfg = _config(args)
    ccfg = cfg.corpus
    if args.seed is not None:
        ccfg = type(ccfg)(**{**ccfg.__dict__, "seed": args.seed})
    corpus = generate_corpus(ccfg)
    save_corpus(corpus, Path(args.out))
    return {"out": args.out, "utterances": len(corpus.utterances), "speakers": len(corpus.speakers)}


def cmd_train_embedder(args) -> dict:
    cfg = _config(args)
    corpus = load_corpus(Path(args.corpus)) if args.corpus else generate_corpus(cfg.corpus)
    enrolled, _ = split_corpus(corpus, cfg.enroll_per_speaker)
    enc = train_embedder(enrolled, cfg.embedder)
    save_checkpoint(Path(args.out), enc)
    return {"out": args.out, "speakers": len(enrolled)}


def cmd_attack(args) -> dict:
    cfg = _config(args)
    if args.out:
        cfg.output_dir = args.out
    report = run_experiment(cfg)
    return {"output_dir": cfg.output_dir, "aggregate": report.aggregate}


def cmd_sweep(args) -> dict:
    cfg = _config(args)
    if args.out:
        cfg.output_dir = args.out
    if args.grid:
        grid = json.loads(Path(args.grid).read_text())
    else:
        grid = PRESETS[args.preset]
    reports = sweep(cfg, grid, prepare(cfg))
    return {"output_dir": cfg.output_dir,
            "points": [{"overrides": g, "aggregate": r.aggregate} for g, r in zip(grid, reports)]}


def cmd_report(args) -> dict:
    """Recompute the aggregates of a finished run from its rows and check them."""
    out = Path(args.dir)
    _, rows = read_report(out / "report.csv")
    recomputed = aggregate_rows(rows)
    stored = json.loads((out / "aggregate.json").read_text())
    if json.loads(json.dumps(recomputed)) != stored:
        raise ConfigError(f"aggregate.json in {out} does not match its rows")
    return {"dir": str(out), "aggregate": recomputed}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradlab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override, JSON value")
        return p

    p = with_config(sub.add_parser("gen-corpus", help="generate and save a synthetic corpus"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = with_config(sub.add_parser("train-embedder", help="train the speaker encoder on enrollment utterances"))
    p.add_argument("--corpus", help="corpus directory (default: generate from config)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_embedder)

    p = with_config(sub.add_parser("attack", help="run one experiment"))
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_attack)

    p = with_config(sub.add_parser("sweep", help="run a grid of experiments sharing corpus and encoder"))
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", help="JSON list of override dicts")
    g.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="verify and print a finished run's aggregates")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except (GradlabError, OSError, ValueError, KeyError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
