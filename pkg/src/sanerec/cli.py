"""Command line entry point: ``sanerec {split,synth,train,evaluate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import IngestionError, ScheduleError, format_log, ingest_interactions, split_blocks
from .experiment import evaluate_checkpoint, run_experiment
from .metrics import METRICS
from .synth import synth_drift_dataset


def _delim(value: str) -> str:
    return "\t" if value in ("tab", "\\t") else value


def cmd_split(args) -> int:
    data = ingest_interactions(args.input, _delim(args.delimiter))
    schedule = split_blocks(data, args.base_fraction, args.n_incremental, args.val_fraction, args.mode)
    text = schedule.summary()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    ds = synth_drift_dataset(args.n_users, args.n_items, args.k_true, args.drift_fraction,
                             args.flip_block, args.n_blocks, args.events_per_user_block, args.seed)
    out = Path(args.output)
    out.write_text(format_log(ds.log))
    cat_path = Path(args.categories) if args.categories else out.with_suffix(".categories.csv")
    cat_path.write_text("".join(f"{raw},{int(c)}\n" for raw, c in zip(ds.log.raw_items, ds.categories)))
    print(f"wrote {len(ds.log)} events to {out} and {len(ds.categories)} item categories to {cat_path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    result = run_experiment(cfg)
    sys.stdout.write(result.metrics_table())
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    rep = evaluate_checkpoint(cfg, args.checkpoint, args.block)
    rows = ["block\tcutoff\tmetric\tvalue\n"]
    for k in cfg.cutoff_list():
        for m in METRICS:
            rows.append(f"{rep.block}\t{k}\t{m}\t{rep.means[(m, k)]:.10f}\n")
    if rep.cohort_recall is not None:
        rows.append(f"{rep.block}\t20\trecall_high_shift\t{rep.cohort_recall:.10f}\n")
    text = "".join(rows)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanerec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="print the block schedule of an interaction file")
    p.add_argument("input")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--base-fraction", type=float, default=0.6)
    p.add_argument("--n-incremental", type=int, default=4)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--mode", choices=("standard", "tuning"), default="standard")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="write a synthetic drift dataset")
    p.add_argument("output")
    p.add_argument("--categories", help="item category file (default: <output>.categories.csv)")
    p.add_argument("--n-users", type=int, default=200)
    p.add_argument("--n-items", type=int, default=300)
    p.add_argument("--k-true", type=int, default=4)
    p.add_argument("--drift-fraction", type=float, default=0.3)
    p.add_argument("--flip-block", type=int, default=1)
    p.add_argument("--n-blocks", type=int, default=4)
    p.add_argument("--events-per-user-block", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run split, base training and the incremental loop")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a saved checkpoint on its evaluation range")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("--block", type=int, required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IngestionError, ScheduleError, OSError, ValueError,
            FloatingPointError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
