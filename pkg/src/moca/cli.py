"""Command-line entry point: ``moca <subcommand> [--config PATH] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import load_config
from .errors import CheckpointError, ConfigError, ContractError, NumericFault


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moca", description="Momentum calibration for small seq2seq models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub_p = sub.add_parser("make-data", help="generate dataset splits")
    _common(sub_p)

    sub_p = sub.add_parser("train-mle", help="train the MLE baseline")
    _common(sub_p)
    sub_p.add_argument("--resume", help="checkpoint to resume from")

    sub_p = sub.add_parser("calibrate", help="momentum calibration from an MLE checkpoint")
    _common(sub_p)
    sub_p.add_argument("--init", help="MLE checkpoint (default: <out_dir>/mle.ckpt)")
    sub_p.add_argument("--resume", help="calibration checkpoint to resume from")

    sub_p = sub.add_parser("evaluate", help="beam-decode a split and write metric reports")
    _common(sub_p)
    sub_p.add_argument("--checkpoint", required=True)
    sub_p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    sub_p.add_argument("--name", help="report name prefix (default: checkpoint stem)")

    sub_p = sub.add_parser("generate", help="write beam-search outputs as JSON lines")
    _common(sub_p)
    sub_p.add_argument("--checkpoint", required=True)
    sub_p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    sub_p.add_argument("--output", required=True)

    sub_p = sub.add_parser("diagnose", help="teacher-forced accuracy by position")
    _common(sub_p)
    sub_p.add_argument("--checkpoint", required=True)
    sub_p.add_argument("--split", default="valid", choices=("train", "valid", "test"))

    sub_p = sub.add_parser("selftest", help="run built-in oracle checks")
    _common(sub_p)
    sub_p.add_argument("--quick", action="store_true", help="fewer random cases")
    sub_p.add_argument("--plant-fault", choices=("gradient",), help="inject a known bug (checks the checks)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return _dispatch(args, cfg)
    except (ConfigError, ContractError, CheckpointError, NumericFault, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, cfg) -> int:
    cmd = args.command
    out = Path(cfg["out_dir"])
    if cmd == "selftest":
        from .selftest import run_selftest, summarize, timed_selftest

        results, secs = timed_selftest(fault=args.plant_fault, quick=args.quick, log=print)
        print(summarize(results, secs))
        return 0 if all(r.passed for r in results) else 1
    if cmd == "make-data":
        _, splits = harness.run_make_data(cfg)
        print(" ".join(f"{k}={len(v)}" for k, v in splits.items()), "->", harness.dataset_dir(cfg))
        return 0
    vocab, splits = harness.load_splits(cfg)
    if cmd == "train-mle":
        state = harness.run_train_mle(cfg, splits, resume=args.resume)
        print(f"MLE training stopped at step {state.step}; checkpoint {out / 'mle.ckpt'}")
    elif cmd == "calibrate":
        init = args.init or out / "mle.ckpt"
        state, _ = harness.run_calibrate(cfg, init, splits, resume=args.resume)
        print(f"calibration ({cfg['mode']}) stopped at step {state.step}; checkpoint {out / (cfg['run_name'] + '.ckpt')}")
    elif cmd == "evaluate":
        name = args.name or Path(args.checkpoint).stem
        s = harness.run_evaluate(cfg, args.checkpoint, splits[args.split], vocab, name)
        print(f"rouge1={s.rouge1:.4f} rouge2={s.rouge2:.4f} rougeL={s.rougeL:.4f} mean={s.mean:.4f} kendall_tau={s.kendall_tau:.4f}")
    elif cmd == "generate":
        harness.run_generate(cfg, args.checkpoint, splits[args.split], vocab, args.output)
    elif cmd == "diagnose":
        d = harness.run_diagnose(cfg, args.checkpoint, splits[args.split])
        print(d.text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
