"""Command-line entry point: ``p2at {train,eval,bench,synth,inspect}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
checkpoint error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .bench import bench
from .checkpoint import load_model, save_checkpoint
from .data import load_dataset, synth_generate, write_dataset
from .engine import evaluate, miou, train, write_history
from .errors import ConfigError, DataError, NumericalError, UsageError
from .model import ModelConfig, build, count_params
from .runconfig import RunConfig, format_run_config, load_run_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit(message)


def make_parser():
    p = _Parser(prog="p2at", description="Pyramid-pooling axial-attention segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a run config and a manifest")
    t.add_argument("--config", help="key = value run file (defaults apply when omitted)")
    t.add_argument("--data", help="training manifest (overrides the run file)")
    t.add_argument("--out", help="output directory (overrides the run file)")
    t.add_argument("--seed", type=int, help="training and init seed (overrides the run file)")
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", help="whole-image evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)

    b = sub.add_parser("bench", help="time eval-mode forward passes")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--preset")
    b.add_argument("--h", type=int, default=64)
    b.add_argument("--w", type=int, default=64)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--classes", type=int, default=4)

    s = sub.add_parser("synth", help="write a synthetic corpus with a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--h", type=int, default=64)
    s.add_argument("--w", type=int, default=64)

    i = sub.add_parser("inspect", help="list checkpoint parameters")
    i.add_argument("--checkpoint", required=True)
    return p


def iou_table(per_class, mean):
    lines = [f"{'class':>5}  {'IoU':>8}"]
    for k, v in enumerate(per_class):
        lines.append(f"{k:>5}  {'n/a':>8}" if np.isnan(v) else f"{k:>5}  {v:8.6f}")
    lines.append(f"mIoU: {mean:.6f}")
    return "\n".join(lines)


def cmd_train(args):
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    data = args.data or cfg.paths.get("data")
    out = args.out or cfg.paths.get("out")
    if not data or not out:
        raise ConfigError("train needs --data and --out (or data/out keys in the run file)")
    samples = load_dataset(data, cfg.model.num_classes)
    holdout = load_dataset(cfg.paths["holdout"], cfg.model.num_classes) if "holdout" in cfg.paths else None
    os.makedirs(out, exist_ok=True)
    model = build(cfg.model, seed=cfg.train.seed)
    history = train(model, samples, cfg.train, holdout=holdout, callback=lambda r: print(r.csv(), flush=True))
    write_history(history, os.path.join(out, "history.csv"))
    save_checkpoint(model, os.path.join(out, "model.ckpt"))
    with open(os.path.join(out, "run.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_run_config(cfg))
    print(f"saved {os.path.join(out, 'model.ckpt')}")


def cmd_eval(args):
    model = load_model(args.checkpoint)
    samples = load_dataset(args.data, model.config.num_classes)
    print(iou_table(*miou(evaluate(model, samples))))


def cmd_bench(args):
    if args.checkpoint:
        model = load_model(args.checkpoint)
    else:
        model = build(ModelConfig.preset(args.preset, args.classes))
    report = bench(model, (args.batch, model.config.in_channels, args.h, args.w), args.warmup, args.iters,
                   threads=args.threads or None)
    print("\n".join(report.lines()))


def cmd_synth(args):
    samples = synth_generate(args.seed, args.n, args.h, args.w, args.classes)
    print(write_dataset(samples, args.out))


def cmd_inspect(args):
    model = load_model(args.checkpoint)
    rows = [(name, "x".join(map(str, p.shape)), p.size) for name, p in model.named_parameters()]
    width = max(len(r[0]) for r in rows)
    print(f"{'name':<{width}}  {'shape':>14}  {'count':>9}")
    for name, shape, n in rows:
        print(f"{name:<{width}}  {shape:>14}  {n:>9}")
    print(f"total parameters: {count_params(model)}")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "synth": cmd_synth, "inspect": cmd_inspect}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = make_parser().parse_args(argv)
    except _UsageExit:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"p2at {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, UnicodeDecodeError) as exc:
        print(f"p2at {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"p2at {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
