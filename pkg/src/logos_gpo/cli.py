"""Command-line entry point: ``logos-gpo {generate,train,predict,evaluate,bench}``.

Exit codes: 0 success, 2 usage or invalid parameters, 3 training aborted,
4 data does not match the checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .bench import run_bench
from .data import GENERATORS, generate, read_dataset, write_dataset
from .evaluation import summarize, write_metrics
from .exceptions import (
    CorruptHeader,
    DimensionMismatch,
    ShapeMismatch,
    TrainingAborted,
    UnsupportedVersion,
)
from .serialization import load_checkpoint, save_checkpoint
from .train import TrainConfig, train

logger = logging.getLogger("logos_gpo")

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_MISMATCH = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list is empty")
    return vals


def build_parser():
    p = argparse.ArgumentParser(
        prog="logos-gpo", description="Gaussian process operator with wavelet mean and KNN spatial kernel."
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("problem", help=f"one of {sorted(GENERATORS)}")
    g.add_argument("--out", required=True)
    g.add_argument("--grid", type=int, default=128)
    g.add_argument("--n", type=int, default=64, help="number of samples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON of generator parameters")

    def training_flags(sp, n_train_type=int):
        sp.add_argument("--config", help="JSON file of training settings")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n-train", dest="n_train", type=n_train_type)
        sp.add_argument("--neighbors", type=int)
        sp.add_argument("--inducing", type=int)

    t = sub.add_parser("train", help="fit a model to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    training_flags(t)

    pr = sub.add_parser("predict", help="predictive mean and variance as CSV")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="relative L2 and coverage on held-out samples")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--n-train", dest="n_train", type=int, default=0,
                   help="skip this many leading samples (the training split)")

    b = sub.add_parser("bench", help="scaling study over grid sizes and training-set sizes")
    b.add_argument("problem")
    b.add_argument("--out", required=True)
    b.add_argument("--grid", type=_int_list, default=[256, 512, 1024])
    b.add_argument("--n-test", dest="n_test", type=int, default=16)
    training_flags(b, _int_list)
    return p


def training_config(args, problem):
    """Flags override the config file, which overrides per-problem defaults."""
    settings = {}
    if args.config:
        try:
            settings = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(settings, dict):
            raise UsageError("config file must hold a JSON object")
    for flag in ("epochs", "seed", "neighbors", "inducing"):
        if getattr(args, flag, None) is not None:
            settings[flag] = getattr(args, flag)
    try:
        return TrainConfig.for_problem(problem, **settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _load_data(path):
    try:
        return read_dataset(path)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def cmd_generate(args):
    params = {}
    if args.config:
        try:
            params = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if args.problem not in GENERATORS:
        raise UsageError(f"unknown problem {args.problem!r}; choose from {sorted(GENERATORS)}")
    if args.n < 1 or args.grid < 2 or args.grid & (args.grid - 1):
        raise UsageError("--n must be positive and --grid a power of two")
    try:
        data = generate(args.problem, args.n, args.grid, seed=args.seed, **params)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    write_dataset(data, args.out)
    print(json.dumps(data.header(), sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    data = _load_data(args.data)
    config = training_config(args, data.problem)
    n_train = args.n_train or len(data)
    if not 0 < n_train <= len(data):
        raise UsageError(f"--n-train must be in [1, {len(data)}]")
    if config.batch_size > n_train:
        logger.warning("batch size %d exceeds %d samples; using full batches", config.batch_size, n_train)
        config = TrainConfig.from_dict({**config.to_dict(), "batch_size": n_train})
    a, y = data.subset(range(n_train)).flat()
    history_path = args.history or f"{args.out}.history.csv"
    try:
        result = train(data.grid, a, y, config)
    except TrainingAborted as exc:
        logger.error("training aborted: %s", exc)
        if exc.last_good is not None:
            save_checkpoint(args.out, exc.last_good, config)
        return EXIT_ABORT
    except (ShapeMismatch, DimensionMismatch):
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_checkpoint(args.out, result.model, config)
    result.history.to_csv(history_path)
    last = result.history.records[-1]
    print(f"trained {config.epochs} epochs on {n_train} samples; final ELBO {last.elbo:.6g}")
    return EXIT_OK


def _model_and_data(args):
    model, _ = load_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    if data.grid.shape != model.grid.shape:
        raise ShapeMismatch(f"dataset grid {data.grid.shape} differs from model grid {model.grid.shape}")
    return model, data


def cmd_predict(args):
    model, data = _model_and_data(args)
    a, _ = data.flat()
    pm = model.predict(a, include_noise=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample", "index", "mean", "variance"))
        for i in range(pm.mean.shape[0]):
            for j in range(pm.mean.shape[1]):
                w.writerow((i, j, repr(float(pm.mean[i, j])), repr(float(pm.variance[i, j]))))
    return EXIT_OK


def cmd_evaluate(args):
    model, data = _model_and_data(args)
    if not 0 <= args.n_train < len(data):
        raise UsageError(f"--n-train must leave at least one sample of {len(data)}")
    a, y = data.flat()
    rec = summarize(model, a[args.n_train :], y[args.n_train :], data.problem, args.n_train)
    write_metrics([rec], args.out)
    print(f"rel_l2 {rec.rel_l2_mean:.4%} +- {rec.rel_l2_std:.4%}, coverage_95 {rec.coverage_95:.3f}")
    return EXIT_OK


def cmd_bench(args):
    if args.problem not in GENERATORS:
        raise UsageError(f"unknown problem {args.problem!r}; choose from {sorted(GENERATORS)}")
    config = training_config(args, args.problem)
    if args.epochs is None and not args.config:
        config = TrainConfig.for_problem(args.problem, **{**config.to_dict(), "epochs": 2})
    n_trains = args.n_train or [32]
    records = run_bench(args.problem, args.grid, n_trains, config, args.n_test)
    write_metrics(records, args.out)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def _thread_cap():
    raw = os.environ.get("LOGOS_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LOGOS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("LOGOS_THREADS must be a positive integer")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_thread_cap()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"logos-gpo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeMismatch, DimensionMismatch) as exc:
        print(f"logos-gpo {args.command}: data mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (CorruptHeader, UnsupportedVersion, FileNotFoundError) as exc:
        print(f"logos-gpo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
