"""``pcnet`` command line: train, evaluate and analyze.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from . import metrics, report
from . import network as pcn
from .data import DATA_DIR_ENV, Dataset, IdxFormatError, load_mnist, synthetic_dataset
from .regularization import DegenerateWeightsError
from .training import CheckpointError, load_checkpoint, save_checkpoint, train_run

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SYNTHETIC_TRAIN, SYNTHETIC_TEST = 5000, 1000

log = logging.getLogger("pcnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag_type(kind: str):
    if "bool" in kind:
        return None
    if "int" in kind:
        return int
    if "float" in kind:
        return float
    return str


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML file with RunSpec keys")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    p.add_argument("--batches", dest="total_batches", type=int, help="alias of --total-batches")
    for f in fields(cfgmod.RunSpec):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "total_batches":
            p.add_argument(flag, dest=f.name, type=int)
        elif f.name == "layer_sizes":
            p.add_argument(flag, dest=f.name, help="comma separated, top layer first")
        elif _flag_type(f.type) is None:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=_flag_type(f.type))


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", help=f"MNIST IDX directory (default: ${DATA_DIR_ENV})")
    p.add_argument("--synthetic", action="store_true", help="use seeded synthetic digits instead of MNIST")
    p.add_argument("--test-subset", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcnet", description="Generative predictive coding networks on MNIST.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="train a network and record diagnostics")
    _add_spec_flags(train)

    ev = sub.add_parser("evaluate", help="accuracy-vs-iteration trajectory for a checkpoint")
    ev.add_argument("weights", help="checkpoint written by train (weights.npz)")
    _add_data_flags(ev)
    ev.add_argument("--iters", type=int, default=1000)
    ev.add_argument("--stride", type=int, default=metrics.DEFAULT_STRIDE)
    ev.add_argument("--out", help="output directory (default: next to the checkpoint)")

    an = sub.add_parser("analyze", help="summary table and figures from run directories")
    an.add_argument("run_dirs", nargs="+")
    an.add_argument("--out", help="output directory (default: the first run directory)")
    an.add_argument("--slope-start", type=float, help="first batch in the norm-slope fit (default: the peak-accuracy batch)")
    return parser


# -- data --------------------------------------------------------------------------

def load_datasets(data_dir: Optional[Path], synthetic: bool, width: int, train_subset: Optional[int] = None,
                  test_subset: Optional[int] = None) -> tuple:
    if synthetic:
        train = synthetic_dataset(train_subset or SYNTHETIC_TRAIN, seed=0, split="train", width=width)
        test = synthetic_dataset(test_subset or SYNTHETIC_TEST, seed=0, split="test", width=width)
        return train, test
    if data_dir is None:
        raise FileNotFoundError(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")
    train = load_mnist(data_dir, "train").subset(train_subset)
    test = load_mnist(data_dir, "test").subset(test_subset)
    if train.images.shape[1] != width:
        raise IdxFormatError(f"images have {train.images.shape[1]} pixels but the bottom layer has {width}", 0)
    return train, test


def _load_test(args, width: int) -> Dataset:
    data_dir = Path(args.data_dir) if args.data_dir else cfgmod.RunSpec().resolved_data_dir()
    if args.synthetic:
        return synthetic_dataset(args.test_subset or SYNTHETIC_TEST, seed=0, split="test", width=width)
    if data_dir is None:
        raise FileNotFoundError(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")
    test = load_mnist(data_dir, "test").subset(args.test_subset)
    if test.images.shape[1] != width:
        raise IdxFormatError(f"images have {test.images.shape[1]} pixels but the bottom layer has {width}", 0)
    return test


# -- commands ----------------------------------------------------------------------

def cmd_train(spec: cfgmod.RunSpec) -> int:
    config = spec.network_config()
    train, test = load_datasets(spec.resolved_data_dir(), spec.synthetic, config.layer_sizes[-1],
                                spec.train_subset, spec.test_subset)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(spec, out / "config.yaml")

    def show(snap):
        print(f"batch {snap.batch_index}\ttest_accuracy {metrics._fmt(snap.test_accuracy) or '-'}"
              f"\ttrain_accuracy {metrics._fmt(snap.train_accuracy) or '-'}", flush=True)

    record = train_run(config, train, test, spec.policy_spec(), spec.schedule(), spec.run_id, show)
    metrics.export_json(record, out / "record.json")
    metrics.export_csv(record, out)
    save_checkpoint(record.final_weights, config, out / "weights.npz")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_evaluate(weights_path, test: Optional[Dataset], iters: int, stride: int, out_dir=None,
                 args=None) -> int:
    weights, config = load_checkpoint(weights_path)
    if test is None:
        test = _load_test(args, config.layer_sizes[-1])
    traj = metrics.record_accuracy_trajectory(weights, test, config, iters, stride)
    out = Path(out_dir) if out_dir else Path(weights_path).parent
    path = out / "evaluate_trajectory.csv"
    with metrics._open_for_write(path) as fh:
        fh.write("iteration,accuracy\n")
        for it, acc in traj:
            fh.write(f"{it},{metrics._fmt(acc)}\n")
    report.render({"test": traj}, out / "evaluate_trajectory", "Accuracy during inference", "iteration", "accuracy")
    print(f"final accuracy {metrics._fmt(traj[-1][1])} after {traj[-1][0]} iterations")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_analyze(run_dirs, out_dir=None, slope_start: Optional[float] = None) -> int:
    records = [report.load_run(d) for d in run_dirs]
    out = Path(out_dir) if out_dir else Path(run_dirs[0])
    rows = [report.summarize(r, slope_start) for r in records]
    summary = report.write_summary(rows, out / "summary.csv")
    extra = {r.run_id: r for r in records[1:]}
    report.render_run(records[0], out, extra)
    sys.stdout.write(summary.read_text())
    return EXIT_OK


def _spec_from_args(args) -> cfgmod.RunSpec:
    names = {f.name for f in fields(cfgmod.RunSpec)}
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return cfgmod.parse_config(args.config, overrides, args.preset)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(_spec_from_args(args))
        if args.command == "evaluate":
            if args.iters < 1 or args.stride < 1:
                raise UsageError("--iters and --stride must be >= 1")
            return cmd_evaluate(args.weights, None, args.iters, args.stride, args.out, args)
        return cmd_analyze(args.run_dirs, args.out, args.slope_start)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"pcnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pcn.DivergenceError, DegenerateWeightsError) as exc:
        print(f"pcnet: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, IdxFormatError, CheckpointError, KeyError, ValueError) as exc:
        print(f"pcnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"pcnet: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
