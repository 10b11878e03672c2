"""Command line: ``cpcl run <config>`` and ``cpcl report <dir>``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import KEYS, ExperimentConfig, emit_config, load_config, parse_config
from .datasets import DatasetError, LoadedData, load_dataset, read_idx
from .runner import METRICS_HEADER, REPORT_HEADER, metrics_csv, report, run_experiment

__all__ = [
    "KEYS", "ExperimentConfig", "emit_config", "load_config", "parse_config",
    "DatasetError", "LoadedData", "load_dataset", "read_idx",
    "METRICS_HEADER", "REPORT_HEADER", "metrics_csv", "report", "run_experiment", "main",
]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpcl", description="DP learning over simulated MPC")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    rep = sub.add_parser("report", help="summarise a directory of metrics files")
    rep.add_argument("dir")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            for path in run_experiment(cfg, out=args.out, seed=args.seed):
                print(path)
        else:
            sys.stdout.write(report(args.dir))
    except Exception as exc:  # every failure becomes a machine-readable record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        return 1
    return 0
