"""Seeded experiment execution and the summary report."""

from __future__ import annotations

import csv
import io
import math
import os
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..orchestrator import Dataset, RunResult, run, split_dataset
from .config import ExperimentConfig, emit_config, parse_config
from .datasets import load_dataset

METRICS_HEADER = ("run_id", "epoch", "accuracy", "loss", "eps_spent", "delta_spent", "messages", "bytes", "wall_ops")
REPORT_HEADER = ("paradigm", "scenario", "epsilon", "runs", "accuracy_mean", "accuracy_std", "flag")
OUT_ENV = "CPCL_OUT"


def output_dir(cfg: ExperimentConfig, override=None) -> Path:
    """--out beats the CPCL_OUT environment variable, which beats run.out."""
    if override:
        return Path(override)
    env = os.environ.get(OUT_ENV)
    return Path(env) if env else Path(cfg["run.out"])


def prepare_data(cfg: ExperimentConfig) -> Dataset:
    if not cfg["dataset.path"]:
        raise ValueError("dataset.path is not set")
    raw = load_dataset(cfg.resolve("dataset.path"), cfg["dataset.format"], cfg.resolve("dataset.labels") or None)
    x, y = raw.x, raw.y
    limit = cfg["dataset.limit"]
    if limit:
        if limit > len(y):
            raise ValueError(f"dataset.limit {limit} exceeds the {len(y)} available records")
        x, y = x[:limit], y[:limit]
    return split_dataset(x, y, cfg["dataset.test_fraction"], seed=cfg["run.seed"], classes=len(raw.label_names))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6g}"


def metrics_csv(run_id: str, result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in result.metrics:
        w.writerow([run_id, m.epoch, f"{m.accuracy:.6f}", f"{m.loss:.6f}", _fmt(m.eps_spent),
                    _fmt(m.delta_spent), m.messages, m.bytes, m.wall_ops])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out=None, seed: int | None = None,
                   data: Dataset | None = None) -> list[Path]:
    """Run every repetition; write metrics, trace and resolved config for each."""
    if seed is not None:
        cfg = cfg.with_(run__seed=seed)
    out_dir = output_dir(cfg, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg) if data is None else data
    written = []
    base = cfg["run.seed"]
    for rep in range(cfg["run.repetitions"]):
        rep_cfg = cfg.with_(run__seed=base + rep, run__repetitions=1)
        run_id = f"{cfg.run_name}-seed{base + rep}"
        result = run(rep_cfg.run_config(), data)
        stem = out_dir / run_id
        paths = [Path(f"{stem}.metrics.csv"), Path(f"{stem}.trace.csv"), Path(f"{stem}.config")]
        with open(paths[0], "w", newline="", encoding="utf-8") as fh:
            fh.write(metrics_csv(run_id, result))
        result.tracer.write(paths[1])
        with open(paths[2], "w", newline="", encoding="utf-8") as fh:
            fh.write(emit_config(rep_cfg))
        written += paths
    return written


def scenario_label(cfg: ExperimentConfig) -> str:
    label = cfg["noise.sampling"]
    if label == "local_pnoise" and cfg["topology.t"]:
        label += f"(t={cfg['topology.t']})"
    return label


def report(path) -> str:
    """Mean and sample stddev of final accuracy per paradigm x scenario x epsilon."""
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    files = sorted(root.glob("*.metrics.csv"))
    if not files:
        raise ValueError(f"no metrics files in {root}")
    groups: dict[tuple, list[float]] = defaultdict(list)
    for f in files:
        cfg_path = f.with_name(f.name[: -len(".metrics.csv")] + ".config")
        if not cfg_path.exists():
            raise ValueError(f"{f.name} has no matching resolved config {cfg_path.name}")
        cfg = parse_config(cfg_path.read_text(encoding="utf-8"))
        with open(f, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{f.name} has no epoch rows")
        key = (cfg["paradigm.name"], scenario_label(cfg), cfg["privacy.epsilon"])
        groups[key].append(float(rows[-1]["accuracy"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for (paradigm, scenario, eps), accs in sorted(groups.items()):
        mean = float(np.mean(accs))
        if len(accs) > 1:
            std, flag = f"{float(np.std(accs, ddof=1)):.6f}", ""
        else:
            std, flag = "", "single_run"
        w.writerow([paradigm, scenario, f"{eps:g}", len(accs), f"{mean:.6f}", std, flag])
    return buf.getvalue()
