"""Flat ``dotted.key = value`` experiment configuration."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any

from ..orchestrator import RunConfig

# dotted key -> RunConfig field; types and defaults come from RunConfig itself
_RUN_DEFAULTS = RunConfig()
_RUN_KEYS = {
    "paradigm.name": "paradigm",
    "paradigm.backend": "backend",
    "paradigm.output": "output",
    "paradigm.fl_update": "fl_update",
    "paradigm.local_iterations": "local_iterations",
    "topology.n": "n",
    "topology.m": "m",
    "topology.t": "t",
    "topology.s": "s",
    "topology.dropouts": "dropouts",
    "topology.pool": "pool",
    "noise.sampling": "sampling",
    "noise.mechanism": "mechanism",
    "noise.perturbation": "perturbation",
    "noise.loop_budget": "loop_budget",
    "noise.discrete_scale": "discrete_scale",
    "noise.multiplier": "noise_multiplier",
    "noise.output_sensitivity": "output_sensitivity",
    "privacy.epsilon": "epsilon",
    "privacy.delta": "delta",
    "model.kind": "model",
    "model.hidden": "hidden",
    "train.epochs": "epochs",
    "train.lr": "lr",
    "train.clip": "clip",
    "train.batch_size": "batch_size",
    "train.clip_mode": "clip_mode",
    "ring.total_bits": "total_bits",
    "ring.frac_bits": "frac_bits",
    "run.seed": "seed",
    "run.debug": "debug",
}
_OPTIONAL_INT = {"pool", "loop_budget"}
_OPTIONAL_FLOAT = {"noise_multiplier"}

# experiment-level keys: (type, default)
_EXTRA = {
    "dataset.path": (str, ""),
    "dataset.labels": (str, ""),
    "dataset.format": (str, "idx_pair"),
    "dataset.limit": (int, 0),
    "dataset.test_fraction": (float, 0.2),
    "run.name": (str, ""),
    "run.repetitions": (int, 1),
    "run.out": (str, "runs"),
}

KEYS: tuple[str, ...] = tuple(_RUN_KEYS) + tuple(_EXTRA)


def _kind(key: str):
    if key in _EXTRA:
        return _EXTRA[key][0], False
    name = _RUN_KEYS[key]
    if name in _OPTIONAL_INT:
        return int, True
    if name in _OPTIONAL_FLOAT:
        return float, True
    return type(getattr(_RUN_DEFAULTS, name)), False


def _default(key: str):
    if key in _EXTRA:
        return _EXTRA[key][1]
    return getattr(_RUN_DEFAULTS, _RUN_KEYS[key])


def _parse_value(key: str, text: str, line: int):
    typ, optional = _kind(key)
    if optional and text.lower() == "none":
        return None
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ValueError(f"line {line}: {key} expects {typ.__name__}, got {text!r}") from None
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, Any]
    base_dir: str = ""  # relative dataset paths resolve against this

    def resolve(self, key: str) -> str:
        path = self.values[key]
        if path and self.base_dir and not os.path.isabs(path):
            return os.path.join(self.base_dir, path)
        return path

    def __getitem__(self, key: str):
        return self.values[key]

    def run_config(self, seed: int | None = None) -> RunConfig:
        kw = {name: self.values[key] for key, name in _RUN_KEYS.items()}
        if seed is not None:
            kw["seed"] = seed
        return RunConfig(**kw)

    def with_(self, **dotted) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in dotted.items():
            key = k.replace("__", ".")
            if key not in vals:
                raise ValueError(f"unknown config key {key!r}")
            vals[key] = v
        return ExperimentConfig(vals, self.base_dir)

    @property
    def run_name(self) -> str:
        if self.values["run.name"]:
            return self.values["run.name"]
        return "{}-{}-eps{:g}".format(self.values["paradigm.name"], self.values["noise.sampling"],
                                      self.values["privacy.epsilon"])


def parse_config(text: str, base_dir: str = "") -> ExperimentConfig:
    """Parse config text; every key absent from the text takes its default."""
    values = {key: _default(key) for key in KEYS}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in values:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _parse_value(key, value, lineno)
    cfg = ExperimentConfig(values, base_dir)
    cfg.run_config()  # validates the protocol settings
    if values["run.repetitions"] < 1:
        raise ValueError("run.repetitions must be >= 1")
    return cfg


def emit_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config: every key, in canonical order."""
    return "".join(f"{key} = {_format_value(cfg.values[key])}\n" for key in KEYS)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))

