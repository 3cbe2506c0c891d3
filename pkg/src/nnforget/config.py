"""Experiment configuration: JSON file + command-line overrides.

Every key has a default (see ``ExperimentConfig``). Unknown keys are
rejected. Randomness derives from ``seed`` as follows::

    seed + 0   train/continuation/prototype split
    seed + 1   network initialisation
    seed + 2   pretraining sampler
    seed + 3   continuation sampler
    seed + 4   curve-fit restart points
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from .exceptions import ConfigurationError
from .scheduler import PEAK_SCOPES

SEED_OFFSETS = {"split": 0, "init": 1, "pretrain": 2, "continuation": 3, "fit": 4}
PROTOTYPE_TIMINGS = ("converged", "plateau")


@dataclass
class ExperimentConfig:
    data_dir: Optional[str] = None
    output_dir: str = "runs/default"
    seed: int = 0
    layer_dims: List[int] = field(default_factory=lambda: [784, 256, 256, 256, 10])
    learning_rate: float = 1e-4
    batch_size: int = 64
    pretrain_epochs: int = 20
    continuation_epochs: int = 100
    pretrain_count: int = 45000
    continuation_count: int = 10000
    proto_eval_count: int = 5000
    alpha: float = 10.0
    prototype_timing: str = "converged"
    excluded_classes: List[int] = field(default_factory=lambda: [8])
    reviews_enabled: bool = True
    theta: float = 0.8
    review_fraction: float = 0.5
    max_review_epochs: int = 20
    peak_scope: str = "history"
    smoothing_window: int = 5
    fit_smoothed: bool = False
    plot_classes: Optional[List[int]] = None
    augment: bool = False
    svg_timestamp: bool = False

    def __post_init__(self):
        self.validate()

    def derived_seed(self, consumer: str) -> int:
        return self.seed + SEED_OFFSETS[consumer]

    def resolved_data_dir(self) -> Optional[str]:
        return self.data_dir or os.environ.get("NNFORGET_DATA_DIR")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigurationError(f"{key}: {msg}", key)

        def is_int(v):
            return isinstance(v, int) and not isinstance(v, bool)

        need(is_int(self.seed) and 0 <= self.seed < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
        need(isinstance(self.layer_dims, list) and len(self.layer_dims) >= 3
             and all(is_int(d) and d >= 1 for d in self.layer_dims),
             "layer_dims", "needs input, at least one hidden, and output size, all positive integers")
        n_classes = self.layer_dims[-1] if self.layer_dims else 0
        need(isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0,
             "learning_rate", "must be positive")
        need(is_int(self.batch_size) and self.batch_size >= 1, "batch_size", "must be a positive integer")
        for key in ("pretrain_epochs", "continuation_epochs", "pretrain_count",
                    "continuation_count", "proto_eval_count"):
            need(is_int(getattr(self, key)) and getattr(self, key) >= 0, key, "must be a non-negative integer")
        need(isinstance(self.alpha, (int, float)) and 0 <= self.alpha <= 700, "alpha", "must lie in [0, 700]")
        need(self.prototype_timing in PROTOTYPE_TIMINGS, "prototype_timing",
             f"must be one of {PROTOTYPE_TIMINGS}")
        need(isinstance(self.excluded_classes, list)
             and all(is_int(c) and 0 <= c < n_classes for c in self.excluded_classes)
             and len(set(self.excluded_classes)) == len(self.excluded_classes),
             "excluded_classes", f"must be distinct class indices in [0, {n_classes})")
        need(isinstance(self.theta, (int, float)) and 0 <= self.theta <= 1, "theta", "must lie in [0, 1]")
        need(isinstance(self.review_fraction, (int, float)) and 0 < self.review_fraction < 1,
             "review_fraction", "must lie strictly between 0 and 1")
        need(is_int(self.max_review_epochs) and self.max_review_epochs >= 1,
             "max_review_epochs", "must be a positive integer")
        need(self.peak_scope in PEAK_SCOPES, "peak_scope", f"must be one of {PEAK_SCOPES}")
        need(is_int(self.smoothing_window) and self.smoothing_window >= 1,
             "smoothing_window", "must be a positive integer")
        need(self.plot_classes is None or (isinstance(self.plot_classes, list) and all(
            is_int(c) and 0 <= c < n_classes for c in self.plot_classes)),
             "plot_classes", f"must be null or class indices in [0, {n_classes})")
        for key in ("reviews_enabled", "fit_smoothed", "augment", "svg_timestamp"):
            need(isinstance(getattr(self, key), bool), key, "must be true or false")
        need(isinstance(self.output_dir, str) and self.output_dir, "output_dir", "must be a non-empty path")
        need(self.data_dir is None or isinstance(self.data_dir, str), "data_dir", "must be a path or null")


KEYS = tuple(f.name for f in fields(ExperimentConfig))


def _build(values: Dict[str, Any]) -> ExperimentConfig:
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigurationError(f"unknown configuration key {unknown[0]!r}", unknown[0])
    values = dict(values)
    # JSON has one number type; accept 1 for 1.0 on float keys
    for key in ("learning_rate", "alpha", "theta", "review_fraction"):
        if isinstance(values.get(key), int) and not isinstance(values.get(key), bool):
            values[key] = float(values[key])
    return ExperimentConfig(**values)


def load_config_file(path) -> Dict[str, Any]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc.strerror})", "config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: malformed JSON ({exc})", "config") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object", "config")
    return doc


def parse_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """File values first, then ``overrides`` (already typed) on top."""
    values: Dict[str, Any] = load_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return _build(values)


def _int_list(text: str) -> List[int]:
    text = text.strip()
    if text.startswith("["):
        return json.loads(text)
    return [int(x) for x in text.split(",") if x.strip()]


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional_int_list(text: str):
    return None if text.lower() in ("none", "null") else _int_list(text)


_FLAG_TYPES = {
    "layer_dims": _int_list,
    "excluded_classes": _int_list,
    "plot_classes": _optional_int_list,
    "data_dir": str,
    "output_dir": str,
    "prototype_timing": str,
    "peak_scope": str,
}


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--key`` flag per config key (``--learning-rate`` and ``--learning_rate`` both work)."""
    parser.add_argument("--config", metavar="PATH", help="JSON config file")
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        default = getattr(defaults, f.name)
        kind = _FLAG_TYPES.get(f.name)
        if kind is None:
            kind = _bool if isinstance(default, bool) else type(default)
        names = [f"--{f.name.replace('_', '-')}"]
        if "_" in f.name:
            names.append(f"--{f.name}")
        parser.add_argument(*names, dest=f.name, type=kind, default=None, metavar="VALUE",
                            help=f"default: {json.dumps(default)}")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in KEYS if getattr(args, k, None) is not None}
    return parse_config(getattr(args, "config", None), overrides)
