"""End-to-end experiment: pretrain, collect prototypes, continue with withheld
classes (optionally reviewing them), fit decay models and plot.

Each phase reads its inputs from and writes its outputs to ``output_dir`` so
phases can be rerun on their own.
"""

from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import SplitSpec, WeightedSampler, load_mnist, make_splits, resolve_data_dir
from .exceptions import DataError, NNForgetError
from .io import atomic_write_text
from .memfit import CurveModel, FitResult, compare_models
from .network import (OptimState, TrainConfig, evaluate_accuracy, init_network, load_network,
                      save_network, train_epoch)
from .plot import render_svg_plot
from .retention import (PlateauTracker, PrototypeStore, RetentionSeries, collect_prototypes,
                        measure_epoch)
from .scheduler import ReviewPolicy, read_events, run_continuation, write_events

log = logging.getLogger(__name__)

ARTIFACTS = {
    "model": "model.nnfc",
    "prototypes": "prototypes.json",
    "retention": "retention.csv",
    "events": "events.jsonl",
    "fits": "fits.json",
    "plot": "retention.svg",
    "manifest": "manifest.json",
}
PLATEAU_FILE = "plateau_prototypes.json"
PHASES = ("pretrain", "prototypes", "continue", "fit", "plot")


class PhaseError(NNForgetError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase '{phase}' failed: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class RunManifest:
    config: dict
    version: str
    timings: Dict[str, float] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    results: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "version": self.version, "timings": self.timings,
                "artifacts": self.artifacts, "results": self.results}

    @classmethod
    def load_or_new(cls, cfg: ExperimentConfig) -> "RunManifest":
        path = Path(cfg.output_dir) / ARTIFACTS["manifest"]
        m = cls(cfg.to_dict(), version_string())
        if path.exists():
            old = json.loads(path.read_text())
            m.timings.update(old.get("timings", {}))
            m.artifacts.update(old.get("artifacts", {}))
            m.results.update(old.get("results", {}))
        return m

    def write(self, cfg: ExperimentConfig) -> Path:
        path = Path(cfg.output_dir) / ARTIFACTS["manifest"]
        self.artifacts["manifest"] = str(path)
        self.artifacts = {k: v for k, v in self.artifacts.items() if Path(v).exists() or k == "manifest"}
        return atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def version_string() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def artifact(cfg: ExperimentConfig, key: str) -> Path:
    return Path(cfg.output_dir) / ARTIFACTS[key]


class Experiment:
    """Holds the loaded data for one config and runs phases against it."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._splits = None
        self._test = None
        self.manifest = RunManifest.load_or_new(cfg)
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)

    @property
    def splits(self):
        if self._splits is None:
            data_dir = resolve_data_dir(self.cfg.data_dir)
            full = load_mnist(data_dir, "train")
            spec = SplitSpec(self.cfg.pretrain_count, self.cfg.continuation_count,
                             self.cfg.proto_eval_count, self.cfg.derived_seed("split"))
            self._splits = make_splits(full, spec)
        return self._splits

    @property
    def test_set(self):
        if self._test is None:
            self._test = load_mnist(resolve_data_dir(self.cfg.data_dir), "test")
        return self._test

    def train_config(self, epochs: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.cfg.learning_rate, batch_size=self.cfg.batch_size,
                           epochs=epochs, seed=self.cfg.seed, augment=self.cfg.augment)

    def _record(self, phase, started, **paths):
        self.manifest.timings[phase] = round(time.perf_counter() - started, 3)
        for key, path in paths.items():
            self.manifest.artifacts[key] = str(path)
        self.manifest.write(self.cfg)

    # -- phases ----------------------------------------------------------

    def pretrain(self) -> dict:
        t0 = time.perf_counter()
        cfg = self.cfg
        pre, _, proto_eval = self.splits
        if len(pre) == 0:
            raise DataError("pretraining split is empty")
        net = init_network(cfg.layer_dims, cfg.derived_seed("init"))
        opt = OptimState.for_network(net)
        sampler = WeightedSampler(pre.labels, seed=cfg.derived_seed("pretrain"), n_classes=net.n_classes)
        tc = self.train_config(cfg.pretrain_epochs)
        tracker = PlateauTracker(net.n_classes) if cfg.prototype_timing == "plateau" else None
        losses = []
        for epoch in range(1, cfg.pretrain_epochs + 1):
            stats = train_epoch(net, opt, sampler, pre, tc)
            losses.append(stats.mean_loss)
            log.info("pretrain epoch %d/%d: loss %.4f", epoch, cfg.pretrain_epochs, stats.mean_loss)
            if tracker is not None:
                tracker.update(epoch, net, proto_eval)
        save_network(net, artifact(cfg, "model"))
        acc = evaluate_accuracy(net, self.test_set)
        log.info("pretrain: test accuracy %.4f", acc)
        extra = {}
        if tracker is not None:
            doc = {"snapshots": {str(c): v.tolist() for c, v in tracker.snapshots.items()},
                   "plateau_epoch": {str(c): e for c, e in tracker.plateau_epoch.items()}}
            extra["plateau_prototypes"] = atomic_write_text(Path(cfg.output_dir) / PLATEAU_FILE,
                                                            json.dumps(doc) + "\n")
        self.manifest.results["pretrain"] = {"test_accuracy": acc, "epoch_losses": losses}
        self._record("pretrain", t0, model=artifact(cfg, "model"), **extra)
        return self.manifest.results["pretrain"]

    def prototypes(self) -> PrototypeStore:
        t0 = time.perf_counter()
        cfg = self.cfg
        net = load_network(artifact(cfg, "model"))
        _, _, proto_eval = self.splits
        if cfg.prototype_timing == "plateau":
            doc = json.loads((Path(cfg.output_dir) / PLATEAU_FILE).read_text())
            tracker = PlateauTracker(net.n_classes)
            tracker.snapshots = {int(c): np.array(v) for c, v in doc["snapshots"].items()}
            store = tracker.build_store(net, proto_eval, cfg.alpha)
        else:
            store = collect_prototypes(net, proto_eval, cfg.alpha)
        path = atomic_write_text(artifact(cfg, "prototypes"), json.dumps(store.to_dict()) + "\n")
        self.manifest.results["initial_recall"] = store.initial_recall.tolist()
        self._record("prototypes", t0, prototypes=path)
        return store

    def continuation(self):
        t0 = time.perf_counter()
        cfg = self.cfg
        net = load_network(artifact(cfg, "model"))
        store = PrototypeStore.from_dict(json.loads(artifact(cfg, "prototypes").read_text()))
        _, cont, proto_eval = self.splits
        sampler = WeightedSampler(cont.labels, seed=cfg.derived_seed("continuation"), n_classes=net.n_classes)
        for c in cfg.excluded_classes:
            sampler.set_class_weight(c, 0.0)
        policy = ReviewPolicy(cfg.theta, cfg.review_fraction, cfg.max_review_epochs,
                              frozenset(cfg.excluded_classes), cfg.reviews_enabled, cfg.peak_scope)
        series = RetentionSeries(window=cfg.smoothing_window)
        measure_epoch(net, proto_eval, store, 0, series)
        result = run_continuation(net, OptimState.for_network(net), sampler, cont, proto_eval, store,
                                  policy, self.train_config(cfg.continuation_epochs), series,
                                  on_epoch=_log_epoch(cfg))
        csv_path = series.write_csv(artifact(cfg, "retention"))
        ev_path = write_events(result.events, artifact(cfg, "events"))
        self.manifest.results["reviews"] = len(result.events)
        self._record("continue", t0, retention=csv_path, events=ev_path)
        return result

    def fit(self) -> Dict[int, List[FitResult]]:
        t0 = time.perf_counter()
        cfg = self.cfg
        series = RetentionSeries.read_csv(artifact(cfg, "retention"), cfg.smoothing_window)
        out = {}
        per_class = {}
        for c in self._fit_classes(series):
            values = series.smoothed(c) if cfg.fit_smoothed else series.raw(c)
            points = np.column_stack([series.epochs(c), values])
            results = compare_models(points, seed=cfg.derived_seed("fit"))
            out[c] = results
            ok = [r for r in results if r.ok]
            per_class[str(c)] = {"fits": [r.to_dict() for r in results],
                                 "selected": ok[0].family if ok else None}
        doc = {"series": "smoothed" if cfg.fit_smoothed else "raw", "classes": per_class}
        path = atomic_write_text(artifact(cfg, "fits"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
        self.manifest.results["selected_models"] = {k: v["selected"] for k, v in per_class.items()}
        self._record("fit", t0, fits=path)
        return out

    def plot(self) -> Path:
        t0 = time.perf_counter()
        cfg = self.cfg
        series = RetentionSeries.read_csv(artifact(cfg, "retention"), cfg.smoothing_window)
        events = read_events(artifact(cfg, "events")) if artifact(cfg, "events").exists() else []
        fits = {}
        fits_path = artifact(cfg, "fits")
        if fits_path.exists():
            fits = _best_fits(json.loads(fits_path.read_text()))
        classes = self._plot_classes(series)
        events = [e for e in events if e.cls in classes]
        path = render_svg_plot(series, events, fits, artifact(cfg, "plot"), classes=classes,
                               title=_title(cfg, series), timestamp=cfg.svg_timestamp)
        self._record("plot", t0, plot=path)
        return path

    def _fit_classes(self, series) -> List[int]:
        return [c for c in self.cfg.excluded_classes if c in series.classes()]

    def _plot_classes(self, series) -> List[int]:
        if self.cfg.plot_classes is not None:
            return list(self.cfg.plot_classes)
        return self.cfg.excluded_classes or series.classes()

    def run(self, phases=PHASES) -> RunManifest:
        steps = {"pretrain": self.pretrain, "prototypes": self.prototypes, "continue": self.continuation,
                 "fit": self.fit, "plot": self.plot}
        for name in phases:
            log.info("phase %s", name)
            try:
                steps[name]()
            except Exception as exc:  # noqa: BLE001 - re-raised with the phase attached
                raise PhaseError(name, exc) from exc
        return self.manifest


def _log_epoch(cfg):
    def hook(epoch, series):
        if cfg.excluded_classes:
            rec = series.latest(cfg.excluded_classes[0])
            log.info("continuation epoch %d: class %d recall %.4f (smoothed %.4f)",
                     epoch, rec.cls, rec.recall_raw, rec.recall_smoothed)
    return hook


def _best_fits(doc: dict) -> Dict[int, FitResult]:
    out = {}
    for c, entry in doc.get("classes", {}).items():
        for f in entry["fits"]:
            if f["family"] == entry.get("selected") and f["parameters"]:
                out[int(c)] = FitResult(CurveModel(f["family"], f["parameters"]), f["family"],
                                        f["sse"], f["r_squared"], f["aicc"], f["n_points"])
    return out


def _title(cfg: ExperimentConfig, series) -> str:
    n = max((r.epoch for r in series.records), default=0)
    if cfg.reviews_enabled and cfg.excluded_classes:
        return f"Smoothed recall probability over {n} epochs with spaced review"
    return f"Smoothed recall probability over {n} epochs without review"


def run_pipeline(cfg: ExperimentConfig) -> RunManifest:
    return Experiment(cfg).run()
