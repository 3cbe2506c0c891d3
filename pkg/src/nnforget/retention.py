"""Prototype-similarity recall probability and per-class retention series.

The recall probability of class ``k`` for a hidden state ``h`` is a softmax
over ``alpha * cos(h, prototype_c)`` across all classes ``c``, read off at
``c = k``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .exceptions import ConfigurationError, DataError, ShapeError
from .io import atomic_write_text
from .network import DenseNet, hidden_states

DEFAULT_ALPHA = 10.0
DEFAULT_WINDOW = 5
CSV_HEADER = ("epoch", "class", "recall_raw", "recall_smoothed")


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def unit_rows(M: np.ndarray) -> np.ndarray:
    """Rows scaled to unit length; zero rows stay zero."""
    n = np.linalg.norm(M, axis=1, keepdims=True)
    return np.divide(M, n, out=np.zeros_like(M), where=n > 0)


def cosine_matrix(H, P) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``H`` and rows of ``P``.

    Zero-norm rows give similarity 0 against everything.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if H.shape[1] != P.shape[1]:
        raise ShapeError(f"hidden width {H.shape[1]} does not match prototype width {P.shape[1]}")
    return np.clip(unit_rows(H) @ unit_rows(P).T, -1.0, 1.0)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def recall_from_similarities(similarities, alpha: float) -> np.ndarray:
    """Softmax of ``alpha * similarities`` along the class axis."""
    sims = np.atleast_2d(np.asarray(similarities, dtype=np.float64))
    return softmax_rows(alpha * sims)


@dataclass
class PrototypeStore:
    prototypes: np.ndarray
    initial_recall: np.ndarray
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.initial_recall = np.asarray(self.initial_recall, dtype=np.float64)
        if self.prototypes.ndim != 2:
            raise ShapeError("prototypes must be a (classes, width) array")
        if self.initial_recall.shape != (self.prototypes.shape[0],):
            raise ShapeError("need one initial recall value per prototype")
        if not np.all(np.isfinite(self.prototypes)):
            raise DataError("prototypes must be finite")
        if not self.alpha >= 0 or not np.isfinite(self.alpha):
            raise ConfigurationError("alpha must be a finite non-negative number", "alpha")
        self._freeze()

    def __setattr__(self, name, value):
        super().__setattr__(name, value)
        if name == "prototypes" and "_unit" in self.__dict__:
            self._freeze()

    def _freeze(self):
        # read-only so the cached unit vectors cannot go stale
        protos = np.array(self.prototypes, dtype=np.float64)
        protos.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)
        unit = unit_rows(protos)
        unit.setflags(write=False)
        object.__setattr__(self, "_unit", unit)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def width(self) -> int:
        return self.prototypes.shape[1]

    def recall_matrix(self, H) -> np.ndarray:
        """``(n, classes)`` recall probabilities for a batch of hidden states."""
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        if H.shape[1] != self.width:
            raise ShapeError(f"hidden width {H.shape[1]} does not match prototype width {self.width}")
        sims = np.clip(unit_rows(H) @ self._unit.T, -1.0, 1.0)
        return softmax_rows(self.alpha * sims)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "prototypes": self.prototypes.tolist(),
            "initial_recall": self.initial_recall.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeStore":
        return cls(np.array(d["prototypes"]), np.array(d["initial_recall"]), float(d["alpha"]))


def recall_probability(h, store: PrototypeStore, correct_class: int) -> float:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (store.width,):
        raise ShapeError(f"hidden state must have length {store.width}, got {h.shape}")
    if not 0 <= correct_class < store.n_classes:
        raise ShapeError(f"class {correct_class} outside 0..{store.n_classes - 1}")
    norm = math.sqrt(h @ h)
    sims = store._unit @ (h / norm) if norm > 0 else np.zeros(store.n_classes)
    scores = store.alpha * np.minimum(np.maximum(sims, -1.0), 1.0)
    e = np.exp(scores - scores.max())
    return float(e[correct_class] / e.sum())


def _class_slice(hidden: np.ndarray, labels: np.ndarray, c: int) -> np.ndarray:
    rows = hidden[labels == c]
    if len(rows) == 0:
        raise DataError(f"prototype-evaluation set has no examples of class {c}")
    return rows


def per_class_recall(hidden: np.ndarray, labels, store: PrototypeStore) -> np.ndarray:
    """Mean recall of every class over its own examples, from precomputed hiddens."""
    labels = np.asarray(labels)
    R = store.recall_matrix(hidden)
    out = np.empty(store.n_classes)
    for c in range(store.n_classes):
        mask = labels == c
        if not mask.any():
            raise DataError(f"prototype-evaluation set has no examples of class {c}")
        out[c] = R[mask, c].mean()
    return out


def collect_prototypes(net: DenseNet, proto_eval_set, alpha: float = DEFAULT_ALPHA) -> PrototypeStore:
    """Class-mean hidden states plus each class's recall under them."""
    H = hidden_states(net, proto_eval_set.images)
    labels = np.asarray(proto_eval_set.labels)
    protos = np.stack([_class_slice(H, labels, c).mean(axis=0) for c in range(net.n_classes)])
    store = PrototypeStore(protos, np.zeros(net.n_classes), alpha)
    store.initial_recall = per_class_recall(H, labels, store)
    return store


def class_recall(net: DenseNet, proto_eval_set, store: PrototypeStore, class_index: int) -> float:
    X = proto_eval_set.images[np.asarray(proto_eval_set.labels) == class_index]
    if len(X) == 0:
        raise DataError(f"prototype-evaluation set has no examples of class {class_index}")
    return float(store.recall_matrix(hidden_states(net, X))[:, class_index].mean())


@dataclass
class RetentionRecord:
    epoch: int
    cls: int
    recall_raw: float
    recall_smoothed: float


@dataclass
class RetentionSeries:
    window: int = DEFAULT_WINDOW
    records: List[RetentionRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.window < 1:
            raise ConfigurationError("smoothing window must be at least 1", "smoothing_window")

    def __len__(self):
        return len(self.records)

    def append(self, epoch: int, cls: int, raw: float) -> RetentionRecord:
        past = self.raw(cls)
        if len(past) and epoch <= self.epochs(cls)[-1]:
            raise DataError(f"epoch {epoch} for class {cls} is not after the last recorded epoch")
        tail = list(past[-(self.window - 1):]) if self.window > 1 else []
        smoothed = float(np.mean(tail + [raw]))
        rec = RetentionRecord(int(epoch), int(cls), float(raw), smoothed)
        self.records.append(rec)
        return rec

    def for_class(self, cls: int) -> List[RetentionRecord]:
        return [r for r in self.records if r.cls == cls]

    def epochs(self, cls: int) -> np.ndarray:
        return np.array([r.epoch for r in self.for_class(cls)], dtype=np.int64)

    def raw(self, cls: int) -> np.ndarray:
        return np.array([r.recall_raw for r in self.for_class(cls)])

    def smoothed(self, cls: int) -> np.ndarray:
        return np.array([r.recall_smoothed for r in self.for_class(cls)])

    def latest(self, cls: int) -> Optional[RetentionRecord]:
        for r in reversed(self.records):
            if r.cls == cls:
                return r
        return None

    def at(self, epoch: int, cls: int) -> Optional[RetentionRecord]:
        for r in self.records:
            if r.epoch == epoch and r.cls == cls:
                return r
        return None

    def classes(self) -> List[int]:
        return sorted({r.cls for r in self.records})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in sorted(self.records, key=lambda r: (r.epoch, r.cls)):
            w.writerow([r.epoch, r.cls, repr(r.recall_raw), repr(r.recall_smoothed)])
        return buf.getvalue()

    def write_csv(self, path):
        return atomic_write_text(path, self.to_csv())

    @classmethod
    def read_csv(cls, path, window: int = DEFAULT_WINDOW) -> "RetentionSeries":
        series = cls(window=window)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise DataError(f"{path}: unexpected header {reader.fieldnames}")
            for row in reader:
                series.records.append(RetentionRecord(
                    int(row["epoch"]), int(row["class"]),
                    float(row["recall_raw"]), float(row["recall_smoothed"])))
        return series


def measure_epoch(net: DenseNet, proto_eval_set, store: PrototypeStore, epoch: int,
                  series: RetentionSeries) -> RetentionSeries:
    """Append one record per class; smoothing is a trailing mean over ``series.window`` values."""
    H = hidden_states(net, proto_eval_set.images)
    recalls = per_class_recall(H, proto_eval_set.labels, store)
    for c, r in enumerate(recalls):
        series.append(epoch, c, r)
    return series


def measure_all(net: DenseNet, proto_eval_set, store: PrototypeStore) -> Dict[int, float]:
    H = hidden_states(net, proto_eval_set.images)
    return dict(enumerate(per_class_recall(H, proto_eval_set.labels, store).tolist()))


def per_class_accuracy(logits: np.ndarray, labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    hit = logits.argmax(axis=1) == labels
    return np.array([hit[labels == c].mean() if np.any(labels == c) else np.nan
                     for c in range(n_classes)])


class PlateauTracker:
    """Snapshots each class's prototype once its validation accuracy stops improving.

    A class has plateaued when its accuracy gained less than ``tol`` in each
    of the last ``patience`` epochs. Classes that never plateau keep no
    snapshot; callers fill them from the final network.
    """

    def __init__(self, n_classes: int, tol: float = 0.002, patience: int = 3):
        self.n_classes = n_classes
        self.tol = tol
        self.patience = patience
        self.history: List[np.ndarray] = []
        self.snapshots: Dict[int, np.ndarray] = {}
        self.plateau_epoch: Dict[int, int] = {}

    def update(self, epoch: int, net: DenseNet, validation_set) -> List[int]:
        H = hidden_states(net, validation_set.images)
        logits = forward_logits_from_hidden(net, H)
        acc = per_class_accuracy(logits, validation_set.labels, self.n_classes)
        self.history.append(acc)
        captured = []
        if len(self.history) <= self.patience:
            return captured
        gains = np.diff(np.array(self.history[-(self.patience + 1):]), axis=0)
        labels = np.asarray(validation_set.labels)
        for c in range(self.n_classes):
            if c in self.snapshots or not np.all(gains[:, c] < self.tol):
                continue
            self.snapshots[c] = _class_slice(H, labels, c).mean(axis=0)
            self.plateau_epoch[c] = epoch
            captured.append(c)
        return captured

    def build_store(self, net: DenseNet, proto_eval_set, alpha: float = DEFAULT_ALPHA) -> PrototypeStore:
        H = hidden_states(net, proto_eval_set.images)
        labels = np.asarray(proto_eval_set.labels)
        protos = np.stack([self.snapshots[c] if c in self.snapshots
                           else _class_slice(H, labels, c).mean(axis=0) for c in range(self.n_classes)])
        store = PrototypeStore(protos, np.zeros(self.n_classes), alpha)
        store.initial_recall = per_class_recall(H, labels, store)
        return store


def forward_logits_from_hidden(net: DenseNet, H: np.ndarray) -> np.ndarray:
    return H @ net.weights[-1].T + net.biases[-1]
