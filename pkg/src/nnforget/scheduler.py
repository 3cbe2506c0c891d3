"""Threshold-triggered spaced review during continued training.

Each epoch trains on the continuation set, measures every class against the
stored prototypes, closes reviews whose class has recovered (or run out of
time), then opens reviews for withheld classes whose smoothed recall fell
below ``threshold_ratio * initial_recall``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

from .exceptions import ConfigurationError
from .io import atomic_write_text
from .network import DenseNet, OptimState, TrainConfig, train_epoch
from .retention import PrototypeStore, RetentionSeries, measure_epoch

log = logging.getLogger(__name__)

PEAK_SCOPES = ("history", "since_review")


@dataclass
class ReviewPolicy:
    threshold_ratio: float = 0.8
    review_fraction: float = 0.5
    max_review_epochs: int = 20
    excluded_classes: FrozenSet[int] = frozenset({8})
    enabled: bool = True
    # "history": peak over the whole series; "since_review": only since the class's last review ended
    peak_scope: str = "history"

    def __post_init__(self):
        self.excluded_classes = frozenset(int(c) for c in self.excluded_classes)
        if self.peak_scope not in PEAK_SCOPES:
            raise ConfigurationError(f"peak_scope must be one of {PEAK_SCOPES}", "peak_scope")
        # 0 is accepted and means "never trigger"
        if not 0 <= self.threshold_ratio <= 1:
            raise ConfigurationError("threshold_ratio must lie in [0, 1]", "theta")
        if not 0 < self.review_fraction < 1:
            raise ConfigurationError("review_fraction must lie strictly between 0 and 1", "review_fraction")
        if int(self.max_review_epochs) != self.max_review_epochs or self.max_review_epochs < 1:
            raise ConfigurationError("max_review_epochs must be a positive integer", "max_review_epochs")

    @property
    def active(self) -> bool:
        return self.enabled and self.threshold_ratio > 0 and bool(self.excluded_classes)


@dataclass
class ReviewEvent:
    cls: int
    trigger_epoch: int
    end_epoch: int
    pre_recall: float
    post_recall: float
    target_peak: float
    truncated: bool = False

    def to_dict(self) -> dict:
        return {
            "class": self.cls,
            "trigger_epoch": self.trigger_epoch,
            "end_epoch": self.end_epoch,
            "pre_recall": self.pre_recall,
            "post_recall": self.post_recall,
            "target_peak": self.target_peak,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewEvent":
        return cls(int(d["class"]), int(d["trigger_epoch"]), int(d["end_epoch"]),
                   float(d["pre_recall"]), float(d["post_recall"]), float(d["target_peak"]),
                   bool(d["truncated"]))


@dataclass
class ActiveReview:
    cls: int
    trigger_epoch: int
    pre_recall: float
    target_peak: float
    saved_weight: float


def check_trigger(series: RetentionSeries, store: PrototypeStore, policy: ReviewPolicy,
                  in_review: Iterable[int] = ()) -> Set[int]:
    if not policy.active:
        return set()
    busy = set(in_review)
    out = set()
    for c in sorted(policy.excluded_classes):
        if c in busy:
            continue
        rec = series.latest(c)
        if rec is not None and rec.recall_smoothed < policy.threshold_ratio * store.initial_recall[c]:
            out.add(c)
    return out


def prior_peak(series: RetentionSeries, store: PrototypeStore, class_index: int,
               after_epoch: Optional[int] = None) -> float:
    """Highest smoothed recall so far, counting the initial score.

    With ``after_epoch`` only that epoch and later ones count and the
    initial score is ignored (peak since the last review ended).
    """
    smoothed = series.smoothed(class_index)
    if after_epoch is None:
        peak = float(store.initial_recall[class_index])
        return max(peak, float(smoothed.max())) if len(smoothed) else peak
    recent = smoothed[series.epochs(class_index) >= after_epoch]
    if not len(recent):
        raise ValueError(f"no measurements of class {class_index} after epoch {after_epoch}")
    return float(recent.max())


def review_step(sampler, policy: ReviewPolicy, class_index: int) -> float:
    """Boost ``class_index`` so its expected batch share is ``review_fraction``.

    Returns the weight the class had before, for restoring later.
    """
    eff = sampler.effective_weights()
    others = float(sum(w for c, w in enumerate(eff) if c != class_index and w > 0))
    if others <= 0:
        raise ConfigurationError(f"cannot review class {class_index}: no other class is active",
                                 "review_fraction")
    previous = float(sampler.weights[class_index])
    f = policy.review_fraction
    sampler.set_class_weight(class_index, f / (1 - f) * others)
    return previous


def end_review(sampler, review: ActiveReview, epoch: int, post_recall: float,
               truncated: bool) -> ReviewEvent:
    sampler.set_class_weight(review.cls, review.saved_weight)
    return ReviewEvent(review.cls, review.trigger_epoch, epoch, review.pre_recall,
                       post_recall, review.target_peak, truncated)


@dataclass
class ContinuationResult:
    series: RetentionSeries
    events: List[ReviewEvent]
    losses: List[float] = field(default_factory=list)
    weight_history: List[Tuple[float, ...]] = field(default_factory=list, repr=False)


def run_continuation(net: DenseNet, opt_state: OptimState, sampler, continuation_set,
                     proto_eval_set, store: PrototypeStore, policy: ReviewPolicy,
                     config: TrainConfig, series: Optional[RetentionSeries] = None,
                     on_epoch: Optional[Callable[[int, RetentionSeries], None]] = None,
                     ) -> ContinuationResult:
    """Train ``config.epochs`` epochs with withheld classes and spaced review.

    ``series`` may already hold earlier measurements (e.g. the epoch-0
    baseline); new epochs are numbered after its last one.
    """
    for c in policy.excluded_classes:
        if sampler.weights[c] != 0:
            raise ConfigurationError(f"excluded class {c} has non-zero sampler weight", "excluded_classes")
    if series is None:
        series = RetentionSeries()
    start = max((r.epoch for r in series.records), default=0)
    active: Dict[int, ActiveReview] = {}
    last_end: Dict[int, int] = {}
    events: List[ReviewEvent] = []
    losses: List[float] = []
    weights = [tuple(sampler.weights)]

    for epoch in range(start + 1, start + config.epochs + 1):
        stats = train_epoch(net, opt_state, sampler, continuation_set, config)
        losses.append(stats.mean_loss)
        measure_epoch(net, proto_eval_set, store, epoch, series)

        for c in sorted(active):
            review = active[c]
            now = series.latest(c).recall_smoothed
            if now >= review.target_peak:
                events.append(end_review(sampler, review, epoch, now, truncated=False))
            elif epoch - review.trigger_epoch >= policy.max_review_epochs:
                events.append(end_review(sampler, review, epoch, now, truncated=True))
            else:
                continue
            del active[c]
            last_end[c] = epoch
            log.info("epoch %d: review of class %d ended (%s)", epoch, c,
                     "truncated" if events[-1].truncated else "recovered")

        for c in sorted(check_trigger(series, store, policy, active)):
            since = last_end.get(c) if policy.peak_scope == "since_review" else None
            target = prior_peak(series, store, c, since)
            pre = series.latest(c).recall_smoothed
            saved = review_step(sampler, policy, c)
            active[c] = ActiveReview(c, epoch, pre, target, saved)
            log.info("epoch %d: class %d recall %.4f below threshold, reviewing to %.4f",
                     epoch, c, pre, target)

        weights.append(tuple(sampler.weights))
        if on_epoch is not None:
            on_epoch(epoch, series)

    # reviews still open when training stops are closed as truncated
    final = start + config.epochs
    for c in sorted(active):
        events.append(end_review(sampler, active[c], final, series.latest(c).recall_smoothed, True))
    events.sort(key=lambda e: (e.trigger_epoch, e.cls))
    return ContinuationResult(series, events, losses, weights)


def events_to_jsonl(events: List[ReviewEvent]) -> str:
    return "".join(json.dumps(e.to_dict(), sort_keys=False) + "\n" for e in events)


def write_events(events: List[ReviewEvent], path):
    return atomic_write_text(path, events_to_jsonl(events))


def read_events(path) -> List[ReviewEvent]:
    with open(path) as fh:
        return [ReviewEvent.from_dict(json.loads(line)) for line in fh if line.strip()]
