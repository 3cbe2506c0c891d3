import json

import numpy as np
import pytest

from conftest import toy_dataset
from nnforget.data import WeightedSampler
from nnforget.exceptions import ConfigurationError
from nnforget.network import OptimState, TrainConfig, init_network, train_epoch
from nnforget.retention import PrototypeStore, RetentionSeries, collect_prototypes, measure_epoch
from nnforget.scheduler import (ActiveReview, ReviewEvent, ReviewPolicy, check_trigger, end_review,
                                events_to_jsonl, prior_peak, read_events, review_step,
                                run_continuation, write_events)


def store_with_initial(value, cls=8):
    init = np.full(10, 0.5)
    init[cls] = value
    return PrototypeStore(np.eye(10), init, 10.0)


def series_of(values, cls=8, window=5):
    s = RetentionSeries(window=window)
    for e, v in enumerate(values):
        s.append(e, cls, v)
    return s


class TestTrigger:
    def test_below_threshold(self):
        # initial 0.3, theta 0.8 -> threshold 0.24
        assert check_trigger(series_of([0.235], window=1), store_with_initial(0.3), ReviewPolicy()) == {8}

    def test_above_threshold(self):
        assert check_trigger(series_of([0.245], window=1), store_with_initial(0.3), ReviewPolicy()) == set()

    def test_boundary_is_strict(self):
        store = store_with_initial(0.5)
        assert check_trigger(series_of([0.4], window=1), store, ReviewPolicy()) == set()

    def test_uses_smoothed_value(self):
        # raw drops below 0.24 but the 5-epoch mean stays above
        s = series_of([0.3, 0.3, 0.3, 0.3, 0.2])
        assert check_trigger(s, store_with_initial(0.3), ReviewPolicy()) == set()

    def test_classes_in_review_skipped(self):
        s = series_of([0.1], window=1)
        assert check_trigger(s, store_with_initial(0.3), ReviewPolicy(), in_review=[8]) == set()

    def test_non_excluded_ignored(self):
        s = series_of([0.01], cls=3, window=1)
        assert check_trigger(s, store_with_initial(0.3, cls=3), ReviewPolicy()) == set()

    def test_disabled(self):
        s = series_of([0.01], window=1)
        assert check_trigger(s, store_with_initial(0.3), ReviewPolicy(enabled=False)) == set()
        assert check_trigger(s, store_with_initial(0.3), ReviewPolicy(threshold_ratio=0.0)) == set()

    @pytest.mark.parametrize("kw", [dict(threshold_ratio=1.5), dict(review_fraction=1.0),
                                    dict(review_fraction=0.0), dict(max_review_epochs=0)])
    def test_invalid_policy(self, kw):
        with pytest.raises(ConfigurationError):
            ReviewPolicy(**kw)


class TestPriorPeak:
    def test_initial_dominates(self):
        assert prior_peak(series_of([0.3, 0.2, 0.1], window=1), store_with_initial(0.35), 8) == 0.35

    def test_earlier_smoothed_peak(self):
        assert prior_peak(series_of([0.3, 0.4, 0.2], window=1), store_with_initial(0.3), 8) == 0.4

    def test_empty_series(self):
        assert prior_peak(RetentionSeries(), store_with_initial(0.33), 8) == 0.33

    def test_since_review_ignores_earlier_history(self):
        s = series_of([0.5, 0.2, 0.45, 0.3, 0.35], window=1)
        assert prior_peak(s, store_with_initial(0.6), 8, after_epoch=3) == 0.35
        assert prior_peak(s, store_with_initial(0.6), 8, after_epoch=2) == 0.45

    def test_unknown_scope(self):
        with pytest.raises(ConfigurationError):
            ReviewPolicy(peak_scope="recent")


class TestReviewStep:
    def test_nine_active_half(self):
        s = WeightedSampler(np.repeat(np.arange(10), 3), seed=0).set_class_weight(8, 0)
        previous = review_step(s, ReviewPolicy(review_fraction=0.5), 8)
        assert previous == 0.0
        assert s.weights[8] == pytest.approx(9.0, abs=1e-12)
        assert s.class_probabilities()[8] == pytest.approx(0.5, abs=1e-12)

    def test_small_fraction(self):
        s = WeightedSampler(np.repeat(np.arange(10), 3), seed=0).set_class_weight(8, 0)
        review_step(s, ReviewPolicy(review_fraction=0.1), 8)
        assert s.weights[8] == pytest.approx(1.0, abs=1e-12)

    def test_other_weights_untouched(self):
        s = WeightedSampler(np.repeat(np.arange(10), 3), seed=0).set_class_weight(8, 0)
        before = s.weights.copy()
        review_step(s, ReviewPolicy(), 8)
        mask = np.arange(10) != 8
        np.testing.assert_array_equal(s.weights[mask], before[mask])

    def test_empty_classes_excluded_from_sum(self):
        labels = np.repeat([0, 1, 8], 5)  # classes 2..7, 9 have no examples
        s = WeightedSampler(labels, seed=0).set_class_weight(8, 0)
        review_step(s, ReviewPolicy(), 8)
        assert s.weights[8] == pytest.approx(2.0)

    def test_nothing_else_active(self):
        w = np.zeros(10)
        s = WeightedSampler(np.arange(10), w, seed=0)
        with pytest.raises(ConfigurationError):
            review_step(s, ReviewPolicy(), 8)

    def test_end_restores(self):
        s = WeightedSampler(np.repeat(np.arange(10), 3), seed=0).set_class_weight(8, 0)
        saved = review_step(s, ReviewPolicy(), 8)
        ev = end_review(s, ActiveReview(8, 12, 0.2, 0.3, saved), 15, 0.31, truncated=False)
        assert s.weights[8] == 0.0
        assert (ev.trigger_epoch, ev.end_epoch, ev.truncated) == (12, 15, False)


class TestEventsIO:
    def test_jsonl(self, tmp_path):
        events = [ReviewEvent(8, 5, 9, 0.2, 0.31, 0.3), ReviewEvent(8, 30, 50, 0.22, 0.27, 0.3, True)]
        text = events_to_jsonl(events)
        lines = text.splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert set(first) == {"class", "trigger_epoch", "end_epoch", "pre_recall", "post_recall",
                              "target_peak", "truncated"}
        assert first["class"] == 8 and first["truncated"] is False
        path = tmp_path / "e.jsonl"
        write_events(events, path)
        assert read_events(path) == events

    def test_empty(self, tmp_path):
        path = tmp_path / "e.jsonl"
        write_events([], path)
        assert path.read_text() == ""
        assert read_events(path) == []


@pytest.fixture(scope="module")
def toy_setup():
    train = toy_dataset(40, seed=0)
    evaluation = toy_dataset(10, seed=0)
    net = init_network([20, 32, 32, 10], seed=0)
    opt = OptimState.for_network(net)
    s = WeightedSampler(train.labels, seed=1)
    for _ in range(30):
        train_epoch(net, opt, s, train, TrainConfig(learning_rate=1e-3, batch_size=16))
    return net, train, evaluation, collect_prototypes(net, evaluation, 10.0)


def continue_toy(toy_setup, policy, epochs=40, lr=1e-3, baseline=True):
    net, train, evaluation, store = toy_setup
    net = net.copy()
    sampler = WeightedSampler(train.labels, seed=2).set_class_weight(8, 0)
    series = RetentionSeries()
    if baseline:
        measure_epoch(net, evaluation, store, 0, series)
    else:
        series = None
    result = run_continuation(net, OptimState.for_network(net), sampler, train, evaluation, store, policy,
                              TrainConfig(learning_rate=lr, batch_size=16, epochs=epochs), series)
    return result, sampler


class TestRunContinuation:
    def test_record_counts(self, toy_setup):
        res, _ = continue_toy(toy_setup, ReviewPolicy(), epochs=7, baseline=False)
        assert len(res.series) == 7 * 10
        assert sorted(set(r.epoch for r in res.series.records)) == list(range(1, 8))
        res, _ = continue_toy(toy_setup, ReviewPolicy(), epochs=7)
        assert len(res.series) == 8 * 10

    def test_disabled_no_events_no_weight_change(self, toy_setup):
        res, sampler = continue_toy(toy_setup, ReviewPolicy(enabled=False))
        assert res.events == []
        assert all(w == res.weight_history[0] for w in res.weight_history)
        assert sampler.weights[8] == 0

    def test_review_events_consistent(self, toy_setup):
        res, sampler = continue_toy(toy_setup, ReviewPolicy())
        _, _, _, store = toy_setup
        assert len(res.events) >= 1
        last_end = -1
        for ev in res.events:
            assert ev.cls == 8
            assert ev.trigger_epoch > last_end  # reviews of one class never overlap
            assert ev.trigger_epoch <= ev.end_epoch
            trig = res.series.at(ev.trigger_epoch, 8)
            assert trig.recall_smoothed == ev.pre_recall
            assert ev.pre_recall < 0.8 * store.initial_recall[8]
            if not ev.truncated:
                assert ev.post_recall >= ev.target_peak
            # weight is boosted from the trigger epoch until the end epoch
            assert res.weight_history[ev.trigger_epoch][8] > 0
            assert res.weight_history[ev.end_epoch][8] == 0
            last_end = ev.end_epoch
        assert sampler.weights[8] == 0

    def test_truncation(self, toy_setup):
        res, _ = continue_toy(toy_setup, ReviewPolicy(max_review_epochs=1))
        assert res.events and all(ev.end_epoch - ev.trigger_epoch <= 1 for ev in res.events)
        assert any(ev.truncated for ev in res.events)

    def test_open_review_closed_at_end(self, toy_setup):
        full, _ = continue_toy(toy_setup, ReviewPolicy())
        first = full.events[0]
        # stop on the trigger epoch so the review is still running
        res, sampler = continue_toy(toy_setup, ReviewPolicy(), epochs=first.trigger_epoch)
        assert res.events[-1].truncated
        assert res.events[-1].end_epoch == first.trigger_epoch
        assert sampler.weights[8] == 0

    def test_excluded_must_start_at_zero(self, toy_setup):
        net, train, evaluation, store = toy_setup
        with pytest.raises(ConfigurationError):
            run_continuation(net.copy(), OptimState.for_network(net), WeightedSampler(train.labels),
                             train, evaluation, store, ReviewPolicy(), TrainConfig(epochs=1))

    def test_since_review_scope_targets(self, toy_setup):
        policy = ReviewPolicy(threshold_ratio=0.95, peak_scope="since_review", max_review_epochs=2)
        res, _ = continue_toy(toy_setup, policy, epochs=60)
        _, _, _, store = toy_setup
        assert len(res.events) >= 2
        assert res.events[0].target_peak == pytest.approx(store.initial_recall[8])
        for prev, ev in zip(res.events, res.events[1:]):
            ep = res.series.epochs(8)
            window = res.series.smoothed(8)[(ep >= prev.end_epoch) & (ep <= ev.trigger_epoch)]
            assert ev.target_peak == window.max()

    def test_deterministic(self, toy_setup):
        a, _ = continue_toy(toy_setup, ReviewPolicy(), epochs=15)
        b, _ = continue_toy(toy_setup, ReviewPolicy(), epochs=15)
        assert a.series.to_csv() == b.series.to_csv()
        assert events_to_jsonl(a.events) == events_to_jsonl(b.events)
