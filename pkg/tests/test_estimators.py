import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from conftest import toy_dataset
from nnforget.estimators import DecayCurveRegressor, DenseNetClassifier, PrototypeRecall


@pytest.fixture(scope="module")
def blobs():
    ds = toy_dataset(20, seed=1)
    return ds.images, ds.labels


class TestClassifier:
    def test_params_and_clone(self):
        clf = DenseNetClassifier(hidden_layer_sizes=(8,), epochs=3, seed=5)
        params = clf.get_params()
        assert params["hidden_layer_sizes"] == (8,) and params["seed"] == 5
        twin = clone(clf)
        assert twin.get_params() == params and twin is not clf

    def test_fit_predict(self, blobs):
        X, y = blobs
        clf = DenseNetClassifier(hidden_layer_sizes=(32,), learning_rate=3e-3, batch_size=16,
                                 epochs=60).fit(X, y)
        assert clf.score(X, y) >= 0.95
        proba = clf.predict_proba(X)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
        assert clf.transform(X).shape == (len(X), 32)
        assert len(clf.loss_curve_) == 60

    def test_string_labels(self, blobs):
        X, y = blobs
        names = np.array(list("abcdefghij"))[y]
        clf = DenseNetClassifier(hidden_layer_sizes=(16,), epochs=1).fit(X, names)
        assert set(clf.predict(X)) <= set(names)

    def test_partial_fit_needs_classes(self, blobs):
        X, y = blobs
        with pytest.raises(ValueError):
            DenseNetClassifier().partial_fit(X, y)
        clf = DenseNetClassifier(hidden_layer_sizes=(8,)).partial_fit(X[:50], y[:50], classes=np.arange(10))
        clf.partial_fit(X, y)
        assert len(clf.loss_curve_) == 2

    def test_withheld_class(self, blobs):
        X, y = blobs
        weights = np.ones(10)
        weights[8] = 0
        clf = DenseNetClassifier(hidden_layer_sizes=(16,), epochs=1, class_weight=weights).fit(X, y)
        assert clf.loss(X, y) > 0

    def test_not_fitted(self, blobs):
        with pytest.raises(NotFittedError):
            DenseNetClassifier().predict(blobs[0])

    def test_wrong_width(self, blobs):
        X, y = blobs
        clf = DenseNetClassifier(hidden_layer_sizes=(8,), epochs=1).fit(X, y)
        with pytest.raises(Exception):
            clf.predict(X[:, :5])


class TestPrototypeRecall:
    def test_rows_sum_to_one(self, blobs):
        X, y = blobs
        pr = PrototypeRecall(alpha=10.0).fit(X, y)
        R = pr.transform(X)
        assert R.shape == (len(X), 10)
        np.testing.assert_allclose(R.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(pr.class_recall(X, y), pr.initial_recall_, rtol=1e-12)

    def test_alpha_zero_uniform(self, blobs):
        X, y = blobs
        assert np.all(PrototypeRecall(alpha=0.0).fit(X, y).transform(X) == 0.1)

    def test_pipeline(self, blobs):
        X, y = blobs
        pipe = make_pipeline(DenseNetClassifier(hidden_layer_sizes=(16,), epochs=2), PrototypeRecall())
        pipe.fit(X, y)
        assert pipe.transform(X).shape == (len(X), 10)


class TestDecayCurveRegressor:
    def test_recovers_power_law(self):
        t = np.arange(60.0)
        y = 0.3 * (1 + t) ** -0.6 + 0.1
        reg = DecayCurveRegressor("power_law").fit(t, y)
        assert reg.params_["b"] == pytest.approx(0.6, rel=1e-3)
        assert reg.score(t.reshape(-1, 1), y) >= 1 - 1e-9
        np.testing.assert_allclose(reg.predict(t), y, atol=1e-6)

    def test_clone(self):
        reg = DecayCurveRegressor("exponential", n_starts=4, seed=2)
        assert clone(reg).get_params() == {"family": "exponential", "n_starts": 4, "seed": 2}

    def test_two_columns_rejected(self):
        with pytest.raises(ValueError):
            DecayCurveRegressor().fit(np.ones((10, 2)), np.ones(10))
