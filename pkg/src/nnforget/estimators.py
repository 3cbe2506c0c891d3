"""scikit-learn compatible wrappers.

``DenseNetClassifier`` trains the MLP, ``PrototypeRecall`` turns hidden
states into per-class recall probabilities and ``DecayCurveRegressor`` fits
one memory-decay family. All three follow the usual estimator contract
(``get_params``/``set_params``, trailing-underscore fitted attributes), so
they can sit in pipelines and grid searches.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import memfit
from .data import ImageDataset, WeightedSampler
from .network import (OptimState, TrainConfig, init_network, loss_and_gradients, predict_logits,
                      hidden_states, train_epoch)
from .retention import DEFAULT_ALPHA, PrototypeStore, per_class_recall, softmax_rows


class DenseNetClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP trained with Adam on softmax cross-entropy.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    learning_rate : float
    batch_size : int
    epochs : int
        Epochs run by :meth:`fit`. :meth:`partial_fit` always runs one.
    class_weight : sequence of float or None
        Per-class sampling weights; a zero weight withholds that class.
    seed : int
    """

    def __init__(self, hidden_layer_sizes=(256, 256, 256), learning_rate=1e-4, batch_size=64,
                 epochs=20, class_weight=None, seed=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.class_weight = class_weight
        self.seed = seed

    def _train_config(self, epochs):
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           epochs=epochs, seed=self.seed)

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels not seen in `classes`")
        return idx

    def _init(self, X, classes):
        self.classes_ = np.asarray(classes)
        self.n_features_in_ = X.shape[1]
        dims = [X.shape[1], *self.hidden_layer_sizes, len(self.classes_)]
        self.net_ = init_network(dims, self.seed)
        self.opt_state_ = OptimState.for_network(self.net_)
        self._epoch_count = 0
        self.loss_curve_ = []

    def _run_epochs(self, X, y, epochs):
        data = ImageDataset(X, self._encode(y))
        weights = None if self.class_weight is None else np.asarray(self.class_weight, dtype=float)
        sampler = WeightedSampler(data.labels, weights, seed=self.seed + 1 + self._epoch_count,
                                  n_classes=len(self.classes_))
        cfg = self._train_config(epochs)
        for _ in range(epochs):
            stats = train_epoch(self.net_, self.opt_state_, sampler, data, cfg)
            self.loss_curve_.append(stats.mean_loss)
            self._epoch_count += 1

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._init(X, unique_labels(y))
        self._run_epochs(X, y, self.epochs)
        return self

    def partial_fit(self, X, y, classes=None):
        """One more epoch; ``classes`` is required on the first call."""
        X, y = check_X_y(X, y, dtype=np.float64)
        if not hasattr(self, "net_"):
            if classes is None:
                raise ValueError("classes must be passed on the first call to partial_fit")
            self._init(X, np.sort(np.asarray(classes)))
        self._run_epochs(X, y, 1)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return predict_logits(self.net_, X)

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X):
        """Last-hidden-layer activations."""
        check_is_fitted(self, "net_")
        return hidden_states(self.net_, check_array(X, dtype=np.float64))

    def loss(self, X, y):
        check_is_fitted(self, "net_")
        X, y = check_X_y(X, y, dtype=np.float64)
        return loss_and_gradients(self.net_, X, self._encode(y))[0]


class PrototypeRecall(TransformerMixin, BaseEstimator):
    """Class-mean prototypes over hidden states; ``transform`` gives recall probabilities.

    ``fit(H, y)`` stores one prototype per class and the initial per-class
    recall; ``transform(H)`` returns an ``(n, n_classes)`` matrix whose rows
    sum to one.
    """

    def __init__(self, alpha=DEFAULT_ALPHA):
        self.alpha = alpha

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        idx = np.searchsorted(self.classes_, y)
        protos = np.stack([X[idx == k].mean(axis=0) for k in range(len(self.classes_))])
        store = PrototypeStore(protos, np.zeros(len(self.classes_)), float(self.alpha))
        store.initial_recall = per_class_recall(X, idx, store)
        self.store_ = store
        self.prototypes_ = store.prototypes
        self.initial_recall_ = store.initial_recall
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "store_")
        return self.store_.recall_matrix(check_array(X, dtype=np.float64))

    def class_recall(self, X, y):
        """Mean recall of each class over its own rows of ``X``."""
        check_is_fitted(self, "store_")
        X, y = check_X_y(X, y, dtype=np.float64)
        return per_class_recall(X, np.searchsorted(self.classes_, y), self.store_)


class DecayCurveRegressor(RegressorMixin, BaseEstimator):
    """Least-squares fit of one decay family to ``(t, recall)`` data.

    ``X`` is the time axis, either 1-D or a single column.
    """

    def __init__(self, family="power_law", n_starts=memfit.N_STARTS, seed=0):
        self.family = family
        self.n_starts = n_starts
        self.seed = seed

    @staticmethod
    def _time(X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 1:
            raise ValueError(f"expected a single time column, got {X.shape[1]} columns")
        return X[:, 0]

    def fit(self, X, y):
        t = self._time(X)
        y = check_array(np.asarray(y, dtype=np.float64).reshape(-1, 1))[:, 0]
        self.result_ = memfit.fit_curve(self.family, np.column_stack([t, y]),
                                        n_starts=self.n_starts, seed=self.seed)
        self.model_ = self.result_.model
        self.params_ = dict(self.model_.params)
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_(self._time(X))
