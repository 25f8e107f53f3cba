"""scikit-learn style wrappers around :func:`fedsim.engine.run_federation`.

``fit(X, y, groups=client_ids)`` partitions rows by client, runs the chosen
strategy and keeps the final state. ``predict(X, client=...)`` uses that
client's personalized model when the strategy has one, otherwise the global
model.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datagen import ClientDataset, FederatedDataset
from .engine import FederationConfig, RunContext, run_federation
from .errors import ConfigError
from .models import Batch, ModelSpec
from .strategies import build_strategy
from .strategies.base import Strategy


class _FederatedBase(BaseEstimator):
    _task = "regression"

    def __init__(self, strategy="fedavg", strategy_params=None, model="linear", hidden_dims=(),
                 rounds=50, local_epochs=1, batch_size="full", lr_local=0.1, lr_server=1.0,
                 sample_fraction=1.0, seed=0, workers=1):
        self.strategy = strategy
        self.strategy_params = strategy_params
        self.model = model
        self.hidden_dims = hidden_dims
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr_local = lr_local
        self.lr_server = lr_server
        self.sample_fraction = sample_fraction
        self.seed = seed
        self.workers = workers

    def _spec(self, input_dim: int, output_dim: int) -> ModelSpec:
        family = self.model
        if self._task == "classification" and family == "linear":
            family = "logistic"
        loss_kind = "cross_entropy" if self._task == "classification" else "squared_error"
        hidden = tuple(self.hidden_dims) if family == "mlp" else ()
        return ModelSpec(family, input_dim, output_dim, hidden, loss_kind=loss_kind)

    def _fit(self, X, y, groups, output_dim):
        if groups is None:
            groups = np.zeros(X.shape[0], dtype=np.int64)
        groups = np.asarray(groups)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("groups must have one entry per row")
        self.clients_ = np.unique(groups)
        spec = self._spec(X.shape[1], output_dim)
        clients = []
        for i, key in enumerate(self.clients_):
            rows = groups == key
            clients.append(ClientDataset(i, 0, Batch(X[rows], y[rows])))
        self.dataset_ = FederatedDataset(tuple(clients), spec)
        self.config_ = FederationConfig(
            rounds=self.rounds, local_epochs=self.local_epochs, batch_size=self.batch_size,
            lr_local=self.lr_local, lr_server=self.lr_server, sample_fraction=self.sample_fraction,
            strategy=self.strategy, strategy_params=dict(self.strategy_params or {}),
            seed=self.seed, workers=self.workers,
        )
        self.strategy_ = build_strategy(self.strategy, self.config_.strategy_params)
        self.state_, self.records_ = run_federation(self.config_, self.dataset_, self.strategy_)
        self.context_ = RunContext(self.config_, self.dataset_)
        self.n_features_in_ = X.shape[1]
        return self

    def _client_index(self, client):
        hits = np.nonzero(self.clients_ == client)[0]
        if hits.size == 0:
            raise ConfigError(f"unknown client {client!r}")
        return int(hits[0])

    def _raw_predict(self, X, client=None) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        strat, ctx, state = self.strategy_, self.context_, self.state_
        if client is None:
            # Ensembles predict as a whole; everything else uses the global model.
            if type(strat).predict is not Strategy.predict:
                return strat.predict(state, None, None, X, ctx)
            return ctx.model.predict(state.w.values, X)
        i = self._client_index(client)
        return strat.predict(state, state.clients[i], self.dataset_.clients[i], X, ctx)


class FederatedRegressor(RegressorMixin, _FederatedBase):
    """Federated least-squares regression (linear model or MLP)."""

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        return self._fit(X, y.astype(np.float64), groups, 1)

    def predict(self, X, client=None):
        return self._raw_predict(X, client)[:, 0]


class FederatedClassifier(ClassifierMixin, _FederatedBase):
    """Federated classifier (logistic model or MLP with cross-entropy)."""

    _task = "classification"

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        out_dim = 1 if self.classes_.size == 2 else self.classes_.size
        return self._fit(X, codes.astype(np.int64), groups, out_dim)

    def predict_proba(self, X, client=None):
        return self._raw_predict(X, client)

    def predict(self, X, client=None):
        return self.classes_[np.argmax(self.predict_proba(X, client), axis=1)]
