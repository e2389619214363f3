"""scikit-learn compatible wrappers around the model, data pipeline and federation loop.

Windows follow the ``(n_windows, channels, time)`` layout; raw streams use the
sklearn row convention ``(n_samples, n_channels)``.
"""

from __future__ import annotations

from functools import partial

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import data as _data
from ._validation import check_series, check_windows, check_windows_labels
from .aggregation import ServerState, StrategyConfig
from .ledger import Ledger, LedgerConfig
from .model import (ModelConfig, TrainConfig, class_weights_for, init_glorot, local_train,
                    predict_scores)
from .orchestrator import derive_seed, run_round


class SlidingWindowSegmenter(TransformerMixin, BaseEstimator):
    """Cut a ``(n_samples, n_channels)`` stream into overlapping windows."""

    def __init__(self, window_len=50, stride=25):
        self.window_len = window_len
        self.stride = stride

    def fit(self, X, y=None):
        X = check_series(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_series(X)
        return self.segment(X, np.zeros(X.shape[0], dtype=np.int64))[0]

    def segment(self, X, y):
        """Windows and their majority labels, ``((N, C, T), (N,))``."""
        X = check_series(X)
        y = np.asarray(y, dtype=np.int64)
        record = _data.TimeSeriesRecord(np.ascontiguousarray(X.T), y, sample_rate_hz=1)
        ds = _data.window(record, self.window_len, self.stride)
        return ds.windows, ds.labels


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel z-score fitted on training windows."""

    def fit(self, X, y=None):
        X = check_windows(X)
        ds = _data.WindowedDataset(X, np.zeros(len(X), dtype=np.int64), X.shape[2], 1, 1)
        self.mean_, self.scale_ = _data.channel_stats(ds)
        return self

    def transform(self, X):
        check_is_fitted(self, ("mean_", "scale_"))
        X = check_windows(X, n_channels=self.mean_.shape[0])
        return (X - self.mean_[None, :, None]) / self.scale_[None, :, None]


class _ConvLSTMBase(ClassifierMixin, BaseEstimator):

    def _prepare(self, X, y):
        X, y = check_windows_labels(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes to fit a classifier")
        self.model_config_ = ModelConfig(
            in_channels=X.shape[1], window_len=X.shape[2], conv_layers=self.conv_layers,
            conv_filters=self.conv_filters, filter_size=self.filter_size,
            hidden_units=self.hidden_units, num_classes=self.classes_.size,
        )
        return X, y_enc.astype(np.int64)

    def _weights(self, y_enc):
        if self.class_weight == "balanced":
            return None  # local_train derives inverse-frequency weights per shard
        if self.class_weight is None:
            return np.ones(self.classes_.size)
        raise ValueError(f"class_weight must be 'balanced' or None, got {self.class_weight!r}")

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        cfg = self.model_config_
        X = check_windows(X, n_channels=cfg.in_channels, window_len=cfg.window_len)
        return predict_scores(self.params_, X, cfg)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ConvLSTMClassifier(_ConvLSTMBase):
    """Conv + single-LSTM classifier trained on one machine with Adam."""

    def __init__(self, hidden_units=128, conv_layers=4, conv_filters=64, filter_size=11,
                 learning_rate=1e-4, weight_decay=1e-6, epochs=10, batch_size=64,
                 class_weight="balanced", random_state=0):
        self.hidden_units = hidden_units
        self.conv_layers = conv_layers
        self.conv_filters = conv_filters
        self.filter_size = filter_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.class_weight = class_weight
        self.random_state = random_state

    def fit(self, X, y):
        X, y_enc = self._prepare(X, y)
        shard = _data.WindowedDataset(X, y_enc, X.shape[2], 1, self.classes_.size)
        init = init_glorot(self.model_config_, derive_seed(self.random_state, "init"))
        train = TrainConfig(self.learning_rate, self.weight_decay, self.epochs, self.batch_size,
                            seed=derive_seed(self.random_state, "train"))
        update = local_train(init, shard, self.model_config_, train, class_weights=self._weights(y_enc))
        self.params_ = update.params
        self.train_loss_ = update.train_loss
        return self


class FederatedConvLSTMClassifier(_ConvLSTMBase):
    """The same network trained by simulated clients under one aggregation strategy.

    Every committed global model is recorded in ``ledger_``; ``history_`` has
    one entry per round.
    """

    def __init__(self, hidden_units=128, conv_layers=4, conv_filters=64, filter_size=11,
                 learning_rate=1e-4, weight_decay=1e-6, batch_size=64, class_weight="balanced",
                 strategy="FedAvg", num_clients=3, rounds=20, local_epochs=1, partition="iid",
                 trim_fraction=0.2, krum_f=0, server_momentum=0.9, server_lr=1.0, prox_mu=0.01,
                 peer_count=2, random_state=0):
        self.hidden_units = hidden_units
        self.conv_layers = conv_layers
        self.conv_filters = conv_filters
        self.filter_size = filter_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.class_weight = class_weight
        self.strategy = strategy
        self.num_clients = num_clients
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.partition = partition
        self.trim_fraction = trim_fraction
        self.krum_f = krum_f
        self.server_momentum = server_momentum
        self.server_lr = server_lr
        self.prox_mu = prox_mu
        self.peer_count = peer_count
        self.random_state = random_state

    def fit(self, X, y, client_ids=None):
        """Fit; ``client_ids`` (one per window, values 0..n-1) fixes the data split."""
        X, y_enc = self._prepare(X, y)
        if client_ids is None:
            plan = _data.partition_clients(y_enc, self.num_clients, self.partition,
                                           derive_seed(self.random_state, "partition"))
            assignment = plan.assignment
        else:
            assignment = np.asarray(client_ids, dtype=np.int64)
            if assignment.shape != y_enc.shape:
                raise ValueError("client_ids must hold one client id per window")
        n_clients = int(assignment.max()) + 1
        shards = []
        for c in range(n_clients):
            idx = np.flatnonzero(assignment == c)
            if idx.size == 0:
                raise ValueError(f"client {c} has no windows")
            shards.append(_data.WindowedDataset(X[idx], y_enc[idx], X.shape[2], 1, self.classes_.size))

        strategy = StrategyConfig(self.strategy, self.trim_fraction, self.krum_f,
                                  self.server_momentum, self.server_lr, self.prox_mu)
        train = TrainConfig(self.learning_rate, self.weight_decay, self.local_epochs, self.batch_size)
        trainer = partial(local_train, class_weights=self._weights(y_enc))
        init = init_glorot(self.model_config_, derive_seed(self.random_state, "init"))
        ledger = Ledger(LedgerConfig(self.peer_count))
        ledger.genesis(init, strategy.kind.value)
        state = ServerState(init)
        history = []
        for _ in range(self.rounds):
            outcome = run_round(
                state, shards, self.model_config_, train, strategy, ledger,
                seed_for=lambda c, r: derive_seed(self.random_state, "train", c, r),
                trainer=trainer,
            )
            state = outcome.state
            history.append({
                "round": state.round if outcome.committed else state.round + 1,
                "committed": outcome.committed,
                "train_loss": float(np.mean([u.train_loss for u in outcome.updates])),
                "params_digest": ledger.head.params_digest.hex(),
            })
        self.params_ = state.global_params
        self.ledger_ = ledger
        self.history_ = history
        self.n_clients_ = n_clients
        return self
