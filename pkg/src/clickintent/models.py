"""Scikit-learn style classifiers around the hand-written networks.

Every estimator trains with mini-batch Adam on the mean cross-entropy, applies
dropout only while training, and (given ``eval_set``) keeps the parameters of
the epoch with the best validation AUC under a patience rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .evalx import roc_auc
from .exceptions import DataError, NumericError, ShapeError
from .nncore import (
    AdamState,
    GradientSet,
    _labels,
    adam_step,
    cross_entropy,
    dense_head_backward,
    dropout_mask,
    ffnn_backward,
    ffnn_forward,
    glorot_uniform,
    init_params,
    register_param_class,
    sigmoid,
)
from .seqnet import (
    GATES,
    LstmParams,
    init_lstm,
    init_rnn,
    lstm_bptt,
    lstm_forward,
    lstm_layer_backward,
    lstm_layer_forward,
    rnn_bptt,
    rnn_forward,
)

log = logging.getLogger(__name__)

PREDICT_CHUNK = 1024


class EarlyStopping:
    """Track the best score; ask to stop after ``patience`` epochs without improvement."""

    def __init__(self, patience=5):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0

    def update(self, epoch, score):
        """Returns (improved, stop)."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            return True, False
        return False, epoch - self.best_epoch >= self.patience


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_auc: float | None


def _check_labels(y, n):
    y = np.asarray(y)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} rows")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    return y.astype(np.int64)


class _NeuralClassifierBase(ClassifierMixin, BaseEstimator):
    """Shared training loop. Subclasses define the network via four hooks."""

    def __init__(self, hidden_units=64, batch_size=128, dropout=0.0, max_epochs=100,
                 patience=5, seed=0, lr=0.001):
        self.hidden_units = hidden_units
        self.batch_size = batch_size
        self.dropout = dropout
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.lr = lr

    # ---- hooks
    def _validate_X(self, X):
        raise NotImplementedError

    def _init(self, X):
        raise NotImplementedError

    def _forward(self, params, X, rng):
        raise NotImplementedError

    def _backward(self, trace, y, params) -> GradientSet:
        raise NotImplementedError

    # ---- helpers shared by subclasses with a single array input
    @staticmethod
    def _n_rows(X):
        return X[0].shape[0] if isinstance(X, tuple) else X.shape[0]

    @staticmethod
    def _take(X, idx):
        return tuple(x[idx] for x in X) if isinstance(X, tuple) else X[idx]

    def _check_hyper(self):
        if self.hidden_units <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("hidden_units, batch_size and max_epochs must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def fit(self, X, y, eval_set=None):
        self._check_hyper()
        X = self._validate_X(X)
        n = self._n_rows(X)
        y = _check_labels(y, n)
        if eval_set is not None:
            Xv = self._validate_X(eval_set[0])
            yv = _check_labels(eval_set[1], self._n_rows(Xv))
        params = self._init(X)
        state = AdamState.for_params(params, lr=self.lr)
        rng = np.random.default_rng([int(self.seed), 1])
        stopper = EarlyStopping(self.patience)
        best = params
        history = []
        self.stopped_epoch_ = self.max_epochs
        for epoch in range(1, self.max_epochs + 1):
            order = rng.permutation(n)
            total = 0.0
            for b, start in enumerate(range(0, n, self.batch_size)):
                idx = order[start : start + self.batch_size]
                yb = y[idx]
                trace = self._forward(params, self._take(X, idx), rng)
                loss = float(np.mean(cross_entropy(trace.y_hat, yb)))
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
                total += loss * len(idx)
                params, state = adam_step(params, self._backward(trace, yb, params), state)
            val_auc = None
            if eval_set is not None:
                val_auc = roc_auc(self._scores(params, Xv), yv)[0]
            history.append(EpochLog(epoch, total / n, val_auc))
            log.debug("epoch %d loss %.5f val_auc %s", epoch, total / n, val_auc)
            if eval_set is None:
                best = params
                continue
            improved, stop = stopper.update(epoch, val_auc)
            if improved:
                best = params
            if stop:
                self.stopped_epoch_ = epoch
                break
        self.params_ = best
        self.history_ = history
        self.best_epoch_ = stopper.best_epoch if eval_set is not None else len(history)
        self.best_score_ = stopper.best_score if eval_set is not None else None
        self.classes_ = np.array([0, 1])
        return self

    def _scores(self, params, X):
        n = self._n_rows(X)
        out = np.empty(n)
        for start in range(0, n, PREDICT_CHUNK):
            sl = slice(start, start + PREDICT_CHUNK)
            out[sl] = self._forward(params, self._take(X, np.arange(n)[sl]), None).y_hat
        return out

    def decision_scores(self, X):
        check_is_fitted(self, "params_")
        return self._scores(self.params_, self._validate_X(X))

    def predict_proba(self, X):
        p = self.decision_scores(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_scores(X) >= 0.5).astype(np.int64)


def _array(X, ndim, what):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != ndim:
        raise ShapeError(f"{what} input must be {ndim}-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError(f"non-finite values in {what} input")
    return X


class FfnnClassifier(_NeuralClassifierBase):
    """Two hidden layers of ``hidden_units`` (tanh then ReLU) and a sigmoid output."""

    def _validate_X(self, X):
        return _array(X, 2, "tabular")

    def _init(self, X):
        H = self.hidden_units
        return init_params([X.shape[1], H, H, 1], self.seed)

    def _forward(self, params, X, rng):
        return ffnn_forward(params, X, self.dropout, rng)

    def _backward(self, trace, y, params):
        return ffnn_backward(trace, y, params)


class LstmClassifier(_NeuralClassifierBase):
    """LSTM layer, dropout on its last state, a dense ReLU layer and a sigmoid."""

    def _validate_X(self, X):
        return _array(X, 3, "sequence")

    def _init(self, X):
        return init_lstm(X.shape[2], self.hidden_units, self.hidden_units, seed=self.seed)

    def _forward(self, params, X, rng):
        return lstm_forward(params, X, dropout_rate=self.dropout, rng=rng)

    def _backward(self, trace, y, params):
        return lstm_bptt(trace, y, params)


class RnnClassifier(LstmClassifier):
    """Vanilla tanh recurrence; kept as a reference for the LSTM."""

    def _init(self, X):
        return init_rnn(X.shape[2], self.hidden_units, self.hidden_units, seed=self.seed)

    def _forward(self, params, X, rng):
        return rnn_forward(params, X, dropout_rate=self.dropout, rng=rng)

    def _backward(self, trace, y, params):
        return rnn_bptt(trace, y, params)


# ---------------------------------------------------------- hidden-level fusion


class ConcatParams(LstmParams):
    """LSTM gates, a demography layer ``Ue``/``ae`` and a joint dense head."""

    @property
    def demo_units(self):
        return self.dims[3]


register_param_class("concat_seq", ConcatParams)


def init_concat(seq_dim, hidden_units, demo_dim, demo_units, dense_units, seed=0):
    rng = np.random.default_rng(seed)
    arrays = {}
    for g in GATES:
        arrays[f"U{g}"] = glorot_uniform(rng, hidden_units, seq_dim)
        arrays[f"W{g}"] = glorot_uniform(rng, hidden_units, hidden_units)
        arrays[f"a{g}"] = np.zeros(hidden_units)
    arrays["Ue"] = glorot_uniform(rng, demo_units, demo_dim)
    arrays["ae"] = np.zeros(demo_units)
    arrays["Wd"] = glorot_uniform(rng, dense_units, hidden_units + demo_units)
    arrays["ad"] = np.zeros(dense_units)
    arrays["v"] = glorot_uniform(rng, 1, dense_units)[0]
    arrays["b"] = np.zeros(())
    dims = (seq_dim, hidden_units, demo_dim, demo_units, dense_units)
    return ConcatParams(arrays, dims, ("tanh", "tanh", "relu"), "concat_seq")


@dataclass
class ConcatTrace:
    x: np.ndarray
    xd: np.ndarray
    h: np.ndarray
    s: np.ndarray
    gates: dict
    he: np.ndarray
    z: np.ndarray
    r_pre: np.ndarray
    r: np.ndarray
    o: np.ndarray
    y_hat: np.ndarray
    drop_h: np.ndarray | None
    drop_e: np.ndarray | None


def concat_forward(params: ConcatParams, X, Xd, dropout_rate=0.0, rng=None) -> ConcatTrace:
    """``[drop(h(tau)), drop(tanh(ae + Ue xd))]`` into a dense ReLU and a sigmoid."""
    if X.shape[0] != Xd.shape[0]:
        raise ShapeError(f"{X.shape[0]} sequences but {Xd.shape[0]} demographic rows")
    hs, ss, gates = lstm_layer_forward(params, X)
    h_last = hs[:, -1]
    he = np.tanh(params["ae"] + Xd @ params["Ue"].T)
    drop_h = drop_e = None
    if rng is not None:
        drop_h = dropout_mask(rng, h_last.shape, dropout_rate)
        drop_e = dropout_mask(rng, he.shape, dropout_rate)
        h_last = h_last * drop_h
        he_used = he * drop_e
    else:
        he_used = he
    z = np.concatenate([h_last, he_used], axis=1)
    r_pre = params["ad"] + z @ params["Wd"].T
    r = np.maximum(r_pre, 0.0)
    o = params["b"] + r @ params["v"]
    return ConcatTrace(X, Xd, hs, ss, gates, he, z, r_pre, r, o, sigmoid(o), drop_h, drop_e)


def concat_backward(trace: ConcatTrace, y, params: ConcatParams) -> GradientSet:
    n = trace.x.shape[0]
    y = _labels(y, n)
    d_o = (trace.y_hat - y) / n
    grads, dz = dense_head_backward(params, d_o, trace.r, trace.r_pre, trace.z)
    H = params.hidden_units
    dh_last, dhe = dz[:, :H], dz[:, H:]
    if trace.drop_h is not None:
        dh_last = dh_last * trace.drop_h
        dhe = dhe * trace.drop_e
    dpre_e = dhe * (1.0 - trace.he**2)
    grads["Ue"] = dpre_e.T @ trace.xd
    grads["ae"] = dpre_e.sum(axis=0)
    grads.update(lstm_layer_backward(params, trace.x, trace.h, trace.s, trace.gates, dh_last))
    return {k: grads[k] for k in params.arrays}


class ConcatSequentialClassifier(_NeuralClassifierBase):
    """LSTM over clicks fused with a demography layer; ``X`` is ``(sequences, demographics)``."""

    def __init__(self, hidden_units=64, batch_size=128, dropout=0.0, max_epochs=100,
                 patience=5, seed=0, lr=0.001, demo_units=32):
        super().__init__(hidden_units, batch_size, dropout, max_epochs, patience, seed, lr)
        self.demo_units = demo_units

    def _validate_X(self, X):
        if not isinstance(X, (tuple, list)) or len(X) != 2:
            raise ShapeError("concat input must be a (sequences, demographics) pair")
        seq = _array(X[0], 3, "sequence")
        demo = _array(X[1], 2, "demographic")
        if seq.shape[0] != demo.shape[0]:
            raise DataError(f"{seq.shape[0]} sequences but {demo.shape[0]} demographic rows")
        return seq, demo

    def _init(self, X):
        seq, demo = X
        return init_concat(seq.shape[2], self.hidden_units, demo.shape[1], self.demo_units,
                           self.hidden_units, self.seed)

    def _forward(self, params, X, rng):
        return concat_forward(params, X[0], X[1], self.dropout, rng)

    def _backward(self, trace, y, params):
        return concat_backward(trace, y, params)


MODEL_CLASSES = {
    "engineered-ffnn": FfnnClassifier,
    "demography-ffnn": FfnnClassifier,
    "concat-engineered": FfnnClassifier,
    "sequential-lstm": LstmClassifier,
    "rnn-reference": RnnClassifier,
    "concat-sequential": ConcatSequentialClassifier,
}
