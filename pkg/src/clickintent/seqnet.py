"""Vanilla RNN and LSTM sequence classifiers with hand-derived BPTT.

Both read a whole (pre-padded) sequence and emit one sigmoid prediction from the
final step. An optional dense ReLU layer sits between the recurrent state and the
logit. Inputs are ``(T, D)`` for one sequence or ``(N, T, D)`` for a batch;
gradients are of the mean loss over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ShapeError, NumericError
from .nncore import (
    GradientSet,
    ParamSet,
    _labels,
    dense_head_backward,
    dropout_mask,
    glorot_uniform,
    register_param_class,
    sigmoid,
)

GATES = ("f", "g", "s", "q")


class RnnParams(ParamSet):
    """``U`` (H x D), ``W`` (H x H), ``a``; head ``Wd``/``ad`` (optional), ``v``, ``b``."""

    @property
    def hidden_units(self):
        return self.dims[1]

    @property
    def has_dense(self):
        return "Wd" in self.arrays


class LstmParams(RnnParams):
    """Gate triples ``U{g}``, ``W{g}``, ``a{g}`` for g in f, g, s, q plus the head."""


register_param_class("rnn", RnnParams)
register_param_class("lstm", LstmParams)


def _head_init(rng, arrays, hidden, dense_units):
    if dense_units:
        arrays["Wd"] = glorot_uniform(rng, dense_units, hidden)
        arrays["ad"] = np.zeros(dense_units)
        arrays["v"] = glorot_uniform(rng, 1, dense_units)[0]
    else:
        arrays["v"] = glorot_uniform(rng, 1, hidden)[0]
    arrays["b"] = np.zeros(())


def init_rnn(input_dim, hidden_units, dense_units=None, seed=0) -> RnnParams:
    """Glorot-uniform vanilla RNN. ``dense_units=None`` gives the bare h -> o head."""
    rng = np.random.default_rng(seed)
    arrays = {
        "U": glorot_uniform(rng, hidden_units, input_dim),
        "W": glorot_uniform(rng, hidden_units, hidden_units),
        "a": np.zeros(hidden_units),
    }
    _head_init(rng, arrays, hidden_units, dense_units)
    dims = (input_dim, hidden_units) + ((dense_units,) if dense_units else ())
    return RnnParams(arrays, dims, ("tanh",) + (("relu",) if dense_units else ()), "rnn")


def init_lstm(input_dim, hidden_units, dense_units=None, seed=0) -> LstmParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for g in GATES:
        arrays[f"U{g}"] = glorot_uniform(rng, hidden_units, input_dim)
        arrays[f"W{g}"] = glorot_uniform(rng, hidden_units, hidden_units)
        arrays[f"a{g}"] = np.zeros(hidden_units)
    _head_init(rng, arrays, hidden_units, dense_units)
    dims = (input_dim, hidden_units) + ((dense_units,) if dense_units else ())
    return LstmParams(arrays, dims, ("tanh",) + (("relu",) if dense_units else ()), "lstm")


@dataclass
class SequenceTrace:
    x: np.ndarray  # (N, T, D)
    h: np.ndarray  # (N, T, H)
    z: np.ndarray  # head input, h(tau) after dropout
    r_pre: Optional[np.ndarray]
    r: np.ndarray
    o: np.ndarray
    y_hat: np.ndarray
    mask: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    gates: dict = field(default_factory=dict)
    dropout: Optional[np.ndarray] = None
    single: bool = False


def _as_batch(params, seq):
    X = np.asarray(seq, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != params.dims[0]:
        raise ShapeError(
            f"sequence has shape {np.shape(seq)}, model expects input dimension {params.dims[0]}"
        )
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite sequence input")
    return X, single


def head_forward(params, h_last, dropout_rate=0.0, rng=None):
    """Dropout on the recurrent output, then optional dense ReLU, then logit."""
    drop = None
    z = h_last
    if rng is not None:
        drop = dropout_mask(rng, h_last.shape, dropout_rate)
        z = h_last * drop
    if "Wd" in params.arrays:
        r_pre = params["ad"] + z @ params["Wd"].T
        r = np.maximum(r_pre, 0.0)
    else:
        r_pre, r = None, z
    o = params["b"] + r @ params["v"]
    return z, r_pre, r, o, drop


def rnn_forward(params: RnnParams, seq, mask=None, dropout_rate=0.0, rng=None) -> SequenceTrace:
    """``h(t) = tanh(a + W h(t-1) + U x(t))`` from ``h(-1) = 0``; read out at the last step."""
    X, single = _as_batch(params, seq)
    n, T, _ = X.shape
    H = params.hidden_units
    XU = X @ params["U"].T
    WT = params["W"].T
    hs = np.empty((n, T, H))
    h = np.zeros((n, H))
    for t in range(T):
        h = np.tanh(params["a"] + h @ WT + XU[:, t])
        hs[:, t] = h
    z, r_pre, r, o, drop = head_forward(params, h, dropout_rate, rng)
    return SequenceTrace(X, hs, z, r_pre, r, o, sigmoid(o), mask, dropout=drop, single=single)


def _head_grads(trace, y, params):
    n = trace.x.shape[0]
    y = _labels(y, n)
    d_o = (trace.y_hat - y) / n
    grads, dz = dense_head_backward(
        params, d_o, trace.r, trace.r_pre, trace.z, dense="Wd" in params.arrays
    )
    dh_last = dz if trace.dropout is None else dz * trace.dropout
    return grads, dh_last


def rnn_bptt(trace: SequenceTrace, y, params: RnnParams) -> GradientSet:
    """Closed-form BPTT for the tanh recurrence.

    Hidden-state gradients are computed first by the backward recursion
    ``dL/dh(t) = W^T diag(1 - h(t+1)^2) dL/dh(t+1)``, then the shared-weight
    gradients are summed over time steps.
    """
    if trace.h.shape[2] != params.hidden_units or trace.x.shape[2] != params.dims[0]:
        raise ShapeError("trace does not match parameter set")
    grads, dh_last = _head_grads(trace, y, params)
    X, Hs = trace.x, trace.h
    n, T, H = Hs.shape

    dh = np.empty_like(Hs)
    dh[:, T - 1] = dh_last
    W = params["W"]
    for t in range(T - 2, -1, -1):
        dh[:, t] = ((1.0 - Hs[:, t + 1] ** 2) * dh[:, t + 1]) @ W

    dpre = (1.0 - Hs**2) * dh
    h_prev = np.concatenate([np.zeros((n, 1, H)), Hs[:, :-1]], axis=1)
    grads["a"] = dpre.sum(axis=(0, 1))
    grads["W"] = np.einsum("nti,ntj->ij", dpre, h_prev)
    grads["U"] = np.einsum("nti,ntj->ij", dpre, X)
    return {k: grads[k] for k in params.arrays}


def _stack_gates(params):
    U = np.concatenate([params[f"U{g}"] for g in GATES], axis=0)
    W = np.concatenate([params[f"W{g}"] for g in GATES], axis=0)
    a = np.concatenate([params[f"a{g}"] for g in GATES])
    return U, W, a


def lstm_layer_forward(params: LstmParams, X):
    """Run the LSTM cell over a batch; returns hidden states, cell states and gates.

    Work arrays are time-major for contiguous per-step access; the returned
    arrays are ``(N, T, .)`` views of them.
    """
    n, T, _ = X.shape
    H = params.hidden_units
    U, W, a = _stack_gates(params)
    # a single 2-D product; numpy's stacked 3-D matmul is far slower here
    XU = (np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(T * n, -1) @ U.T).reshape(T, n, 4 * H)
    XU += a
    WT = np.ascontiguousarray(W.T)
    hs = np.empty((T, n, H))
    ss = np.empty((T, n, H))
    acts = np.empty((T, n, 4 * H))
    h = np.zeros((n, H))
    s = np.zeros((n, H))
    # one tanh over all gates: sigmoid(x) = 0.5 tanh(x / 2) + 0.5 on f, g and q
    half = np.full(4 * H, 0.5)
    half[2 * H : 3 * H] = 1.0
    shift = np.where(half == 0.5, 0.5, 0.0)
    for t in range(T):
        act = acts[t]
        np.matmul(h, WT, out=act)
        act += XU[t]
        act *= half
        np.tanh(act, out=act)
        act *= half
        act += shift
        f, g, s_tilde, q = (act[:, k * H : (k + 1) * H] for k in range(4))
        s = f * s + g * s_tilde
        h = q * np.tanh(s)
        hs[t] = h
        ss[t] = s
    acts = acts.transpose(1, 0, 2)
    gates = {name: acts[:, :, k * H : (k + 1) * H] for k, name in enumerate(GATES)}
    gates["_stacked"] = acts
    return hs.transpose(1, 0, 2), ss.transpose(1, 0, 2), gates


def lstm_layer_backward(params: LstmParams, X, hs, ss, gates, dh_last):
    """Reverse accumulation through the gate equations, given dL/dh(tau).

    Only the ``dh``/``ds`` recursion runs step by step; every local derivative
    is computed for all steps at once beforehand.
    """
    n, T, H = hs.shape
    acts = gates["_stacked"].transpose(1, 0, 2)
    S = ss.transpose(1, 0, 2)
    f, g, s_tilde, q = (acts[:, :, k * H : (k + 1) * H] for k in range(4))
    S_prev = np.concatenate([np.zeros((1, n, H)), S[:-1]])
    tanh_s = np.tanh(S)
    # dpre = [ds, ds, ds, dh] * coef, stepwise
    coef = np.concatenate([
        S_prev * f * (1.0 - f),
        s_tilde * g * (1.0 - g),
        g * (1.0 - s_tilde**2),
        tanh_s * q * (1.0 - q),
    ], axis=2)
    dh_to_ds = q * (1.0 - tanh_s**2)
    _, W, _ = _stack_gates(params)
    dpre_all = np.empty((T, n, 4 * H))
    dh = dh_last.copy()
    ds = np.zeros((n, H))
    for t in range(T - 1, -1, -1):
        ds = ds + dh * dh_to_ds[t]
        dpre = dpre_all[t]
        dpre[:, : 3 * H] = np.tile(ds, 3)
        dpre[:, 3 * H :] = dh
        dpre *= coef[t]
        dh = dpre @ W
        ds = ds * f[t]
    Hs = hs.transpose(1, 0, 2)
    h_prev = np.concatenate([np.zeros((1, n, H)), Hs[:-1]])
    flat = dpre_all.reshape(T * n, 4 * H)
    dU = flat.T @ np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(T * n, -1)
    dW = flat.T @ h_prev.reshape(T * n, H)
    da = flat.sum(axis=0)
    grads = {}
    for k, g in enumerate(GATES):
        sl = slice(k * H, (k + 1) * H)
        grads[f"U{g}"] = dU[sl]
        grads[f"W{g}"] = dW[sl]
        grads[f"a{g}"] = da[sl]
    return grads


def lstm_forward(params: LstmParams, seq, mask=None, dropout_rate=0.0, rng=None) -> SequenceTrace:
    """Forget/input/candidate/output gates from ``h(-1) = s(-1) = 0``, sigmoid head at the end."""
    X, single = _as_batch(params, seq)
    hs, ss, gates = lstm_layer_forward(params, X)
    z, r_pre, r, o, drop = head_forward(params, hs[:, -1], dropout_rate, rng)
    return SequenceTrace(
        X, hs, z, r_pre, r, o, sigmoid(o), mask, s=ss, gates=gates, dropout=drop, single=single
    )


def lstm_bptt(trace: SequenceTrace, y, params: LstmParams) -> GradientSet:
    if trace.h.shape[2] != params.hidden_units or trace.x.shape[2] != params.dims[0]:
        raise ShapeError("trace does not match parameter set")
    grads, dh_last = _head_grads(trace, y, params)
    grads.update(lstm_layer_backward(params, trace.x, trace.h, trace.s, trace.gates, dh_last))
    return {k: grads[k] for k in params.arrays}


def power_iteration_demo(W, h0, t):
    """Norms of ``W^k h0`` for k = 1..t: the linear recurrence without inputs."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ShapeError(f"W must be square, got shape {W.shape}")
    h = np.asarray(h0, dtype=np.float64)
    norms = np.empty(int(t))
    for k in range(int(t)):
        h = W @ h
        norms[k] = np.linalg.norm(h)
    return norms
