"""Feed-forward network with hand-written backpropagation, Adam and dropout.

All parameter containers hold a ``dict`` of float64 arrays keyed by name so the
same optimizer and serializer work for the feed-forward, recurrent and LSTM
networks. Gradients use the same dict layout (a "gradient set").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    InvalidArchitectureError,
    InvalidLabelError,
    NumericError,
    ShapeError,
)

SCHEMA_VERSION = 1
CLAMP_EPS = 1e-12
ACTIVATIONS = ("tanh", "relu")

GradientSet = dict  # name -> ndarray, shape-congruent with a ParamSet


def sigmoid(z):
    # tanh form: never overflows and avoids branching on the sign
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * np.tanh(0.5 * z) + 0.5


def glorot_uniform(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class ParamSet:
    """Named float64 arrays plus the architecture that produced them."""

    arrays: dict
    dims: tuple = ()
    activations: tuple = ()
    kind: str = "ffnn"

    def __post_init__(self):
        # numpy ops on 0-d arrays return scalars; keep every entry an ndarray
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in self.arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def copy(self):
        return type(self)(
            {k: v.copy() for k, v in self.arrays.items()},
            self.dims,
            self.activations,
            self.kind,
        )

    def zeros_like(self) -> GradientSet:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def with_arrays(self, arrays):
        return type(self)(arrays, self.dims, self.activations, self.kind)


class FfnnParams(ParamSet):
    """Hidden layers ``U{l}``/``a{l}`` (l = 1..L), output weights ``v`` and bias ``b``."""

    @property
    def n_hidden(self):
        return len(self.dims) - 2


def init_params(layer_dims, seed, activations=None) -> FfnnParams:
    """Glorot-uniform weights and zero biases for a feed-forward net.

    ``layer_dims`` is ``[in_dim, hidden_1, ..., hidden_L, 1]``. The first hidden
    layer defaults to tanh and later ones to ReLU.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise InvalidArchitectureError(f"invalid layer dims {layer_dims!r}")
    if dims[-1] != 1:
        raise InvalidArchitectureError("output layer must have a single unit")
    n_hidden = len(dims) - 2
    if activations is None:
        activations = ("tanh",) + ("relu",) * max(n_hidden - 1, 0)
    activations = tuple(activations)
    if len(activations) != n_hidden or any(a not in ACTIVATIONS for a in activations):
        raise InvalidArchitectureError(f"bad activation tags {activations!r}")

    rng = np.random.default_rng(seed)
    arrays = {}
    for layer in range(1, n_hidden + 1):
        arrays[f"U{layer}"] = glorot_uniform(rng, dims[layer], dims[layer - 1])
        arrays[f"a{layer}"] = np.zeros(dims[layer])
    arrays["v"] = glorot_uniform(rng, 1, dims[-2])[0]
    arrays["b"] = np.zeros(())
    return FfnnParams(arrays, tuple(dims), activations, "ffnn")


def _activate(z, tag):
    if tag == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(h, z, tag):
    # derivative expressed through the stored activation / pre-activation
    if tag == "tanh":
        return 1.0 - h * h
    return (z > 0).astype(np.float64)


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre: list
    hidden: list
    o: np.ndarray
    y_hat: np.ndarray
    masks: list = field(default_factory=list)
    single: bool = False


def dropout_mask(rng, shape, rate):
    """Inverted dropout mask: survivors are scaled by ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def ffnn_forward(params: FfnnParams, x, dropout_rate=0.0, rng=None) -> ForwardTrace:
    """Forward pass for one input vector or a ``(n, d)`` batch.

    Dropout is only active when ``rng`` is given and hits the first hidden layer.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.dims[0]:
        raise ShapeError(f"input has shape {x.shape}, network expects {params.dims[0]} features")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input to ffnn_forward")

    pre, hidden, masks = [], [], []
    h = X
    for layer, tag in enumerate(params.activations, start=1):
        z = params[f"a{layer}"] + h @ params[f"U{layer}"].T
        h = _activate(z, tag)
        if layer == 1 and rng is not None:
            m = dropout_mask(rng, h.shape, dropout_rate)
            masks.append(m)
            h = h * m
        pre.append(z)
        hidden.append(h)
    o = params["b"] + h @ params["v"]
    return ForwardTrace(X, pre, hidden, o, sigmoid(o), masks, single)


def cross_entropy(y_hat, y):
    """Binary cross-entropy with the prediction clamped to ``[1e-12, 1-1e-12]``."""
    y_arr = np.asarray(y)
    if not np.all((y_arr == 0) | (y_arr == 1)):
        raise InvalidLabelError(f"labels must be 0 or 1, got {y!r}")
    p = np.clip(np.asarray(y_hat, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
    loss = -(y_arr * np.log(p) + (1 - y_arr) * np.log(1.0 - p))
    return float(loss) if loss.ndim == 0 else loss


def _labels(y, n):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} predictions")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidLabelError("labels must be 0 or 1")
    return y


def dense_head_backward(params, d_o, r, r_pre, z, dense=True):
    """Backprop through ``o = b + relu(ad + Wd z) . v``; returns (grads, dL/dz)."""
    grads = {"b": np.asarray(d_o.sum()), "v": r.T @ d_o}
    dr = d_o[:, None] * params["v"][None, :]
    if not dense:
        return grads, dr
    dpre = dr * (r_pre > 0)
    grads["Wd"] = dpre.T @ z
    grads["ad"] = dpre.sum(axis=0)
    return grads, dpre @ params["Wd"]


def ffnn_backward(trace: ForwardTrace, y, params: FfnnParams) -> GradientSet:
    """Exact gradients of the mean cross-entropy over the traced batch."""
    n = trace.x.shape[0]
    if len(trace.hidden) != params.n_hidden or trace.x.shape[1] != params.dims[0]:
        raise ShapeError("trace does not match parameter set")
    y = _labels(y, n)
    d_o = (trace.y_hat - y) / n
    grads = {"b": np.asarray(d_o.sum()), "v": trace.hidden[-1].T @ d_o}
    dh = d_o[:, None] * params["v"][None, :]
    for layer in range(params.n_hidden, 0, -1):
        tag = params.activations[layer - 1]
        h = trace.hidden[layer - 1]
        if layer == 1 and trace.masks:
            mask = trace.masks[0]
            dh = dh * mask
            h_raw = _activate(trace.pre[0], tag)
        else:
            h_raw = h
        dz = dh * _activation_grad(h_raw, trace.pre[layer - 1], tag)
        below = trace.x if layer == 1 else trace.hidden[layer - 2]
        grads[f"U{layer}"] = dz.T @ below
        grads[f"a{layer}"] = dz.sum(axis=0)
        dh = dz @ params[f"U{layer}"]
    return {k: grads[k] for k in params.arrays}


@dataclass
class AdamState:
    """First/second moments, step counter and hyperparameters.

    Defaults are TensorFlow's Keras defaults.
    """

    m: dict
    v: dict
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def for_params(cls, params: ParamSet, **hyper):
        state = cls(params.zeros_like(), params.zeros_like(), 0, **hyper)
        if not (0 < state.beta1 < 1 and 0 < state.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if state.lr <= 0 or state.eps <= 0:
            raise ValueError("step size and eps must be positive")
        return state


def adam_step(params: ParamSet, grads: GradientSet, state: AdamState):
    """One bias-corrected Adam update. Returns new (params, state); inputs untouched."""
    if set(grads) != set(params.arrays):
        raise ShapeError(f"gradient keys {sorted(grads)} != params {sorted(params.arrays)}")
    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_arrays, new_m, new_v = {}, {}, {}
    for name, p in params.arrays.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, param has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_arrays[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    return params.with_arrays(new_arrays), new_state


def params_to_dict(params: ParamSet, config=None, seed=None, extra=None):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": params.kind,
        "dims": list(params.dims),
        "activations": list(params.activations),
        "params": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr).reshape(-1).tolist()}
            for name, arr in params.arrays.items()
        },
        "config": config or {},
        "seed": seed,
    }
    if extra:
        doc.update(extra)
    return doc


def params_from_dict(doc) -> ParamSet:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    kind = doc["kind"]
    cls = _PARAM_CLASSES.get(kind, ParamSet)
    return cls(arrays, tuple(doc["dims"]), tuple(doc["activations"]), kind)


def save_params(path, params, **kwargs):
    with open(path, "w") as fh:
        json.dump(params_to_dict(params, **kwargs), fh, sort_keys=True)


def load_params(path) -> ParamSet:
    with open(path) as fh:
        return params_from_dict(json.load(fh))


_PARAM_CLASSES: dict = {"ffnn": FfnnParams}


def register_param_class(kind: str, cls: type):
    _PARAM_CLASSES[kind] = cls
