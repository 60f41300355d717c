import math

import numpy as np
import pytest

from _oracles import central_differences, max_relative_error
from clickintent.exceptions import ShapeError
from clickintent.nncore import FfnnParams, cross_entropy, ffnn_forward, params_from_dict, params_to_dict
from clickintent.seqnet import (
    GATES,
    LstmParams,
    RnnParams,
    init_lstm,
    init_rnn,
    lstm_bptt,
    lstm_forward,
    power_iteration_demo,
    rnn_bptt,
    rnn_forward,
)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def zeroed(params):
    return params.with_arrays({k: np.zeros_like(v) for k, v in params.arrays.items()})


def noisy(params, rng, scale=0.4):
    return params.with_arrays({k: v + rng.normal(scale=scale, size=v.shape)
                               for k, v in params.arrays.items()})


def loss_of(forward, X, y):
    return lambda q: float(np.mean(cross_entropy(forward(q, X).y_hat, y)))


def vanilla_reverse_accumulation(params, X, y):
    """Generic reverse-mode sweep over the unrolled tanh cell, step by step.

    Written independently of the closed-form BPTT: each step's local Jacobians
    are applied in reverse order while parameter gradients accumulate.
    """
    n, T, D = X.shape
    H = params.hidden_units
    hs = [np.zeros((n, H))]
    for t in range(T):
        hs.append(np.tanh(params["a"] + hs[-1] @ params["W"].T + X[:, t] @ params["U"].T))
    last = hs[-1]
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    if "Wd" in params.arrays:
        r_pre = params["ad"] + last @ params["Wd"].T
        r = np.maximum(r_pre, 0)
    else:
        r = last
    o = params["b"] + r @ params["v"]
    d_o = (1 / (1 + np.exp(-o)) - y) / n
    grads["b"] = np.asarray(d_o.sum())
    grads["v"] = r.T @ d_o
    dr = np.outer(d_o, params["v"])
    if "Wd" in params.arrays:
        dpre = dr * (r_pre > 0)
        grads["Wd"] = dpre.T @ last
        grads["ad"] = dpre.sum(0)
        dh = dpre @ params["Wd"]
    else:
        dh = dr
    for t in range(T, 0, -1):
        dz = dh * (1 - hs[t] ** 2)
        grads["a"] += dz.sum(0)
        grads["W"] += dz.T @ hs[t - 1]
        grads["U"] += dz.T @ X[:, t - 1]
        dh = dz @ params["W"]
    return grads


class TestRnn:
    def test_zero_params(self):
        p = zeroed(init_rnn(3, 4, 4))
        tr = rnn_forward(p, np.ones((5, 3)))
        assert np.all(tr.h == 0) and tr.y_hat[0] == 0.5

    def test_t1_matches_feedforward(self):
        rng = np.random.default_rng(0)
        p = noisy(init_rnn(3, 4, None, seed=1), rng)
        x = rng.normal(size=3)
        ff = FfnnParams({"U1": p["U"], "a1": p["a"], "v": p["v"], "b": p["b"]},
                        (3, 4, 1), ("tanh",))
        a = rnn_forward(p, x[None, :]).y_hat[0]
        b = ffnn_forward(ff, x).y_hat[0]
        assert abs(a - b) < 1e-12

    def test_hand_unrolled(self):
        U = np.array([[0.5], [-1.0]])
        W = np.array([[0.2, -0.3], [0.4, 0.1]])
        a = np.array([0.1, -0.2])
        v = np.array([1.5, -0.5])
        p = RnnParams({"U": U, "W": W, "a": a, "v": v, "b": np.array(0.3)}, (1, 2), ("tanh",), "rnn")
        x = [0.7, -1.2]
        h0 = [math.tanh(0.1 + 0.5 * 0.7), math.tanh(-0.2 - 0.7)]
        h1 = [math.tanh(0.1 + 0.2 * h0[0] - 0.3 * h0[1] + 0.5 * -1.2),
              math.tanh(-0.2 + 0.4 * h0[0] + 0.1 * h0[1] + 1.2)]
        expected = sig(0.3 + 1.5 * h1[0] - 0.5 * h1[1])
        assert abs(rnn_forward(p, np.array(x)[:, None]).y_hat[0] - expected) < 1e-12

    def test_t1_has_no_recurrent_gradient(self):
        rng = np.random.default_rng(2)
        p = noisy(init_rnn(3, 4, 4, seed=0), rng)
        g = rnn_bptt(rnn_forward(p, rng.normal(size=(1, 3))), 1, p)
        assert np.all(g["W"] == 0)

    def test_bias_gradient_seed(self):
        p = zeroed(init_rnn(2, 3, None))
        p.arrays["b"] = np.array(math.log(0.7 / 0.3))
        g = rnn_bptt(rnn_forward(p, np.ones((2, 2))), 1, p)
        assert float(g["b"]) == pytest.approx(-0.3, abs=1e-12)

    def test_finite_differences_and_reverse_accumulation(self):
        rng = np.random.default_rng(3)
        worst_fd = worst_ra = 0.0
        for i in range(20):
            D, H, T = (int(rng.integers(1, 7)) for _ in range(3))
            dense = int(rng.integers(1, 7)) if i % 2 else None
            p = noisy(init_rnn(D, H, dense, seed=i), rng)
            X = rng.normal(size=(3, T, D))
            y = rng.integers(0, 2, 3)
            g = rnn_bptt(rnn_forward(p, X), y, p)
            num = central_differences(loss_of(rnn_forward, X, y), p)
            worst_fd = max(worst_fd, max_relative_error(g, num))
            worst_ra = max(worst_ra, max_relative_error(g, vanilla_reverse_accumulation(p, X, y)))
        assert worst_fd < 1e-5
        assert worst_ra < 1e-5

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            rnn_forward(init_rnn(3, 2), np.ones((4, 5)))

    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(4)
        p = noisy(init_rnn(3, 5, 5), rng, scale=3.0)
        assert np.all(np.abs(rnn_forward(p, rng.normal(size=(10, 3))).h) <= 1.0)


class TestLstm:
    def test_zero_case(self):
        p = zeroed(init_lstm(2, 3, 3))
        tr = lstm_forward(p, np.zeros((4, 2)))
        for g in ("f", "g", "q"):
            assert np.all(tr.gates[g] == 0.5)
        assert np.all(tr.gates["s"] == 0) and np.all(tr.s == 0) and np.all(tr.h == 0)
        assert tr.y_hat[0] == 0.5

    def test_zero_case_gradients(self):
        p = zeroed(init_lstm(2, 3, 3))
        g = lstm_bptt(lstm_forward(p, np.zeros((4, 2))), 1, p)
        assert float(g["b"]) == -0.5
        for gate in GATES:
            assert np.all(g[f"U{gate}"] == 0)

    def test_saturated_gates_remember(self):
        rng = np.random.default_rng(0)
        p = noisy(init_lstm(2, 3, None), rng)
        p.arrays["af"] = np.full(3, 60.0)
        p.arrays["ag"] = np.full(3, -60.0)
        for name in ("Uf", "Ug", "Wf", "Wg"):
            p.arrays[name] = np.zeros_like(p[name])
        tr = lstm_forward(p, rng.normal(size=(6, 2)))
        # s(-1) = 0, so perfect memory keeps every cell state at 0
        assert np.all(np.abs(tr.s) < 1e-20)

    def test_hand_unrolled_scalar(self):
        vals = {"Uf": 0.3, "Wf": -0.2, "af": 0.1, "Ug": 0.8, "Wg": 0.5, "ag": -0.1,
                "Us": -0.6, "Ws": 0.9, "as": 0.05, "Uq": 0.4, "Wq": -0.7, "aq": 0.2}
        arrays = {k: np.array([[v]]) if k[0] in "UW" else np.array([v]) for k, v in vals.items()}
        arrays.update({"v": np.array([1.3]), "b": np.array(-0.4)})
        p = LstmParams(arrays, (1, 1), ("tanh",), "lstm")
        h = s = 0.0
        for x in (0.5, -1.5):
            f = sig(0.1 + 0.3 * x - 0.2 * h)
            g = sig(-0.1 + 0.8 * x + 0.5 * h)
            st = math.tanh(0.05 - 0.6 * x + 0.9 * h)
            q = sig(0.2 + 0.4 * x - 0.7 * h)
            s = f * s + g * st
            h = q * math.tanh(s)
        expected = sig(-0.4 + 1.3 * h)
        assert abs(lstm_forward(p, np.array([[0.5], [-1.5]])).y_hat[0] - expected) < 1e-12

    def test_finite_differences(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for i in range(20):
            D, H, T = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 7))
            p = noisy(init_lstm(D, H, int(rng.integers(1, 9)), seed=i), rng)
            X = rng.normal(size=(3, T, D))
            y = rng.integers(0, 2, 3)
            g = lstm_bptt(lstm_forward(p, X), y, p)
            worst = max(worst, max_relative_error(g, central_differences(loss_of(lstm_forward, X, y), p)))
        assert worst < 1e-5

    def test_zero_bias_padding_is_neutral(self):
        rng = np.random.default_rng(7)
        p = init_lstm(3, 4, 4, seed=1)  # zero biases
        real = rng.normal(size=(2, 3))
        padded = np.vstack([np.zeros((5, 3)), real])
        a = lstm_forward(p, real)
        b = lstm_forward(p, padded)
        assert np.all(b.h[0, :5] == 0) and np.all(b.s[0, :5] == 0)
        assert a.y_hat[0] == b.y_hat[0]
        # zero inputs and zero states at padded steps leave weight gradients untouched;
        # gate biases still receive a signal there, so they are excluded
        ga, gb = lstm_bptt(a, 1, p), lstm_bptt(b, 1, p)
        for k in [k for k in ga if k[0] in "UWv" or k in ("Wd", "b")]:
            assert np.allclose(ga[k], gb[k], rtol=0, atol=1e-15)

    def test_t1_matches_hand_feedforward(self):
        rng = np.random.default_rng(8)
        p = noisy(init_lstm(3, 2, None), rng)
        x = rng.normal(size=3)
        g = sig_vec(p["ag"] + p["Ug"] @ x)
        q = sig_vec(p["aq"] + p["Uq"] @ x)
        h = q * np.tanh(g * np.tanh(p["as"] + p["Us"] @ x))
        expected = 1 / (1 + np.exp(-(p["b"] + h @ p["v"])))
        assert abs(lstm_forward(p, x[None, :]).y_hat[0] - expected) < 1e-12

    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(9)
        p = noisy(init_lstm(3, 5, 5), rng, scale=3.0)
        assert np.all(np.abs(lstm_forward(p, rng.normal(size=(10, 3))).h) < 1.0)

    def test_serialization_keeps_cell_type(self):
        p = init_lstm(3, 2, 2, seed=4)
        q = params_from_dict(params_to_dict(p))
        assert isinstance(q, LstmParams) and q.kind == "lstm"


def sig_vec(z):
    return 1 / (1 + np.exp(-z))


class TestPowerIteration:
    def test_half_and_double(self):
        h0 = np.array([3.0, 4.0])
        assert np.allclose(power_iteration_demo(0.5 * np.eye(2), h0, 4), 5 * 0.5 ** np.arange(1, 5))
        assert np.allclose(power_iteration_demo(2 * np.eye(2), h0, 4), 5 * 2.0 ** np.arange(1, 5))

    def test_slope_matches_eigen_solver(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(6, 6))
        W = (A + A.T) / 2
        lam = np.max(np.abs(np.linalg.eigvalsh(W)))
        norms = power_iteration_demo(W, rng.normal(size=6), 400)
        slope = math.log(norms[-1]) - math.log(norms[-2])
        assert abs(slope - math.log(lam)) < 1e-6

    def test_non_square(self):
        with pytest.raises(ShapeError):
            power_iteration_demo(np.ones((2, 3)), np.ones(3), 2)
