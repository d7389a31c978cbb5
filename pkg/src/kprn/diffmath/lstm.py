"""LSTM cell on top of the tensor ops."""

from __future__ import annotations

import numpy as np

from kprn.diffmath import tensor as T
from kprn.errors import ContractViolation


def add_lstm_params(store, prefix, input_size, hidden_size, rng):
    """Register ``{prefix}.Wx``, ``{prefix}.Wh``, ``{prefix}.b``; gate blocks are
    ordered input, forget, candidate, output."""
    store.add(f"{prefix}.Wx", (input_size, 4 * hidden_size), rng, fan_in=hidden_size)
    store.add(f"{prefix}.Wh", (hidden_size, 4 * hidden_size), rng, fan_in=hidden_size)
    store.add(f"{prefix}.b", (4 * hidden_size,), rng, fan_in=hidden_size)


def lstm_step(x, h, c, params, prefix="lstm"):
    """One step for a batch of rows: ``x`` is (B, in), ``h`` and ``c`` are (B, H)."""
    Wx, Wh, b = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"], params[f"{prefix}.b"]
    H = Wh.shape[0]
    if x.data.ndim != 2 or x.shape[1] != Wx.shape[0]:
        raise ContractViolation(f"lstm_step: input {x.shape} does not match Wx {Wx.shape}")
    if h.shape != (x.shape[0], H) or c.shape != h.shape:
        raise ContractViolation(f"lstm_step: state shapes {h.shape}, {c.shape} for hidden size {H}")
    gates = T.add(T.add(T.matmul(x, Wx), T.matmul(h, Wh)), b)
    i = T.sigmoid(T.slice_last(gates, 0, H))
    f = T.sigmoid(T.slice_last(gates, H, 2 * H))
    g = T.tanh(T.slice_last(gates, 2 * H, 3 * H))
    o = T.sigmoid(T.slice_last(gates, 3 * H, 4 * H))
    c_next = T.add(T.mul(f, c), T.mul(i, g))
    h_next = T.mul(o, T.tanh(c_next))
    return h_next, c_next


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_sequence(xs, params, prefix="lstm"):
    """Run the cell over the rows of ``xs`` (T, in) from a zero state and
    return the hidden states as one (T, H) tensor.

    Equivalent to chaining :func:`lstm_step`, but the input projection is one
    matmul and the backward pass is hand-written backpropagation through
    time, which keeps the recorded graph to a single node.
    """
    Wx, Wh, b = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"], params[f"{prefix}.b"]
    H = Wh.shape[0]
    if xs.data.ndim != 2 or xs.shape[1] != Wx.shape[0] or xs.shape[0] == 0:
        raise ContractViolation(f"lstm_sequence: input {xs.shape} does not match Wx {Wx.shape}")
    X, Wxd, Whd = xs.data, Wx.data, Wh.data
    n = X.shape[0]
    pre = X @ Wxd + b.data
    hs = np.zeros((n + 1, H))
    cs = np.zeros((n + 1, H))
    acts = np.empty((n, 4 * H))
    for t in range(n):
        a = pre[t] + hs[t] @ Whd
        acts[t, : 2 * H] = _sigmoid(a[: 2 * H])
        acts[t, 2 * H : 3 * H] = np.tanh(a[2 * H : 3 * H])
        acts[t, 3 * H :] = _sigmoid(a[3 * H :])
        i, f, g, o = acts[t, :H], acts[t, H : 2 * H], acts[t, 2 * H : 3 * H], acts[t, 3 * H :]
        cs[t + 1] = f * cs[t] + i * g
        hs[t + 1] = o * np.tanh(cs[t + 1])
    tanh_c = np.tanh(cs[1:])

    def grad_fn(grad):
        d_pre = np.empty((n, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(n - 1, -1, -1):
            i, f, g, o = acts[t, :H], acts[t, H : 2 * H], acts[t, 2 * H : 3 * H], acts[t, 3 * H :]
            dh = grad[t] + dh_next
            dc = dh * o * (1.0 - tanh_c[t] ** 2) + dc_next
            d_pre[t, :H] = dc * g * i * (1.0 - i)
            d_pre[t, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
            d_pre[t, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            d_pre[t, 3 * H :] = dh * tanh_c[t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d_pre[t] @ Whd.T
        dx = d_pre @ Wxd.T if xs.requires_grad else None
        return dx, X.T @ d_pre, hs[:-1].T @ d_pre, d_pre.sum(axis=0)

    return T._result(hs[1:].copy(), "lstm_sequence", (xs, Wx, Wh, b), grad_fn)
