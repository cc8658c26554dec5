"""Batched LSTM / GRU cells with hand-derived backward passes."""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def lstm_forward(x, h, c, W, b):
    """One step. ``W`` is (in + H, 4H) with gate order i, f, o, g."""
    H = h.shape[1]
    xh = np.concatenate([x, h], axis=1)
    z = xh @ W + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    o = sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc)


def lstm_backward(dh, dc, cache, W, dW, db):
    """Accumulates into ``dW``/``db``; returns (dx, dh_prev, dc_prev)."""
    xh, c, i, f, o, g, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c
    dg = dc * i
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
    dW += xh.T @ dz
    db += dz.sum(axis=0)
    dxh = dz @ W.T
    n_in = xh.shape[1] - dh.shape[1]
    return dxh[:, :n_in], dxh[:, n_in:], dc * f


def gru_forward(x, h, Wx, Wh, bx, bh, mask=None):
    """One step; rows with ``mask == 0`` carry ``h`` through unchanged."""
    H = h.shape[1]
    ax = x @ Wx + bx
    ah = h @ Wh + bh
    r = sigmoid(ax[:, :H] + ah[:, :H])
    z = sigmoid(ax[:, H:2 * H] + ah[:, H:2 * H])
    hn = ah[:, 2 * H:]
    n = np.tanh(ax[:, 2 * H:] + r * hn)
    h_new = (1 - z) * n + z * h
    if mask is not None:
        m = mask[:, None]
        h_new = m * h_new + (1 - m) * h
    return h_new, (x, h, r, z, n, hn, mask)


def gru_backward(dh_out, cache, Wx, Wh, dWx, dWh, dbx, dbh):
    x, h, r, z, n, hn, mask = cache
    if mask is not None:
        m = mask[:, None]
        dh_new = dh_out * m
        dh = dh_out * (1 - m)
    else:
        dh_new = dh_out
        dh = np.zeros_like(h)
    dn = dh_new * (1 - z)
    dz = dh_new * (h - n)
    dh = dh + dh_new * z
    dn_pre = dn * (1 - n * n)
    dhn = dn_pre * r
    dr_pre = dn_pre * hn * r * (1 - r)
    dz_pre = dz * z * (1 - z)
    dax = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
    dah = np.concatenate([dr_pre, dz_pre, dhn], axis=1)
    dWx += x.T @ dax
    dbx += dax.sum(axis=0)
    dWh += h.T @ dah
    dbh += dah.sum(axis=0)
    dx = dax @ Wx.T
    dh = dh + dah @ Wh.T
    return dx, dh
