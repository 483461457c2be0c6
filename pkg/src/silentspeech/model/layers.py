"""Differentiable building blocks with explicit forward caches and backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient plus
a dict of parameter gradients keyed like the parameter dict it was given.
Batched layouts: dense inputs are ``(..., features)``, images are NHWC.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mlp_forward(x, layers):
    """ReLU MLP; ``layers`` is a list of ``(W, b)``; the last layer is linear."""
    acts = [x]
    pre = []
    h = x
    for i, (W, b) in enumerate(layers):
        a = h @ W + b
        pre.append(a)
        h = a if i == len(layers) - 1 else np.maximum(a, 0.0)
        acts.append(h)
    return h, (acts, pre)


def mlp_backward(dout, layers, cache):
    acts, pre = cache
    grads = [None] * len(layers)
    d = dout
    for i in reversed(range(len(layers))):
        W, _ = layers[i]
        if i != len(layers) - 1:
            d = d * (pre[i] > 0)
        inp = acts[i]
        grads[i] = (
            inp.reshape(-1, inp.shape[-1]).T @ d.reshape(-1, d.shape[-1]),
            d.reshape(-1, d.shape[-1]).sum(axis=0),
        )
        d = d @ W.T
    return d, grads


def lstm_cell(x, h, c, Wx, Wh, b):
    """One LSTM step with gate order (input, forget, candidate, output)."""
    n = h.shape[-1]
    a = x @ Wx + h @ Wh + b
    i = sigmoid(a[..., :n])
    f = sigmoid(a[..., n : 2 * n])
    g = np.tanh(a[..., 2 * n : 3 * n])
    o = sigmoid(a[..., 3 * n :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (i, f, g, o, tc)


def lstm_forward(xs, Wx, Wh, b):
    """Unroll over axis 1 of ``xs`` (B, N, in) from zero state; returns (B, N, H)."""
    B, N, _ = xs.shape
    H = Wh.shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.zeros((B, N, H))
    steps = []
    for t in range(N):
        h_prev, c_prev = h, c
        h, c, gates = lstm_cell(xs[:, t], h_prev, c_prev, Wx, Wh, b)
        hs[:, t] = h
        steps.append((h_prev, c_prev, gates))
    return hs, (xs, steps)


def lstm_backward(dhs, Wx, Wh, b, cache):
    """Backpropagation through time; returns (dxs, dWx, dWh, db)."""
    xs, steps = cache
    B, N, _ = xs.shape
    H = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros_like(b)
    dxs = np.zeros_like(xs)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(N)):
        h_prev, c_prev, (i, f, g, o, tc) = steps[t]
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc**2)
        da = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g**2),
                do * o * (1.0 - o),
            ],
            axis=-1,
        )
        dWx += xs[:, t].T @ da
        dWh += h_prev.T @ da
        db += da.sum(axis=0)
        dxs[:, t] = da @ Wx.T
        dh_next = da @ Wh.T
        dc_next = dc * f
    return dxs, dWx, dWh, db


def conv3x3_forward(x, W, b):
    """'Same' 3x3 convolution, NHWC input, ``W`` shaped (3, 3, Cin, Cout)."""
    n, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, w, W.shape[-1])) + b
    for di in range(3):
        for dj in range(3):
            out += xp[:, di : di + h, dj : dj + w, :] @ W[di, dj]
    return out, xp


def conv3x3_backward(dout, W, xp):
    n, h, w, cout = dout.shape
    dW = np.zeros_like(W)
    dxp = np.zeros_like(xp)
    d2 = dout.reshape(-1, cout)
    for di in range(3):
        for dj in range(3):
            sl = xp[:, di : di + h, dj : dj + w, :]
            dW[di, dj] = sl.reshape(-1, sl.shape[-1]).T @ d2
            dxp[:, di : di + h, dj : dj + w, :] += dout @ W[di, dj].T
    return dxp[:, 1:-1, 1:-1, :], dW, d2.sum(axis=0)


def maxpool2_forward(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    n, h, w, c = shape
    dwin = np.zeros(idx.shape + (4,))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dwin.reshape(shape)


def conv_encoder_forward(x, convs, fc):
    """conv-ReLU-pool blocks followed by one linear layer.

    ``x`` is (n, H, W, Cin); ``convs`` a list of ``(W, b)``; ``fc`` a ``(W, b)``.
    """
    caches = []
    h = x
    for W, b in convs:
        a, xp = conv3x3_forward(h, W, b)
        r = np.maximum(a, 0.0)
        h, pc = maxpool2_forward(r)
        caches.append((xp, a, pc))
    flat = h.reshape(h.shape[0], -1)
    out = flat @ fc[0] + fc[1]
    return out, (caches, h.shape, flat)


def conv_encoder_backward(dout, convs, fc, cache):
    caches, pooled_shape, flat = cache
    dfc = (flat.T @ dout, dout.sum(axis=0))
    d = (dout @ fc[0].T).reshape(pooled_shape)
    dconvs = [None] * len(convs)
    for k in reversed(range(len(convs))):
        xp, a, pc = caches[k]
        d = maxpool2_backward(d, pc) * (a > 0)
        d, dW, db = conv3x3_backward(d, convs[k][0], xp)
        dconvs[k] = (dW, db)
    return d, dconvs, dfc
