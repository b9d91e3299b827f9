"""Network primitives built on :mod:`explicit_transfer.core.tensor`.

conv2d, maxpool2d, the sequence LSTM and the losses are fused primitives with
hand-written backward passes; ``lstm_cell`` is composed from elementary ops and
serves as the reference the fused ``lstm`` is checked against.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _sigmoid, as_tensor, matmul, sigmoid, tanh


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out + b if b is not None else out


# -- softmax and losses ------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor.from_op(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return Tensor.from_op(out, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets, weights=None, normalize: str = "weight") -> Tensor:
    """Weighted softmax cross-entropy over the last axis of ``logits``.

    ``targets`` holds integer class ids with shape ``logits.shape[:-1]``.
    ``normalize="weight"`` divides by the weight sum, ``"count"`` by the
    number of entries.  A zero weight contributes nothing to loss or gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != targets.shape:
        raise ValueError("weights must have the same shape as targets")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    if normalize == "weight":
        denom = w.sum()
    elif normalize == "count":
        denom = float(w.size)
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    if denom <= 0:
        denom = 1.0
    # zero-weight entries are masked rather than multiplied, so 0 * inf never occurs
    active = w != 0
    loss = -(np.where(active, w * picked, 0.0)).sum() / denom

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        coef = np.where(active, w, 0.0)[..., None] / denom
        return (g * coef * (p - onehot),)
    return Tensor.from_op(np.array(loss), (logits,), backward, "cross_entropy")


def l2_norm(a: Tensor, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    n = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axis),)
    return Tensor.from_op(n, (a,), backward, "l2_norm")


def frobenius_loss(pred: Tensor, target, squared: bool = False, mask=None) -> Tensor:
    """Mean over leading entries of the Frobenius distance between matrices.

    ``pred`` and ``target`` have shape (..., r, c).  ``mask`` (shape ``...``)
    selects which matrices count.
    """
    target = as_tensor(target)
    diff = pred - target
    lead = pred.shape[:-2]
    flat = diff.reshape(lead + (-1,))
    if squared:
        per = (flat * flat).sum(axis=-1)
    else:
        per = l2_norm(flat, axis=-1)
    if mask is None:
        return per.mean()
    m = np.asarray(mask, dtype=np.float64)
    return (per * m).sum() * (1.0 / max(m.sum(), 1.0))


# -- convolution and pooling -------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1.  x: (N, C, H, W), w: (K, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x (N,C,H,W) and w (K,C,kh,kw)")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    k_out, _, kh, kw = w.shape
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        pad = ((0, 0), (0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw))
    elif padding == "valid":
        pad = ((0, 0),) * 4
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, pad)
    # windows: (N, C, Ho, Wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,kcij->nkhw", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        gw = np.einsum("nkhw,nchwij->kcij", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += np.einsum("nkhw,kc->nchw", g, w.data[:, :, i, j])
        gx = gxp[:, :, pad[2][0]:pad[2][0] + x.shape[2], pad[3][0]:pad[3][0] + x.shape[3]]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == size); trailing rows/cols that do
    not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"input {h}x{w} too small for pooling window {size}")
    crop = x.data[:, :, :ho * size, :wo * size]
    blocks = crop.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = gb
        return (gx,)
    return Tensor.from_op(out, (x,), backward, "maxpool2d")


# -- recurrent ----------------------------------------------------------------

LSTM_KEYS = ("w_x", "w_h", "b")


def _check_lstm_weights(weights: Mapping[str, Tensor], n_in: int, hidden: int) -> None:
    missing = [k for k in LSTM_KEYS if k not in weights]
    if missing:
        raise KeyError(f"missing LSTM weights: {missing}")
    if weights["w_x"].shape != (n_in, 4 * hidden):
        raise ValueError(f"w_x shape {weights['w_x'].shape}, expected {(n_in, 4 * hidden)}")
    if weights["w_h"].shape != (hidden, 4 * hidden):
        raise ValueError(f"w_h shape {weights['w_h'].shape}, expected {(hidden, 4 * hidden)}")
    if weights["b"].shape != (4 * hidden,):
        raise ValueError(f"b shape {weights['b'].shape}, expected {(4 * hidden,)}")


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
              weights: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM step.  Gate layout along the last axis of the weights: i, f, g, o."""
    hidden = h_prev.shape[-1]
    if c_prev.shape != h_prev.shape:
        raise ValueError("h_prev and c_prev must have identical shapes")
    _check_lstm_weights(weights, x_t.shape[-1], hidden)
    z = matmul(x_t, weights["w_x"]) + matmul(h_prev, weights["w_h"]) + weights["b"]
    i = sigmoid(z[..., 0:hidden])
    f = sigmoid(z[..., hidden:2 * hidden])
    g = tanh(z[..., 2 * hidden:3 * hidden])
    o = sigmoid(z[..., 3 * hidden:4 * hidden])
    c_t = f * c_prev + i * g
    h_t = o * tanh(c_t)
    return h_t, c_t


def lstm(x: Tensor, weights: Mapping[str, Tensor]) -> Tensor:
    """Run an LSTM over x (N, T, F) from zero state; returns hidden states (N, T, H)."""
    if x.ndim != 3:
        raise ValueError("lstm expects input of shape (N, T, F)")
    n, t_len, n_in = x.shape
    if t_len == 0:
        raise ValueError("sequence length must be positive")
    w_x, w_h, b = weights["w_x"], weights["w_h"], weights["b"]
    hidden = w_h.shape[0]
    _check_lstm_weights(weights, n_in, hidden)

    zx = (x.data.reshape(n * t_len, n_in) @ w_x.data).reshape(n, t_len, 4 * hidden) + b.data
    hs = np.zeros((n, t_len + 1, hidden))
    cs = np.zeros((n, t_len + 1, hidden))
    tcs = np.zeros((n, t_len, hidden))
    gates = np.zeros((n, t_len, 4 * hidden))
    for t in range(t_len):
        z = zx[:, t] + hs[:, t] @ w_h.data
        act = _sigmoid(z)
        act[:, 2 * hidden:3 * hidden] = np.tanh(z[:, 2 * hidden:3 * hidden])
        gates[:, t] = act
        i, f, g, o = (act[:, k * hidden:(k + 1) * hidden] for k in range(4))
        cs[:, t + 1] = f * cs[:, t] + i * g
        tcs[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tcs[:, t]
    out = hs[:, 1:].copy()

    def backward(gout):
        dzs = np.zeros((n, t_len, 4 * hidden))
        dh_next = np.zeros((n, hidden))
        dc_next = np.zeros((n, hidden))
        for t in reversed(range(t_len)):
            act = gates[:, t]
            i, f, g, o = (act[:, k * hidden:(k + 1) * hidden] for k in range(4))
            tc = tcs[:, t]
            dh = gout[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dzs[:, t]
            dz[:, :hidden] = dc * g * i * (1.0 - i)
            dz[:, hidden:2 * hidden] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * hidden:3 * hidden] = dc * i * (1.0 - g * g)
            dz[:, 3 * hidden:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ w_h.data.T
        flat_dz = dzs.reshape(n * t_len, 4 * hidden)
        gx = (flat_dz @ w_x.data.T).reshape(n, t_len, n_in)
        gwx = x.data.reshape(n * t_len, n_in).T @ flat_dz
        gwh = hs[:, :-1].reshape(n * t_len, hidden).T @ flat_dz
        gb = flat_dz.sum(axis=0)
        return gx, gwx, gwh, gb

    return Tensor.from_op(out, (x, w_x, w_h, b), backward, "lstm")
