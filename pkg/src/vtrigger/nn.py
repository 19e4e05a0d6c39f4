"""Layer kernels with explicit forward and backward passes.

Each ``foo`` returns ``(out, cache)`` and ``foo_backward(dout, cache)``
returns gradients for the inputs and parameters.

Sequence inputs are either a single ``(T, D)`` matrix or a padded batch
``(B, T, D)``; padded batches carry a boolean ``mask`` of shape ``(B, T)``
(True = real frame). Padded rows never influence real rows, and as long
as the loss puts zero gradient on them they contribute nothing to any
parameter gradient.

Parameter bundles are plain dicts of arrays so that models can store them
in one flat, name-addressable table.
"""

from __future__ import annotations

import numpy as np


def _check_cols(x: np.ndarray, n: int, what: str) -> None:
    if x.ndim not in (2, 3) or x.shape[-1] != n:
        raise ValueError(f"{what}: expected input with {n} columns, got shape {x.shape}")


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def lengths_to_mask(lengths, T: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths)
    T = int(lengths.max()) if T is None else T
    return np.arange(T)[None, :] < lengths[:, None]


def sigmoid(x):
    # tanh form: no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def log_softmax_backward(dout, logp):
    """Backward of log_softmax given its output."""
    return dout - np.exp(logp) * np.sum(dout, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# linear


def linear(x, W, b):
    _check_cols(x, W.shape[0], "linear")
    if b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight {W.shape}")
    return x @ W + b, (x, W)


def linear_backward(dout, cache):
    x, W = cache
    return dout @ W.T, _flat(x).T @ _flat(dout), _flat(dout).sum(axis=0)


# ---------------------------------------------------------------------------
# layer norm


def layer_norm(x, gain, shift, eps=1e-5):
    _check_cols(x, gain.shape[0], "layer_norm")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + shift, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    xhat, inv, gain = cache
    n = xhat.shape[-1]
    dgain = _flat(dout * xhat).sum(axis=0)
    dshift = _flat(dout).sum(axis=0)
    dxhat = dout * gain
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgain, dshift


# ---------------------------------------------------------------------------
# multi-head attention

ATTENTION_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def multi_head_attention(q_in, kv_in, p, n_heads, causal=False, key_mask=None):
    """Scaled dot-product attention with ``n_heads`` heads.

    ``p`` holds Wq/Wk/Wv of shape (d_model, n_heads * d_head) with the heads
    laid out as contiguous column blocks, their biases, and the output
    projection Wo/bo. Self-attention is ``q_in is kv_in``. ``key_mask``
    (B, Tk) excludes padded keys; ``causal`` forbids attending to later
    positions.
    """
    d_model = p["Wq"].shape[0]
    _check_cols(q_in, d_model, "attention query input")
    _check_cols(kv_in, d_model, "attention key/value input")
    if q_in.ndim != kv_in.ndim:
        raise ValueError("attention: query and key/value inputs must both be 2-D or both 3-D")
    single = q_in.ndim == 2
    if single:
        q_in, kv_in = q_in[None], kv_in[None]
    inner = p["Wq"].shape[1]
    if inner % n_heads:
        raise ValueError(f"attention width {inner} not divisible by {n_heads} heads")
    dh = inner // n_heads
    B, Tq, _ = q_in.shape
    Tk = kv_in.shape[1]
    if causal and Tq != Tk:
        raise ValueError("causal attention needs equal query and key lengths")

    def heads(a, T):
        return a.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    Q = heads(q_in @ p["Wq"] + p["bq"], Tq)
    K = heads(kv_in @ p["Wk"] + p["bk"], Tk)
    V = heads(kv_in @ p["Wv"] + p["bv"], Tk)
    scale = 1.0 / np.sqrt(dh)
    S = (Q @ K.transpose(0, 1, 3, 2)) * scale
    blocked = np.zeros((B, 1, Tq, Tk), dtype=bool)
    if causal:
        blocked |= np.triu(np.ones((Tq, Tk), dtype=bool), k=1)
    if key_mask is not None:
        blocked |= ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if blocked.any():
        S = np.where(blocked, -np.inf, S)
    A = softmax(S, axis=-1)
    C = (A @ V).transpose(0, 2, 1, 3).reshape(B, Tq, inner)
    out = C @ p["Wo"] + p["bo"]
    cache = (q_in, kv_in, p, Q, K, V, A, C, scale, single)
    return (out[0] if single else out), cache


def attention_weights(cache):
    """Softmax weights from an attention cache: (n_heads, Tq, Tk), or (B, n_heads, Tq, Tk) for batches."""
    A, single = cache[6], cache[9]
    return A[0] if single else A


def multi_head_attention_backward(dout, cache):
    q_in, kv_in, p, Q, K, V, A, C, scale, single = cache
    if single:
        dout = dout[None]
    B, H, Tq, dh = Q.shape
    Tk = K.shape[2]
    g = {"Wo": _flat(C).T @ _flat(dout), "bo": _flat(dout).sum(axis=0)}
    dC = (dout @ p["Wo"].T).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
    dA = dC @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dC
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
    dQ = (dS @ K).transpose(0, 2, 1, 3).reshape(B, Tq, H * dh)
    dK = (dS.transpose(0, 1, 3, 2) @ Q).transpose(0, 2, 1, 3).reshape(B, Tk, H * dh)
    dV = dV.transpose(0, 2, 1, 3).reshape(B, Tk, H * dh)
    g["Wq"], g["bq"] = _flat(q_in).T @ _flat(dQ), _flat(dQ).sum(axis=0)
    g["Wk"], g["bk"] = _flat(kv_in).T @ _flat(dK), _flat(dK).sum(axis=0)
    g["Wv"], g["bv"] = _flat(kv_in).T @ _flat(dV), _flat(dV).sum(axis=0)
    dq_in = dQ @ p["Wq"].T
    dkv_in = dK @ p["Wk"].T + dV @ p["Wv"].T
    if single:
        return dq_in[0], dkv_in[0], g
    return dq_in, dkv_in, g


# ---------------------------------------------------------------------------
# LSTM


def _reverse_index(lengths, T):
    """Per-row time reversal within each sequence's length (padding stays put)."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def _gather_time(x, idx):
    return np.take_along_axis(x, idx[:, :, None], axis=1)


def lstm(x, W, b, reverse=False, lengths=None):
    """Unidirectional LSTM, zero initial state.

    ``W`` is (input_dim + hidden, 4 * hidden) with gate column blocks ordered
    input, forget, cell, output; ``b`` is (4 * hidden,). With ``reverse`` each
    sequence is read last-to-first (within its length) and outputs are
    returned in the original time order.
    """
    H = W.shape[1] // 4
    D = W.shape[0] - H
    _check_cols(x, D, "lstm")
    if W.shape[1] != 4 * H or b.shape != (4 * H,):
        raise ValueError(f"lstm: inconsistent gate shapes W{W.shape} b{b.shape}")
    single = x.ndim == 2
    if single:
        x = x[None]
    B, T, _ = x.shape
    if lengths is None:
        lengths = np.full(B, T)
    rev = _reverse_index(lengths, T) if reverse else None
    xs = _gather_time(x, rev) if reverse else x
    Wx, Wh = W[:D], W[D:]
    zx = xs @ Wx + b
    dtype = zx.dtype
    h = np.zeros((T + 1, B, H), dtype=dtype)
    c = np.zeros((T + 1, B, H), dtype=dtype)
    gates = np.empty((T, B, 4 * H), dtype=dtype)
    for t in range(T):
        z = zx[:, t] + h[t] @ Wh
        ifo = sigmoid(z[:, np.r_[0:2 * H, 3 * H:4 * H]])
        i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
        g = np.tanh(z[:, 2 * H:3 * H])
        c[t + 1] = f * c[t] + i * g
        h[t + 1] = o * np.tanh(c[t + 1])
        gt = gates[t]
        gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:] = i, f, g, o
    out = h[1:].transpose(1, 0, 2)
    if reverse:
        out = _gather_time(out, rev)
    out = np.ascontiguousarray(out)
    cache = (xs, W, h, c, gates, rev, single)
    return (out[0] if single else out), cache


def lstm_backward(dout, cache):
    xs, W, h, c, gates, rev, single = cache
    if single:
        dout = dout[None]
    if rev is not None:
        dout = _gather_time(dout, rev)
    B, T, _ = xs.shape
    H = W.shape[1] // 4
    D = W.shape[0] - H
    Wx, Wh = W[:D], W[D:]
    dz = np.zeros((T, B, 4 * H), dtype=gates.dtype)
    dh_next = np.zeros((B, H), dtype=gates.dtype)
    dc_next = np.zeros((B, H), dtype=gates.dtype)
    for t in range(T - 1, -1, -1):
        gt = gates[t]
        i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        tc = np.tanh(c[t + 1])
        dh = dout[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dzt = dz[t]
        dzt[:, :H] = dc * g * i * (1.0 - i)
        dzt[:, H:2 * H] = dc * c[t] * f * (1.0 - f)
        dzt[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dzt[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dh_next = dzt @ Wh.T
        dc_next = dc * f
    dz_flat = dz.transpose(1, 0, 2).reshape(B * T, 4 * H)
    dW = np.empty_like(W)
    dW[:D] = _flat(xs).T @ dz_flat
    dW[D:] = h[:-1].transpose(1, 0, 2).reshape(B * T, H).T @ dz_flat
    db = dz_flat.sum(axis=0)
    dx = (dz_flat @ Wx.T).reshape(B, T, D)
    if rev is not None:
        dx = _gather_time(dx, rev)
    dx = np.ascontiguousarray(dx)
    return (dx[0] if single else dx), dW, db


def bilstm_layer(x, fwd, bwd, lengths=None):
    """Forward and time-reversed LSTMs, outputs concatenated per step.

    ``fwd``/``bwd`` are dicts with keys ``W`` and ``b``.
    """
    hf, cf = lstm(x, fwd["W"], fwd["b"], lengths=lengths)
    hb, cb = lstm(x, bwd["W"], bwd["b"], reverse=True, lengths=lengths)
    return np.concatenate([hf, hb], axis=-1), (cf, cb, hf.shape[-1])


def bilstm_layer_backward(dout, cache):
    cf, cb, H = cache
    dxf, dWf, dbf = lstm_backward(dout[..., :H], cf)
    dxb, dWb, dbb = lstm_backward(dout[..., H:], cb)
    return dxf + dxb, {"W": dWf, "b": dbf}, {"W": dWb, "b": dbb}


__all__ = [
    "sigmoid", "softmax", "log_softmax", "log_softmax_backward", "lengths_to_mask",
    "linear", "linear_backward", "layer_norm", "layer_norm_backward",
    "multi_head_attention", "multi_head_attention_backward", "attention_weights",
    "lstm", "lstm_backward", "bilstm_layer", "bilstm_layer_backward",
]
