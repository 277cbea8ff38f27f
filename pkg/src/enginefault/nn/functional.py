"""Differentiable building blocks used by the transformer and RNN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (  # noqa: F401  relu/tanh re-exported for layer code
    ShapeError, Tensor, as_tensor, make_result, masked_fill, matmul, relu, reshape, tanh,
    transpose, unbroadcast,
)

# Finite stand-in for -inf so masked score tensors stay finite.
MASK_VALUE = -1e9


@dataclass
class RngState:
    """Counter-based random stream: ``(seed, counter)`` fixes every future draw."""

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return gen


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward)


def masked_softmax(scores, mask=None, scale: float = 1.0) -> Tensor:
    """``softmax(scale * scores)`` over the last axis with blocked entries forced to 0.

    Fused so the attention score tensor is traversed once per direction.
    """
    scores = as_tensor(scores)
    z = scores.data * scores.dtype.type(scale)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z.dtype.type(MASK_VALUE), z)
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    y = z

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        if scale != 1.0:
            gy *= y.dtype.type(scale)
        return (gy,)

    return make_result(y, (scores,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]`` for ``logits`` of shape (N, C)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target class out of range [0, {c})")
    targets = targets.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean() if n else np.zeros((), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / max(n, 1)),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = unbroadcast(g * xhat, gain.shape)
        dbias = unbroadcast(g, bias.shape)
        return dx, dgain, dbias

    return make_result(out, (x, gain, bias), backward)


def dropout(x, p: float, rng: RngState | None, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngState")
    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    keep = rng.generator().random(x.shape, dtype=draw_dtype) >= p
    scale = keep * x.dtype.type(1.0 / (1.0 - p))
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


def xavier_init(shape, rng: RngState, dtype=np.float64) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.generator().uniform(-a, a, size=shape).astype(dtype)


def causal_mask(t_q: int, t_k: int | None = None) -> np.ndarray:
    """Boolean mask, True where query i must not see key j (j > i)."""
    t_k = t_q if t_k is None else t_k
    return np.triu(np.ones((t_q, t_k), dtype=bool), k=1)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                                 dropout_p: float = 0.0, rng: RngState | None = None,
                                 training: bool = False):
    """Attention over the last two axes; returns ``(output, weights)``."""
    scores = matmul(q, transpose(k, _swap_last(k.ndim)))
    weights = masked_softmax(scores, mask, 1.0 / np.sqrt(q.shape[-1]))
    attended = matmul(dropout(weights, dropout_p, rng, training), v)
    return attended, weights


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, num_heads, d // num_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def multi_head_attention(query, key, value, num_heads: int, weights: dict, mask=None,
                         dropout_p: float = 0.0, rng: RngState | None = None,
                         training: bool = False, return_weights: bool = False):
    """Multi-head attention over (B, T, d) inputs.

    ``weights`` maps ``w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o`` to tensors with
    (d, d) matrices and (d,) biases. ``mask`` is boolean, broadcastable to
    (B, heads, T_q, T_k), True meaning "blocked".
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    d = query.shape[-1]
    if d % num_heads:
        raise ValueError(f"model dimension {d} is not divisible by {num_heads} heads")
    if key.shape[-1] != d or value.shape[-1] != d or key.shape[:-1] != value.shape[:-1]:
        raise ShapeError(f"attention operand shapes disagree: q{query.shape} k{key.shape} v{value.shape}")
    q = _split_heads(matmul(query, weights["w_q"]) + weights["b_q"], num_heads)
    k = _split_heads(matmul(key, weights["w_k"]) + weights["b_k"], num_heads)
    v = _split_heads(matmul(value, weights["w_v"]) + weights["b_v"], num_heads)
    attended, attn = scaled_dot_product_attention(q, k, v, mask, dropout_p, rng, training)
    out = matmul(_merge_heads(attended), weights["w_o"]) + weights["b_o"]
    if return_weights:
        return out, attn
    return out


def rnn_tanh(x, w_ih, w_hh, b, h0=None) -> Tensor:
    """Elman recurrence ``h_t = tanh(x_t W_ih + h_{t-1} W_hh + b)`` over (B, T, D) input.

    Returns the (B, T, H) hidden sequence. Backward is truncation-free BPTT.
    """
    x, w_ih, w_hh, b = as_tensor(x), as_tensor(w_ih), as_tensor(w_hh), as_tensor(b)
    if x.ndim != 3:
        raise ShapeError(f"rnn_tanh expects (B, T, D) input, got {x.shape}")
    bsz, steps, dim = x.shape
    hidden = w_hh.shape[0]
    if w_ih.shape != (dim, hidden) or w_hh.shape != (hidden, hidden) or b.shape != (hidden,):
        raise ShapeError("rnn_tanh weight shapes do not match input/hidden sizes")
    h_prev = np.zeros((bsz, hidden), dtype=x.dtype) if h0 is None else np.asarray(h0, dtype=x.dtype)
    h_init = h_prev
    drive = (x.data.reshape(bsz * steps, dim) @ w_ih.data).reshape(bsz, steps, hidden) + b.data
    hs = np.empty((bsz, steps, hidden), dtype=x.dtype)
    for t in range(steps):
        h_prev = np.tanh(drive[:, t] + h_prev @ w_hh.data)
        hs[:, t] = h_prev

    def backward(g):
        da = np.empty_like(hs)
        carry = np.zeros((bsz, hidden), dtype=hs.dtype)
        w_hh_t = w_hh.data.T
        for t in range(steps - 1, -1, -1):
            dh = g[:, t] + carry
            da[:, t] = dh * (1.0 - hs[:, t] * hs[:, t])
            carry = da[:, t] @ w_hh_t
        prev = np.concatenate([h_init[:, None, :], hs[:, :-1]], axis=1)
        da_flat = da.reshape(bsz * steps, hidden)
        g_w_hh = prev.reshape(bsz * steps, hidden).T @ da_flat
        g_w_ih = x.data.reshape(bsz * steps, dim).T @ da_flat
        g_x = (da_flat @ w_ih.data.T).reshape(x.shape)
        return g_x, g_w_ih, g_w_hh, da_flat.sum(axis=0)

    return make_result(hs, (x, w_ih, w_hh, b), backward)
