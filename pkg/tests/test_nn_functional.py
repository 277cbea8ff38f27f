import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from enginefault.nn import RngState, Tensor, causal_mask, cross_entropy, dropout, layer_norm, log_softmax
from enginefault.nn import multi_head_attention, rnn_tanh, scaled_dot_product_attention, softmax
from enginefault.nn.functional import masked_softmax

from conftest import gradcheck

TOL = 1e-4
mpmath.mp.dps = 40


# ---------------------------------------------------------------- oracles

def softmax_oracle(row):
    m = max(mpmath.mpf(float(v)) for v in row)
    e = [mpmath.exp(mpmath.mpf(float(v)) - m) for v in row]
    s = mpmath.fsum(e)
    return [float(v / s) for v in e]


def cross_entropy_oracle(logits, targets):
    total = mpmath.mpf(0)
    for row, t in zip(logits, targets):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
        total += lse - mpmath.mpf(float(row[t]))
    return float(total / len(targets))


def attention_oracle(q_in, k_in, v_in, w, heads, mask=None):
    """Triple loop over batch, head and query position."""
    B, Tq, d = q_in.shape
    Tk = k_in.shape[1]
    dh = d // heads
    q = q_in @ w["w_q"] + w["b_q"]
    k = k_in @ w["w_k"] + w["b_k"]
    v = v_in @ w["w_v"] + w["b_v"]
    merged = np.zeros((B, Tq, d))
    for b in range(B):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(Tq):
                scores = []
                for j in range(Tk):
                    if mask is not None and mask[i, j]:
                        scores.append(-math.inf)
                    else:
                        scores.append(sum(q[b, i, sl] * k[b, j, sl]) / math.sqrt(dh))
                top = max(scores)
                e = [math.exp(s - top) for s in scores]
                total = sum(e)
                for j in range(Tk):
                    merged[b, i, sl] += e[j] / total * v[b, j, sl]
    return merged @ w["w_o"] + w["b_o"]


def rnn_oracle(x, w_ih, w_hh, b):
    B, T, _ = x.shape
    h = np.zeros((B, w_hh.shape[0]))
    out = []
    for t in range(T):
        h = np.tanh(x[:, t] @ w_ih + h @ w_hh + b)
        out.append(h)
    return np.stack(out, axis=1)


def _attn_weights(r, d):
    w = {}
    for n in "qkvo":
        w[f"w_{n}"] = r.standard_normal((d, d)) / math.sqrt(d)
        w[f"b_{n}"] = r.standard_normal(d) * 0.1
    return w


# ---------------------------------------------------------------- gradients

def test_softmax_family_gradients(rng):
    x = rng.standard_normal((3, 5))
    assert gradcheck(lambda a: softmax(a), x) < TOL
    assert gradcheck(lambda a: softmax(a, axis=0), x) < TOL
    assert gradcheck(lambda a: log_softmax(a), x) < TOL
    mask = np.triu(np.ones((5, 5), dtype=bool), 1)[:3]
    assert gradcheck(lambda a: masked_softmax(a, mask, 0.7), x) < TOL


def test_cross_entropy_gradient(rng):
    x = rng.standard_normal((6, 12))
    t = rng.integers(0, 12, 6)
    assert gradcheck(lambda a: cross_entropy(a, t), x) < TOL


def test_layer_norm_gradient(rng):
    x = rng.standard_normal((2, 3, 6))
    g = rng.standard_normal(6)
    b = rng.standard_normal(6)
    assert gradcheck(lambda a, gg, bb: layer_norm(a, gg, bb), x, g, b) < TOL


def test_dropout_gradient_with_fixed_stream(rng):
    x = rng.standard_normal((4, 5))
    assert gradcheck(lambda a: dropout(a, 0.3, RngState(7), True), x) < TOL


def test_attention_gradient(rng):
    d, heads = 6, 3
    w = _attn_weights(rng, d)
    names = list(w)
    q = rng.standard_normal((2, 4, d))
    kv = rng.standard_normal((2, 5, d))
    mask = causal_mask(4, 5)

    def fn(q, kv, *ws):
        return multi_head_attention(q, kv, kv, heads, dict(zip(names, ws)), mask=mask)

    assert gradcheck(fn, q, kv, *w.values()) < TOL


def test_rnn_gradient(rng):
    x = rng.standard_normal((2, 5, 3))
    w_ih = rng.standard_normal((3, 4)) * 0.5
    w_hh = rng.standard_normal((4, 4)) * 0.5
    b = rng.standard_normal(4) * 0.1
    assert gradcheck(lambda *a: rnn_tanh(*a), x, w_ih, w_hh, b) < TOL


# ---------------------------------------------------------------- normalisation

@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 12)),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = softmax(x).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_survives_huge_logits():
    y = softmax(np.array([[1000.0, 1000.0, -1000.0]])).data
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])
    ce = cross_entropy(np.array([[1e4, 0.0]]), np.array([1])).data
    assert math.isfinite(ce) and abs(ce - 1e4) < 1e-6


def test_uniform_logits_cross_entropy_is_log12():
    logits = np.full((9, 12), 3.7)
    ce = cross_entropy(logits, np.arange(9) % 12).data
    assert abs(ce - math.log(12)) < 1e-9


def test_attention_rows_sum_to_one_with_mask(rng):
    q, k, v = (Tensor(rng.standard_normal((2, 3, 7, 4))) for _ in range(3))
    _, w = scaled_dot_product_attention(q, k, v, mask=causal_mask(7))
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
    assert np.all(w.data[..., np.triu_indices(7, 1)[0], np.triu_indices(7, 1)[1]] == 0)


# ---------------------------------------------------------------- oracle equivalence

@pytest.mark.parametrize("case", range(100))
def test_cross_entropy_matches_mpmath(case):
    r = np.random.default_rng([11, case])
    n = int(r.integers(1, 6))
    logits = r.standard_normal((n, 12)) * r.uniform(0.1, 20)
    t = r.integers(0, 12, n)
    assert abs(cross_entropy(logits, t).data - cross_entropy_oracle(logits, t)) < 1e-6
    for row, ref in zip(softmax(logits).data, map(softmax_oracle, logits)):
        np.testing.assert_allclose(row, ref, atol=1e-12)


@pytest.mark.parametrize("case", range(100))
def test_attention_matches_loop_oracle(case):
    r = np.random.default_rng([12, case])
    heads = int(r.choice([1, 2, 3]))
    d = heads * int(r.integers(1, 4))
    B, Tq, Tk = (int(v) for v in r.integers(1, 4, 3))
    q = r.standard_normal((B, Tq, d))
    kv = r.standard_normal((B, Tk, d))
    w = _attn_weights(r, d)
    mask = causal_mask(Tq, Tk) if case % 2 else None
    got = multi_head_attention(q, kv, kv, heads, {k: Tensor(v) for k, v in w.items()}, mask=mask).data
    np.testing.assert_allclose(got, attention_oracle(q, kv, kv, w, heads, mask), atol=1e-6)


def test_rnn_matches_loop_oracle(rng):
    x = rng.standard_normal((3, 6, 4))
    w_ih, w_hh, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 5)) * 0.3, rng.standard_normal(5)
    np.testing.assert_allclose(rnn_tanh(x, w_ih, w_hh, b).data, rnn_oracle(x, w_ih, w_hh, b), atol=1e-12)


def test_layer_norm_output_is_standardised(rng):
    x = rng.standard_normal((4, 10)) * 5 + 3
    y = layer_norm(x, np.ones(10), np.zeros(10), eps=0.0).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-12)


# ---------------------------------------------------------------- misc behaviour

def test_dropout_identity_in_eval_and_rescaled_in_train(rng):
    x = Tensor(np.ones((200, 200)))
    assert dropout(x, 0.5, None, training=False) is x
    y = dropout(x, 0.25, RngState(3), training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs(y.mean() - 1.0) < 0.02


def test_dropout_stream_is_reproducible():
    x = Tensor(np.ones(50))
    a = dropout(x, 0.5, RngState(9), True).data
    b = dropout(x, 0.5, RngState(9), True).data
    np.testing.assert_array_equal(a, b)


def test_causal_mask_blocks_future_only():
    m = causal_mask(4)
    assert not m[np.tril_indices(4)].any()
    assert m[np.triu_indices(4, 1)].all()


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(IndexError):
        cross_entropy(np.zeros((2, 12)), np.array([0, 12]))


def test_heads_must_divide_width(rng):
    w = _attn_weights(rng, 6)
    with pytest.raises(ValueError):
        multi_head_attention(np.zeros((1, 2, 6)), np.zeros((1, 2, 6)), np.zeros((1, 2, 6)), 4, w)
