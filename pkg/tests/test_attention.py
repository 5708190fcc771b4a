import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xdomain import numcore as nc
from xdomain.attention import (AttentionParams, attend, attention_weights, cross_attention, project_qkv,
                               self_attention, write_weights_csv)
from xdomain.numcore import Rng, ShapeError, Tensor, finite_diff_check

from oracles import attention_scalar


def params(width=8, heads=2, seed=0, std=0.5):
    return AttentionParams.init(width, heads, Rng(seed, "attn"), std=std)


def tokens(n, width=8, seed=1):
    return Tensor(np.random.default_rng(seed).normal(size=(n, width)))


def test_width_must_divide_heads():
    with pytest.raises(ValueError):
        AttentionParams.init(6, 4, Rng(0))


def test_per_head_dims():
    p = params(12, 3)
    assert p.d_k == p.d_v == 4


def test_width_mismatch_raises():
    with pytest.raises(ShapeError):
        self_attention(tokens(3, width=6), params(8, 2))


def test_single_token_output():
    p, x = params(), tokens(1)
    expected = x.data @ p.w_v.data @ p.w_o.data
    assert np.allclose(self_attention(x, p).data, expected, atol=1e-12)


def test_zero_queries_give_uniform_weights():
    p = params()
    p.w_q = Tensor(np.zeros((8, 8)))
    x = tokens(5)
    expected = (x.data @ p.w_v.data).mean(axis=0) @ p.w_o.data
    out = self_attention(x, p).data
    assert np.allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_hand_set_tokens_match_scalar_evaluation():
    eye = Tensor(np.eye(1))
    p = AttentionParams(eye, eye, eye, eye, heads=1)
    x = [[0.3], [-1.2]]
    out = self_attention(Tensor(x), p).data
    assert np.max(np.abs(out - np.array(attention_scalar(x, x, x)))) < 1e-12


def test_cross_attention_matches_brute_force_per_head():
    p = params(8, 2)
    xs, xt = tokens(2, seed=3), tokens(3, seed=4)
    q, k, v = xs.data @ p.w_q.data, xt.data @ p.w_k.data, xt.data @ p.w_v.data
    heads = [attention_scalar(q[:, h * 4:(h + 1) * 4].tolist(), k[:, h * 4:(h + 1) * 4].tolist(),
                              v[:, h * 4:(h + 1) * 4].tolist()) for h in range(2)]
    ref = np.concatenate([np.array(h) for h in heads], axis=1) @ p.w_o.data
    out = cross_attention(xs, xt, p).data
    assert out.shape == (2, 8)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_cross_single_pair_of_tokens():
    p = params()
    xs, xt = tokens(1, seed=5), tokens(1, seed=6)
    assert np.allclose(cross_attention(xs, xt, p).data, xt.data @ p.w_v.data @ p.w_o.data, atol=1e-12)


def test_identical_tokens_give_uniform_weights():
    x = Tensor(np.tile(np.random.default_rng(0).normal(size=(1, 8)), (4, 1)))
    w = attention_weights(x, x, params())
    assert np.allclose(w, 0.25, atol=1e-15)


def test_matching_token_saturates_weight():
    eye = Tensor(np.eye(3))
    p = AttentionParams(eye, eye, eye, eye, heads=1)
    q = Tensor([[50.0, 0.0, 0.0]])
    kv = Tensor([[50.0, 0.0, 0.0], [0.0, 50.0, 0.0], [0.0, 0.0, 50.0]])
    w = attention_weights(q, kv, p)[0]
    assert w[0, 0] > 1 - 1e-12


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10 ** 6))
def test_weight_rows_are_probability_vectors(m, n, seed):
    w = attention_weights(tokens(m, seed=seed), tokens(n, seed=seed + 1), params(seed=seed))
    assert w.shape == (2, m, n)
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=-1) - 1)) < 1e-12


@given(st.integers(1, 7), st.integers(0, 10 ** 6))
def test_permutation_equivariance(n, seed):
    p, x = params(seed=seed), tokens(n, seed=seed)
    perm = np.random.default_rng(seed).permutation(n)
    a = self_attention(x, p).data
    b = self_attention(Tensor(x.data[perm]), p).data
    assert np.max(np.abs(a[perm] - b)) < 1e-10


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10 ** 6))
def test_head_outputs_in_convex_hull_of_values(m, n, seed):
    p = params(seed=seed)
    q, _, _ = project_qkv(tokens(m, seed=seed), p)
    _, k, v = project_qkv(tokens(n, seed=seed + 7), p)
    out, _ = attend(q, k, v)
    lo = v.data.min(axis=-2, keepdims=True)
    hi = v.data.max(axis=-2, keepdims=True)
    assert np.all(out.data >= lo - 1e-10) and np.all(out.data <= hi + 1e-10)


@given(st.integers(1, 6), st.integers(0, 10 ** 6))
def test_cross_equals_self_on_identical_inputs(n, seed):
    p, x = params(seed=seed), tokens(n, seed=seed)
    assert np.array_equal(cross_attention(x, x, p).data, self_attention(x, p).data)


def test_batched_inputs():
    p = params()
    x = Tensor(np.random.default_rng(0).normal(size=(3, 5, 8)))
    out = self_attention(x, p).data
    for b in range(3):
        assert np.allclose(out[b], self_attention(Tensor(x.data[b]), p).data, atol=1e-13)


def test_gradients_pass_finite_differences():
    p = params(std=0.5)
    xs, xt = tokens(3, seed=8), tokens(4, seed=9)
    xs.requires_grad = xt.requires_grad = True
    leaves = [p.w_q, p.w_k, p.w_v, p.w_o, xs, xt]
    w = Tensor(np.random.default_rng(10).normal(size=(3, 8)))
    assert finite_diff_check(lambda: nc.sum(cross_attention(xs, xt, p) * w), leaves) < 1e-4
    assert finite_diff_check(lambda: nc.sum(self_attention(xs, p) * w[:3]), leaves[:5]) < 1e-4


def test_weights_csv_export(tmp_path):
    w = attention_weights(tokens(2), tokens(3, seed=2), params())
    path = tmp_path / "heat.csv"
    write_weights_csv(path, w, head=1)
    lines = path.read_text().splitlines()
    assert lines[0] == "query,key0,key1,key2"
    row = [float(v) for v in lines[1].split(",")[1:]]
    assert row == w[1, 0].tolist()
    assert math.isclose(sum(row), 1.0, abs_tol=1e-12)
