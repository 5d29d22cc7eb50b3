import math

import numpy as np

from gitreid import numerics as nx
from gitreid.transformer import init_transformer, layer_forward, mhsa
from oracles import gelu64, layer_norm64, softmax64

T = nx.Tensor


def _params(width=8, heads=2, seed=0):
    return init_transformer(np.random.default_rng(seed), width, heads)


def test_single_token_attention_is_one():
    p = _params()
    x = np.random.default_rng(1).normal(size=(2, 1, 8)).astype(np.float32)
    out, attn = mhsa(T(x), p, return_attention=True)
    assert np.array_equal(attn.data, np.ones((2, 2, 1, 1), np.float32))
    v = x @ p.wv.data + p.bv.data
    assert np.allclose(out.data, v @ p.wo.data + p.bo.data, atol=1e-6)


def test_single_head_oracle():
    p = _params(width=6, heads=1, seed=2)
    x = np.random.default_rng(3).normal(size=(1, 5, 6))
    q, k, v = (x[0] @ getattr(p, w).data.astype(np.float64) for w in ("wq", "wk", "wv"))
    a = softmax64(q @ k.T / math.sqrt(6))
    ref = a @ v @ p.wo.data.astype(np.float64)
    assert np.allclose(mhsa(T(x), p).data[0], ref, atol=1e-6)


def test_uniform_tokens_uniform_attention():
    p = _params()
    x = np.tile(np.random.default_rng(0).normal(size=(1, 1, 8)), (1, 5, 1))
    _, attn = mhsa(T(x), p, return_attention=True)
    assert np.allclose(attn.data, 1 / 5, atol=1e-7)


def test_attention_rows_sum_to_one():
    p = _params()
    x = np.random.default_rng(4).normal(size=(3, 7, 8)) * 5
    _, attn = mhsa(T(x), p, return_attention=True)
    assert np.allclose(attn.data.sum(-1), 1, atol=1e-6)


def test_zero_local_equals_absent_and_shape():
    p = _params()
    x = np.random.default_rng(5).normal(size=(2, 5, 8)).astype(np.float32)
    a = layer_forward(T(x), None, p).data
    b = layer_forward(T(x), T(np.zeros((2, 4, 8))), p).data
    assert a.shape == (2, 5, 8) and np.array_equal(a, b)


def test_layer_matches_pre_ln_composition():
    p = _params(seed=7)
    x = np.random.default_rng(6).normal(size=(1, 4, 8))
    g = {k: v.data.astype(np.float64) for k, v in p.named("p").items()}
    g = {k[2:]: v for k, v in g.items()}

    def attn(h):
        heads = []
        for i in range(2):
            sl = slice(4 * i, 4 * i + 4)
            q = h @ g["wq"][:, sl] + g["bq"][sl]
            k = h @ g["wk"][:, sl] + g["bk"][sl]
            v = h @ g["wv"][:, sl] + g["bv"][sl]
            heads.append(softmax64(q @ k.T / 2.0) @ v)
        return np.concatenate(heads, -1) @ g["wo"] + g["bo"]

    x0 = x[0]
    x1 = attn(layer_norm64(x0, g["ln1_gain"], g["ln1_bias"])) + x0
    h = layer_norm64(x1, g["ln2_gain"], g["ln2_bias"])
    y = gelu64(h @ g["w1"] + g["b1"]) @ g["w2"] + g["b2"] + x1
    assert np.allclose(layer_forward(T(x), None, p).data[0], y, atol=1e-5)


def test_patch_permutation_equivariance():
    p = _params()
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 5, 8)).astype(np.float32)
    loc = rng.normal(size=(1, 4, 8)).astype(np.float32)
    perm = np.array([3, 1, 0, 2])
    a = layer_forward(T(x), T(loc), p).data
    xp = np.concatenate([x[:, :1], x[:, 1:][:, perm]], axis=1)
    b = layer_forward(T(xp), T(loc[:, perm]), p).data
    assert np.allclose(a[:, 1:][:, perm], b[:, 1:], atol=1e-5)
    assert np.allclose(a[:, 0], b[:, 0], atol=1e-5)


def test_local_input_skips_class_row():
    p = _params()
    x = np.random.default_rng(9).normal(size=(1, 3, 8)).astype(np.float32)
    loc = np.random.default_rng(10).normal(size=(1, 2, 8)).astype(np.float32)
    manual = x.copy()
    manual[:, 1:] += loc
    assert np.allclose(layer_forward(T(x), T(loc), p).data, layer_forward(T(manual), None, p).data, atol=1e-6)
