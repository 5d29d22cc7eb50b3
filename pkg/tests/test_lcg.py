import numpy as np
import pytest
from hypothesis import given, strategies as st

from gitreid import numerics as nx
from gitreid.embedding import ConfigError
from gitreid.lcg import (NodeView, activate, aggregate, build_adjacency, embed_nodes, init_lcg, lcg_forward,
                         sample_nodes)
from oracles import adjacency_loop, aggregate_loop, gelu64, layer_norm64

T = nx.Tensor


def test_p16_s2_node_config():
    v = NodeView(16, 2, 3)
    assert (v.n, v.d) == (64, 12)


def test_single_node_when_block_is_whole_patch():
    v = NodeView(8, 8, 3)
    x = np.random.default_rng(0).normal(size=(2, 5, v.width)).astype(np.float32)
    nodes = sample_nodes(T(x), v).data
    assert nodes.shape == (2, 5, 1, 192)
    assert np.array_equal(nodes[:, :, 0], x)


def test_block_must_tile():
    with pytest.raises(ConfigError):
        NodeView(8, 3, 3)


def test_node_is_spatial_tile():
    v = NodeView(4, 2, 1)
    x = np.arange(16.0)  # 4x4 grid, raster
    nodes = v.split(T(x)).data
    assert nodes[0].tolist() == [0, 1, 4, 5]
    assert nodes[3].tolist() == [10, 11, 14, 15]


@given(st.sampled_from([(16, 2, 3), (16, 4, 3), (16, 8, 3), (8, 2, 3), (4, 1, 4), (4, 2, 4), (8, 8, 5)]),
       st.integers(0, 999))
def test_split_merge_round_trip(shape, seed):
    v = NodeView(*shape)
    x = np.random.default_rng(seed).normal(size=(2, 3, v.width)).astype(np.float32)
    assert np.array_equal(v.merge(v.split(T(x))).data, x)


def test_embed_nodes_examples():
    raw = T(np.zeros((2, 4, 12)))
    assert np.array_equal(embed_nodes(raw, T(np.ones((12, 12))), T(np.zeros((4, 12)))).data, np.zeros((2, 4, 12)))
    x = np.random.default_rng(0).normal(size=(2, 4, 12)).astype(np.float32)
    out = embed_nodes(T(x), T(np.eye(12)), T(np.zeros((4, 12)))).data
    assert out.shape == (2, 4, 12) and np.array_equal(out, x)


def test_adjacency_examples():
    same = build_adjacency(T(np.ones((3, 5)))).data
    assert np.allclose(same, 1 / 3, atol=1e-7)
    ortho = build_adjacency(T(np.eye(2))).data
    e = np.exp(1.0)
    assert np.allclose(ortho, [[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]], atol=1e-6)
    assert abs(ortho[0, 0] - 0.731) < 1e-3


def test_adjacency_zero_node_is_finite():
    X = np.random.default_rng(0).normal(size=(4, 3))
    X[1] = 0
    A = build_adjacency(T(X)).data
    assert np.isfinite(A).all()
    assert np.allclose(A, adjacency_loop(X), atol=1e-6)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10**6))
def test_adjacency_oracle_and_contract(n, d, seed):
    X = np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32)
    A = build_adjacency(T(X)).data
    assert np.allclose(A, adjacency_loop(X), atol=1e-6)
    assert np.allclose(A.sum(-1), 1, atol=1e-6)
    assert (A > 0).all()
    assert (A.diagonal() >= A.max(axis=1) - 1e-6).all()


@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 10**6))
def test_adjacency_positive_node_scaling(n, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    X[np.linalg.norm(X, axis=1) < 0.1] = 0.5  # the eps guard only matters near zero norm
    scale = rng.uniform(0.1, 10, size=(n, 1))
    with nx.precision(np.float64):
        assert np.allclose(build_adjacency(T(X)).data, build_adjacency(T(X * scale)).data, atol=1e-7)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10**6))
def test_aggregate_loop_oracle(n, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d)).astype(np.float32)
    A = rng.uniform(0.05, 1, size=(n, n)).astype(np.float32)
    W = rng.normal(size=(n, d)).astype(np.float32)
    assert np.allclose(aggregate(T(X), T(A), T(W)).data, aggregate_loop(X, A, W), atol=1e-6)


def test_aggregate_examples():
    A = build_adjacency(T(np.random.default_rng(0).normal(size=(5, 3))))
    X = T(np.random.default_rng(1).normal(size=(5, 3)))
    W = T(np.random.default_rng(2).normal(size=(5, 3)))
    assert np.allclose(aggregate(X, A, W).data, aggregate(X, A, W, reduced=True).data, atol=1e-6)
    Xs = T(np.tile(np.array([[1.0, -2.0, 0.5]]), (4, 1)))
    U = aggregate(Xs, T(np.full((4, 4), 0.25)), T(np.ones((4, 3)))).data
    assert np.allclose(U, Xs.data, atol=1e-6)


def test_activate_examples():
    gain, bias = T(np.ones(4)), T(np.array([0.5, -1.0, 0.0, 2.0]))
    out = activate(T(np.full((3, 4), 7.0)), gain, bias).data
    assert np.allclose(out, gelu64(np.tile(bias.data, (3, 1))), atol=1e-6)
    rng = np.random.default_rng(0)
    U, g, b = rng.normal(size=(2, 3, 4)), rng.normal(size=4), rng.normal(size=4)
    ref = gelu64(layer_norm64(U, g, b))
    got = activate(T(U), T(g), T(b)).data
    assert got.shape == U.shape and np.allclose(got, ref, atol=1e-6)


def _state(seed=0, N=3, view=NodeView(4, 2, 3)):
    rng = np.random.default_rng(seed)
    params = init_lcg(rng, view.n, view.d)
    local = rng.normal(size=(2, N, view.n, view.d)).astype(np.float32)
    glob = rng.normal(size=(2, N, view.width)).astype(np.float32)
    return params, local, glob, view


def test_zero_global_matches_absent():
    params, local, glob, view = _state()
    a = lcg_forward(T(local), None, params, view).data
    b = lcg_forward(T(local), T(np.zeros_like(glob)), params, view).data
    assert np.array_equal(a, b)


def test_fusion_linearity():
    params, local, glob, view = _state()
    g2 = np.random.default_rng(9).normal(size=glob.shape).astype(np.float32)
    fused = lcg_forward(T(local), T(glob) + T(g2), params, view).data
    direct_in = local + view.split(T(glob)).data + view.split(T(g2)).data
    direct = lcg_forward(T(direct_in), None, params, view).data
    assert np.allclose(fused, direct, atol=1e-6)


def test_node_permutation_equivariance():
    params, local, _, view = _state()
    perm = np.random.default_rng(3).permutation(view.n)
    out = lcg_forward(T(local), None, params, view).data
    params.W = nx.parameter(params.W.data[perm])
    out_p = lcg_forward(T(local[:, :, perm]), None, params, view).data
    assert np.allclose(out[:, :, perm], out_p, atol=1e-6)


def test_lcg_parameter_gradients_float64():
    params, local, glob, view = _state(N=2)
    with nx.precision(np.float64):
        for name in ("W", "ln_gain", "ln_bias"):
            setattr(params, name, nx.parameter(getattr(params, name).data.astype(np.float64) + 0.1))
        probe = np.random.default_rng(5).normal(size=local.shape)

        def loss():
            return (lcg_forward(T(local.astype(np.float64)), T(glob.astype(np.float64)), params, view)
                    * T(probe)).sum()

        nx.backward(loss())
        for name in ("W", "ln_gain", "ln_bias"):
            t = getattr(params, name)
            for idx in [(0,) * t.ndim, tuple(s - 1 for s in t.shape)]:
                with nx.no_grad():
                    num = nx.central_difference(lambda: loss().item(), t.data, idx, 1e-6)
                assert nx.relative_error(t.grad[idx], num, floor=1e-8) < 1e-5
