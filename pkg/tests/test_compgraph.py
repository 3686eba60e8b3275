import numpy as np
import pytest

from czsl import diffcore as dc
from czsl.compgraph import build_graph, gcn_forward, graph_structure, init_gcn, normalize_adjacency, propagate
from czsl.dataset import EmbeddingProvider, Kind, Primitive


def prims(n, kind, start=0):
    return [Primitive(start + i, f"{kind.value.lower()}_{start + i}", kind) for i in range(n)]


def provider_for(*groups, dim=8):
    prov = EmbeddingProvider(dim, seed=3)
    for g in groups:
        for p in g:
            prov.register(p)
    return prov


def brute_normalize(A):
    n = len(A)
    d = [sum(A[i][j] for j in range(n)) for i in range(n)]
    return np.array([[A[i][j] / np.sqrt(d[i] * d[j]) for j in range(n)] for i in range(n)])


def brute_layer(a_hat, V, W, relu):
    n, k = len(a_hat), W.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for c in range(k):
            s = 0.0
            for j in range(n):
                s += a_hat[i, j] * sum(V[j, m] * W[m, c] for m in range(W.shape[0]))
            out[i, c] = max(s, 0.0) if relu else s
    return out


def random_graph(rng):
    n = int(rng.integers(1, 13))
    A = (rng.random((n, n)) < 0.3).astype(float)
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 1.0)
    return A


def test_sizes():
    P1, P2 = prims(5, Kind.TYPE1), prims(5, Kind.TYPE2, 5)
    g = build_graph(P1, P2, provider_for(P1, P2))
    assert g.n_nodes == 35


def test_single_pair_triangle():
    P1, P2 = prims(1, Kind.TYPE1), prims(1, Kind.TYPE2, 1)
    g = build_graph(P1, P2, provider_for(P1, P2))
    np.testing.assert_array_equal(g.adjacency, np.ones((3, 3)))


def test_structure_invariants():
    A = graph_structure(3, 4)
    assert np.array_equal(A, A.T) and np.all(np.diag(A) == 1)
    for i in range(3):
        for j in range(4):
            c = 7 + i * 4 + j
            nbrs = set(np.flatnonzero(A[c])) - {c}
            assert nbrs == {i, 3 + j}
    # primitive-primitive edges close each pair's triangle; same-kind primitives stay apart
    assert np.all(A[:3, 3:7] == 1)
    assert np.all(A[:3, :3] == np.eye(3)) and np.all(A[3:7, 3:7] == np.eye(4))
    assert np.all(A[7:, 7:] == np.eye(12))


def test_composition_feature_is_mean():
    P1, P2 = prims(2, Kind.TYPE1), prims(3, Kind.TYPE2, 2)
    prov = provider_for(P1, P2)
    g = build_graph(P1, P2, prov)
    np.testing.assert_array_equal(g.features[g.comp_node(1, 2)], (prov(P1[1]) + prov(P2[2])) / 2)


def test_normalize_single_node():
    assert normalize_adjacency(np.ones((1, 1)), np.ones((1, 1))).tolist() == [[1.0]]


def test_normalize_path_graph():
    A = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=float)
    D = np.diag(A.sum(1))
    expect = np.array([[1 / 2, 1 / np.sqrt(6), 0], [1 / np.sqrt(6), 1 / 3, 1 / np.sqrt(6)], [0, 1 / np.sqrt(6), 1 / 2]])
    np.testing.assert_allclose(normalize_adjacency(A, D), expect, atol=1e-15)


def test_oracle_200_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        A = random_graph(rng)
        a_hat = normalize_adjacency(A, np.diag(A.sum(1)))
        ref = brute_normalize(A.tolist())
        assert np.max(np.abs(a_hat - ref)) < 1e-12
        assert np.max(np.abs(a_hat - a_hat.T)) < 1e-15
        V = rng.normal(size=(len(A), 4))
        W = rng.normal(size=(4, 3))
        for relu in (False, True):
            got = propagate(a_hat, V, [W], activate_last=relu).data
            assert np.max(np.abs(got - brute_layer(a_hat, V, W, relu))) < 1e-12


def test_one_layer_identity():
    v0 = np.array([[0.5, -1.0, 2.0]])
    out = propagate(np.eye(1), v0, [np.eye(3)], activate_last=True).data
    np.testing.assert_array_equal(out, np.maximum(v0, 0))


def test_two_node_graph_dense_oracle():
    A = np.ones((2, 2))
    V = np.array([[1.0, 2.0], [3.0, -4.0]])
    W = np.array([[0.5, -1.0], [2.0, 0.25]])
    a_hat = normalize_adjacency(A, A.sum(1))
    np.testing.assert_allclose(propagate(a_hat, V, [W]).data, 0.5 * np.ones((2, 2)) @ V @ W, atol=1e-15)


def test_last_layer_linear_by_default():
    rng = np.random.default_rng(1)
    P1, P2 = prims(3, Kind.TYPE1), prims(3, Kind.TYPE2, 3)
    g = build_graph(P1, P2, provider_for(P1, P2))
    V = gcn_forward(g, init_gcn(8, (16, 6), rng))
    assert V.shape == (15, 6) and V.min() < 0


def test_dimension_mismatch():
    with pytest.raises(dc.ShapeError, match="gcn layer 1"):
        propagate(np.eye(2), np.ones((2, 3)), [np.ones((3, 4)), np.ones((5, 2))])


def test_gcn_gradient_fd():
    rng = np.random.default_rng(2)
    P1, P2 = prims(2, Kind.TYPE1), prims(2, Kind.TYPE2, 2)
    g = build_graph(P1, P2, provider_for(P1, P2))
    a_hat = normalize_adjacency(g.adjacency, g.degree)
    params = init_gcn(8, (5, 4), rng)
    c = rng.normal(size=(8, 4))

    def f(P):
        return dc.tsum(propagate(a_hat, g.features, [P["gcn.w0"], P["gcn.w1"]]) * c)

    assert dc.finite_diff_check(f, params) < 1e-4


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    P1, P2 = prims(4, Kind.TYPE1), prims(3, Kind.TYPE2, 4)
    prov = provider_for(P1, P2)
    params = init_gcn(8, (16, 16), rng)
    base = gcn_forward(build_graph(P1, P2, prov), params)
    perm = [2, 0, 3, 1]
    out = gcn_forward(build_graph([P1[k] for k in perm], P2, prov), params)
    n1, n2 = 4, 3
    rows = perm + list(range(n1, n1 + n2)) + [n1 + n2 + perm[i] * n2 + j for i in range(n1) for j in range(n2)]
    assert np.max(np.abs(out - base[rows])) < 1e-12


def test_locality():
    # two layers: a composition node depends only on nodes within two hops
    rng = np.random.default_rng(4)
    P1, P2 = prims(3, Kind.TYPE1), prims(3, Kind.TYPE2, 3)
    g = build_graph(P1, P2, provider_for(P1, P2))
    params = init_gcn(8, (16, 16), rng)
    a_hat = normalize_adjacency(g.adjacency, g.degree)
    ws = [params["gcn.w0"], params["gcn.w1"]]
    target = g.comp_node(0, 0)
    hops = np.linalg.matrix_power(g.adjacency, 2)[target] > 0
    v0 = np.array(g.features)
    v0[~hops] = 0.0
    full = propagate(a_hat, g.features, ws).data[target]
    masked = propagate(a_hat, v0, ws).data[target]
    np.testing.assert_array_equal(full, masked)
