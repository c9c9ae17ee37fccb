"""Graph construction, geodesic expansion, and field smoothing.

The geodesic and smoothing checks here double as reference oracles: a
dense Floyd-Warshall solve and an explicit dense weight matrix, both
written independently of the CSR/greedy code paths they validate.
"""

from __future__ import annotations

import numpy as np
import pytest

import oracles
from semkp.errors import SchemaError
from semkp.graph import (
    all_geodesic_neighborhoods,
    build_knn_graph,
    geodesic_neighborhood,
    graph_gaussian_smooth,
)


def _cloud(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(n, 3))


# ---------------------------------------------------------------- knn graph


@pytest.mark.parametrize("seed,k", [(0, 4), (1, 8), (2, 6)])
def test_knn_graph_is_symmetric(seed, k):
    g = build_knn_graph(_cloud(70, seed), k)
    edges = set()
    for a in range(g.n):
        for b in g.neighbors(a):
            edges.add((a, int(b)))
    assert all((b, a) in edges for a, b in edges)


def test_knn_graph_weights_are_euclidean():
    pts = _cloud(50, 3)
    g = build_knn_graph(pts, 5)
    for a in range(g.n):
        lo, hi = g.indptr[a], g.indptr[a + 1]
        expect = np.linalg.norm(pts[g.indices[lo:hi]] - pts[a], axis=1)
        np.testing.assert_array_equal(g.weights[lo:hi], expect)


def test_knn_graph_degree_at_least_k():
    # symmetric closure can only add edges beyond the k outgoing ones
    g = build_knn_graph(_cloud(64, 4), 7)
    assert all(g.degree(i) >= 7 for i in range(g.n))


def test_knn_graph_neighbors_sorted_and_self_free():
    g = build_knn_graph(_cloud(40, 5), 6)
    for a in range(g.n):
        nb = g.neighbors(a)
        assert np.all(np.diff(nb) > 0)
        assert a not in nb


def test_knn_graph_connected_flag_matches_bfs():
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import connected_components

    # two well-separated blobs with k too small to bridge them
    rng = np.random.default_rng(6)
    pts = np.concatenate([rng.normal(0, 0.1, (20, 3)),
                          rng.normal(50, 0.1, (20, 3))])
    g = build_knn_graph(pts, 4)
    mat = csr_matrix((g.weights, g.indices, g.indptr), shape=(g.n, g.n))
    ncomp, _ = connected_components(mat, directed=False)
    assert g.connected == (ncomp == 1)
    assert not g.connected

    g2 = build_knn_graph(_cloud(40, 7), 6)
    mat2 = csr_matrix((g2.weights, g2.indices, g2.indptr), shape=(g2.n, g2.n))
    ncomp2, _ = connected_components(mat2, directed=False)
    assert g2.connected == (ncomp2 == 1)


# ----------------------------------------------------------- geodesics


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_geodesic_matches_floyd_warshall(seed):
    pts = _cloud(50, seed)
    g = build_knn_graph(pts, 6)
    for start in (0, 17, 49):
        nb = geodesic_neighborhood(g, start, size=g.n)
        got = dict(zip(nb.indices.tolist(), nb.distances.tolist()))
        assert got == oracles.geodesics_from(g, start)


def test_geodesic_truncation_keeps_nearest_by_distance_then_index():
    g = build_knn_graph(_cloud(60, 8), 6)
    size = 20
    for start in (0, 31):
        dense = oracles.geodesics_from(g, start)
        nb = geodesic_neighborhood(g, start, size=size)
        assert nb.indices.shape == (size,)
        assert not nb.truncated
        order = sorted(dense, key=lambda j: (dense[j], j))
        assert nb.indices.tolist() == order[:size]
        # settle order itself follows the same lexicographic rule
        keys = list(zip(nb.distances.tolist(), nb.indices.tolist()))
        assert keys == sorted(keys)


def test_geodesic_seed_settles_first_at_zero():
    g = build_knn_graph(_cloud(30, 9), 5)
    nb = geodesic_neighborhood(g, 12, size=10)
    assert nb.indices[0] == 12
    assert nb.distances[0] == 0.0


def test_geodesic_tie_settles_lower_index_first():
    # a path graph folded so nodes 1 and 2 sit at the same distance from 0
    pts = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [2.0, 0.0, 0.0],
    ])
    g = build_knn_graph(pts, 2)
    nb = geodesic_neighborhood(g, 0, size=4)
    d = nb.distances
    assert d[1] == d[2] == 1.0
    assert nb.indices[1] == 1 and nb.indices[2] == 2


def test_geodesic_truncated_component():
    rng = np.random.default_rng(10)
    pts = np.concatenate([rng.normal(0, 0.1, (12, 3)),
                          rng.normal(90, 0.1, (12, 3))])
    g = build_knn_graph(pts, 3)
    assert not g.connected
    nb = geodesic_neighborhood(g, 0, size=20)
    assert nb.truncated
    assert nb.indices.shape[0] == 12
    assert set(nb.indices.tolist()) == set(range(12))


def test_geodesic_rejects_bad_arguments():
    g = build_knn_graph(_cloud(20, 11), 4)
    with pytest.raises(SchemaError):
        geodesic_neighborhood(g, -1, size=5)
    with pytest.raises(SchemaError):
        geodesic_neighborhood(g, 20, size=5)
    with pytest.raises(SchemaError):
        geodesic_neighborhood(g, 0, size=0)


def test_all_neighborhoods_match_single_expansions():
    g = build_knn_graph(_cloud(45, 12), 6)
    nodes, dists, counts = all_geodesic_neighborhoods(g, size=15)
    assert nodes.shape == (45, 15) and dists.shape == (45, 15)
    for i in range(g.n):
        nb = geodesic_neighborhood(g, i, size=15)
        c = counts[i]
        assert c == nb.indices.shape[0]
        assert np.array_equal(nodes[i, :c], nb.indices)
        assert np.array_equal(dists[i, :c], nb.distances)
        assert np.all(nodes[i, c:] == -1)
        assert np.all(np.isinf(dists[i, c:]))


# ------------------------------------------------------------ smoothing


@pytest.mark.parametrize("seed,bw", [(0, 0.05), (1, 0.3), (2, 1.0)])
def test_smoothing_matches_dense_matrix(seed, bw):
    pts = _cloud(80, seed)
    g = build_knn_graph(pts, 6)
    rng = np.random.default_rng(seed + 100)
    vals = rng.normal(size=g.n)
    got = graph_gaussian_smooth(vals, g, bandwidth=bw, neighborhood_size=25)
    expect = oracles.smooth_dense(vals, g, bw, 25)
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-10)


def test_smoothing_keeps_constant_fields_bit_exact():
    g = build_knn_graph(_cloud(50, 3), 6)
    vals = np.full(g.n, 0.7371298561)
    out = graph_gaussian_smooth(vals, g, bandwidth=0.1)
    assert np.array_equal(out, vals)


def test_smoothing_tiny_bandwidth_is_identity():
    # weights to every non-self neighbor underflow to zero
    g = build_knn_graph(_cloud(40, 4), 6)
    rng = np.random.default_rng(200)
    vals = rng.normal(size=g.n)
    out = graph_gaussian_smooth(vals, g, bandwidth=1e-9)
    assert np.array_equal(out, vals)


def test_smoothing_huge_bandwidth_approaches_neighborhood_mean():
    g = build_knn_graph(_cloud(30, 5), 29)  # complete graph
    rng = np.random.default_rng(300)
    vals = rng.normal(size=g.n)
    out = graph_gaussian_smooth(vals, g, bandwidth=1e6, neighborhood_size=30)
    np.testing.assert_allclose(out, np.full(g.n, vals.mean()), atol=1e-9)


def test_smoothing_accepts_precomputed_neighborhoods():
    g = build_knn_graph(_cloud(35, 6), 5)
    rng = np.random.default_rng(400)
    vals = rng.normal(size=g.n)
    hoods = all_geodesic_neighborhoods(g, 12)
    a = graph_gaussian_smooth(vals, g, bandwidth=0.2, neighborhood_size=12)
    b = graph_gaussian_smooth(vals, g, bandwidth=0.2, neighborhoods=hoods)
    assert np.array_equal(a, b)


def test_smoothing_rejects_bad_input():
    g = build_knn_graph(_cloud(20, 7), 4)
    with pytest.raises(SchemaError):
        graph_gaussian_smooth(np.zeros(19), g)
    with pytest.raises(SchemaError):
        graph_gaussian_smooth(np.zeros(20), g, bandwidth=0.0)
    with pytest.raises(SchemaError):
        graph_gaussian_smooth(np.zeros(20), g, bandwidth=-1.0)
