"""kNN graphs, geodesic neighborhoods, and Gaussian smoothing on clouds.

The graph is the substrate for non-minimum suppression and for smoothing
scalar fields over a shape: Euclidean distances between nearby samples are
a good proxy for surface distance, and chaining them through the graph
approximates geodesics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .errors import SchemaError

DEFAULT_KNN = 8
DEFAULT_NEIGHBORHOOD = 55
DEFAULT_BANDWIDTH = 0.03


@dataclass(frozen=True)
class CloudGraph:
    """Symmetric weighted adjacency in CSR form.

    `indices[indptr[i]:indptr[i+1]]` are the neighbors of point i in
    ascending order; `weights` holds the matching Euclidean edge lengths.
    """

    n: int
    k: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    connected: bool

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degree(self, i: int) -> int:
        return int(self.indptr[i + 1] - self.indptr[i])


def build_knn_graph(points: np.ndarray, k: int = DEFAULT_KNN) -> CloudGraph:
    """Symmetric k-nearest-neighbor graph over an (n, 3) cloud.

    Each point contributes edges to its k nearest others; the union with
    all reversed edges makes the graph undirected, so degrees can exceed k.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SchemaError(f"expected (n, 3) points, got {pts.shape}")
    n = pts.shape[0]
    if not 1 <= k < n:
        raise SchemaError(f"k must be in [1, {n - 1}], got {k}")

    tree = cKDTree(pts)
    _, nn = tree.query(pts, k=k + 1)
    nn = np.atleast_2d(nn)

    rows = np.repeat(np.arange(n), k)
    cols = np.empty(n * k, dtype=np.int64)
    for i in range(n):
        neigh = [j for j in nn[i] if j != i][:k]
        # duplicate coordinates can leave the query short of k distinct others
        while len(neigh) < k:
            neigh.append(neigh[-1])
        cols[i * k:(i + 1) * k] = neigh

    # symmetric closure, deduplicated
    a = np.concatenate([rows, cols])
    b = np.concatenate([cols, rows])
    keep = a != b
    a, b = a[keep], b[keep]
    pairs = np.unique(np.stack([a, b], axis=1), axis=0)
    a, b = pairs[:, 0], pairs[:, 1]

    weights = np.linalg.norm(pts[a] - pts[b], axis=1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, a + 1, 1)
    indptr = np.cumsum(indptr, dtype=np.int64)

    indptr.setflags(write=False)
    b = np.ascontiguousarray(b, dtype=np.int64)
    b.setflags(write=False)
    weights = np.ascontiguousarray(weights)
    weights.setflags(write=False)

    graph = CloudGraph(
        n=n, k=k, indptr=indptr, indices=b, weights=weights,
        connected=_is_connected(indptr, b, n),
    )
    return graph


def _is_connected(indptr, indices, n: int) -> bool:
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        u = stack.pop()
        for v in indices[indptr[u]:indptr[u + 1]]:
            if not seen[v]:
                seen[v] = True
                count += 1
                stack.append(int(v))
    return count == n


@dataclass(frozen=True)
class Neighborhood:
    """Result of one geodesic expansion: nodes in settle order."""

    indices: np.ndarray
    distances: np.ndarray
    truncated: bool


def geodesic_neighborhood(graph: CloudGraph, seed: int, size: int = DEFAULT_NEIGHBORHOOD) -> Neighborhood:
    """The `size` geodesically nearest points to `seed` (seed included).

    Distance ties settle the lower point index first.  When seed's connected
    component has fewer than `size` nodes the result is shorter and marked
    truncated.
    """
    if not 0 <= seed < graph.n:
        raise SchemaError(f"seed {seed} out of range for {graph.n} points")
    if size < 1:
        raise SchemaError("neighborhood size must be >= 1")
    nodes, dists = _kernels.geodesic_from(
        graph.indptr, graph.indices, graph.weights, int(seed), int(size)
    )
    return Neighborhood(nodes, dists, truncated=nodes.shape[0] < size)


def all_geodesic_neighborhoods(graph: CloudGraph, size: int = DEFAULT_NEIGHBORHOOD):
    """Neighborhoods from every point at once.

    Returns (nodes, dists, counts): (n, size) index array padded with -1,
    matching distances padded with +inf, and per-point settled counts.
    """
    if size < 1:
        raise SchemaError("neighborhood size must be >= 1")
    return _kernels.geodesic_all(graph.indptr, graph.indices, graph.weights, int(size))


def graph_gaussian_smooth(
    values: np.ndarray,
    graph: CloudGraph,
    bandwidth: float = DEFAULT_BANDWIDTH,
    neighborhood_size: int = DEFAULT_NEIGHBORHOOD,
    neighborhoods=None,
) -> np.ndarray:
    """Gaussian-weighted average of `values` over geodesic neighborhoods.

    out[i] = sum_j exp(-d_ij^2 / (2 bw^2)) v[j] / sum_j exp(...), with j
    ranging over the geodesic neighborhood of i (i itself included at
    distance 0).  Precomputed `neighborhoods` from
    all_geodesic_neighborhoods can be passed to amortize the expansion.

    Computed in centered form, v[i] + weighted mean of (v[j] - v[i]),
    which avoids cancellation and keeps locally constant fields exactly
    constant: downstream plateau tie-breaking relies on bit-equality of
    smoothed values over flat regions.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape != (graph.n,):
        raise SchemaError(f"field length {vals.shape} does not match cloud size {graph.n}")
    if not bandwidth > 0:
        raise SchemaError("bandwidth must be positive")
    if neighborhoods is None:
        neighborhoods = all_geodesic_neighborhoods(graph, neighborhood_size)
    nodes, dists, _ = neighborhoods

    # padded slots carry +inf distance, so their weight vanishes
    w = np.exp(-(dists * dists) / (2.0 * bandwidth * bandwidth))
    delta = vals[np.maximum(nodes, 0)] - vals[:, None]
    return vals + (w * delta).sum(axis=1) / w.sum(axis=1)
