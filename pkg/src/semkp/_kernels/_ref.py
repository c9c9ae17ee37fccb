"""Pure numpy/python reference kernels.

Everything here is written to match the compiled versions operation for
operation: the Dijkstra expansion uses the same (distance, index) ordering
and relaxation rule, and the splatting loops accumulate per point in index
order so that floating-point results agree to tight tolerances.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

GAUSS_CUTOFF = 8.0  # window half-width in units of r; exp(-32) is below fp noise
GAUSS_CLAMP = 1.0 - 1e-12
DEPTH_TIE_TOL = 1e-6


def geodesic_from(indptr, indices, weights, seed: int, size: int):
    """Expand a Dijkstra front from `seed` until `size` nodes are settled.

    Returns (nodes, dists) in settle order; shorter than `size` when the
    connected component runs out.  Equal distances settle lower index first.
    """
    n = indptr.shape[0] - 1
    dist = np.full(n, np.inf)
    settled = np.zeros(n, dtype=bool)
    out_nodes: list[int] = []
    out_dists: list[float] = []
    dist[seed] = 0.0
    heap: list[tuple[float, int]] = [(0.0, int(seed))]
    while heap and len(out_nodes) < size:
        d, u = heapq.heappop(heap)
        if settled[u]:
            continue
        settled[u] = True
        out_nodes.append(u)
        out_dists.append(d)
        for e in range(indptr[u], indptr[u + 1]):
            v = int(indices[e])
            if settled[v]:
                continue
            nd = d + weights[e]
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return (
        np.asarray(out_nodes, dtype=np.int64),
        np.asarray(out_dists, dtype=np.float64),
    )


def geodesic_all(indptr, indices, weights, size: int):
    """Geodesic neighborhoods from every node.

    Returns (nodes (n, size) int64 padded with -1, dists (n, size) padded
    with +inf, counts (n,) int64).
    """
    n = indptr.shape[0] - 1
    nodes = np.full((n, size), -1, dtype=np.int64)
    dists = np.full((n, size), np.inf)
    counts = np.zeros(n, dtype=np.int64)
    for s in range(n):
        nb, dd = geodesic_from(indptr, indices, weights, s, size)
        m = nb.shape[0]
        nodes[s, :m] = nb
        dists[s, :m] = dd
        counts[s] = m
    return nodes, dists, counts


def _window(q: float, limit: int, half: float):
    lo = int(math.ceil(q - half))
    hi = int(math.floor(q + half))
    return max(lo, 0), min(hi, limit - 1)


def splat_forward(qx, qy, h: int, w: int, r: float):
    """Soft silhouette: S(p) = 1 - prod_i (1 - G_i(p)).

    Accumulated as sum of log1p(-G_i) per pixel, points in index order.
    """
    acc = np.zeros((h, w))
    half = GAUSS_CUTOFF * r
    inv = 1.0 / (2.0 * r * r)
    for i in range(qx.shape[0]):
        x0, x1 = _window(qx[i], w, half)
        y0, y1 = _window(qy[i], h, half)
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1, dtype=np.float64) - qx[i]
        dy = np.arange(y0, y1 + 1, dtype=np.float64) - qy[i]
        g = np.exp(-(dx[None, :] * dx[None, :] + dy[:, None] * dy[:, None]) * inv)
        np.minimum(g, GAUSS_CLAMP, out=g)
        acc[y0:y1 + 1, x0:x1 + 1] += np.log1p(-g)
    return 1.0 - np.exp(acc)


def splat_backward(upstream, qx, qy, r: float):
    """Gradient of sum_p upstream[p] * A(p) wrt each splat center.

    With A = sum_i log(1 - G_i) already folded into `upstream` by the
    caller (upstream[p] = 2 (S-T)(1-S) for the silhouette SSD loss), the
    per-point gradient is sum_p upstream * G/(1-G) * (p - q) / r^2.
    """
    h, w = upstream.shape
    m = qx.shape[0]
    gx = np.zeros(m)
    gy = np.zeros(m)
    half = GAUSS_CUTOFF * r
    inv = 1.0 / (2.0 * r * r)
    for i in range(m):
        x0, x1 = _window(qx[i], w, half)
        y0, y1 = _window(qy[i], h, half)
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1, dtype=np.float64) - qx[i]
        dy = np.arange(y0, y1 + 1, dtype=np.float64) - qy[i]
        g = np.exp(-(dx[None, :] * dx[None, :] + dy[:, None] * dy[:, None]) * inv)
        np.minimum(g, GAUSS_CLAMP, out=g)
        coupling = upstream[y0:y1 + 1, x0:x1 + 1] * (g / (1.0 - g))
        gx[i] = float(np.sum(coupling * dx[None, :])) / (r * r)
        gy[i] = float(np.sum(coupling * dy[:, None])) / (r * r)
    return gx, gy


def zbuffer_points(qx, qy, depth, h: int, w: int, radius: float):
    """Nearest-point ownership per pixel within a disk of `radius` pixels.

    Returns an (h, w) int64 image of point indices, -1 where no point lands.
    A point only displaces the current owner when it is closer by more than
    the depth tie tolerance; within the tolerance the earlier (lower) index
    keeps the pixel.
    """
    owner = np.full((h, w), -1, dtype=np.int64)
    zbuf = np.full((h, w), np.inf)
    r2 = radius * radius
    for i in range(qx.shape[0]):
        x0, x1 = _window(qx[i], w, radius)
        y0, y1 = _window(qy[i], h, radius)
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1, dtype=np.float64) - qx[i]
        dy = np.arange(y0, y1 + 1, dtype=np.float64) - qy[i]
        inside = dx[None, :] * dx[None, :] + dy[:, None] * dy[:, None] <= r2
        sub_owner = owner[y0:y1 + 1, x0:x1 + 1]
        sub_z = zbuf[y0:y1 + 1, x0:x1 + 1]
        take = inside & ((sub_owner < 0) | (depth[i] < sub_z - DEPTH_TIE_TOL))
        sub_owner[take] = i
        sub_z[take] = depth[i]
    return owner
