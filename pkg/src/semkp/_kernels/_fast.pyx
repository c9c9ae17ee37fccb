# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: geodesic neighborhoods and image splatting.

Mirrors _ref.py operation for operation; see the parity tests.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, ceil, exp, floor, log1p

cnp.import_array()

ctypedef cnp.int64_t i64
ctypedef cnp.float64_t f64

cdef f64 GAUSS_CUTOFF = 8.0
cdef f64 GAUSS_CLAMP = 1e-12  # clamp G to 1 - GAUSS_CLAMP
cdef f64 DEPTH_TIE_TOL = 1e-6


cdef inline bint _heap_less(f64 da, i64 ia, f64 db, i64 ib) nogil:
    if da != db:
        return da < db
    return ia < ib


cdef inline void _heap_push(f64* hd, i64* hi, Py_ssize_t* hn, f64 d, i64 idx) nogil:
    cdef Py_ssize_t i = hn[0]
    cdef Py_ssize_t parent
    hn[0] += 1
    while i > 0:
        parent = (i - 1) >> 1
        if not _heap_less(d, idx, hd[parent], hi[parent]):
            break
        hd[i] = hd[parent]
        hi[i] = hi[parent]
        i = parent
    hd[i] = d
    hi[i] = idx


cdef inline void _heap_pop(f64* hd, i64* hi, Py_ssize_t* hn, f64* out_d, i64* out_i) nogil:
    out_d[0] = hd[0]
    out_i[0] = hi[0]
    hn[0] -= 1
    cdef f64 d = hd[hn[0]]
    cdef i64 idx = hi[hn[0]]
    cdef Py_ssize_t i = 0
    cdef Py_ssize_t child
    while True:
        child = 2 * i + 1
        if child >= hn[0]:
            break
        if child + 1 < hn[0] and _heap_less(hd[child + 1], hi[child + 1], hd[child], hi[child]):
            child += 1
        if _heap_less(hd[child], hi[child], d, idx):
            hd[i] = hd[child]
            hi[i] = hi[child]
            i = child
        else:
            break
    hd[i] = d
    hi[i] = idx


cdef Py_ssize_t _dijkstra(
    const i64[::1] indptr,
    const i64[::1] indices,
    const f64[::1] weights,
    i64 seed,
    Py_ssize_t size,
    f64* dist,
    cnp.uint8_t* settled,
    f64* heap_d,
    i64* heap_i,
    i64* touched,
    i64* out_nodes,
    f64* out_dists,
) nogil:
    """Core expansion; returns number settled. Buffers are caller-owned;
    dist must read +inf and settled 0 for every touched node on entry, and
    this function restores that before returning."""
    cdef Py_ssize_t heap_n = 0
    cdef Py_ssize_t n_touched = 0
    cdef Py_ssize_t n_out = 0
    cdef f64 d, nd
    cdef i64 u, v
    cdef Py_ssize_t e

    dist[seed] = 0.0
    touched[n_touched] = seed
    n_touched += 1
    _heap_push(heap_d, heap_i, &heap_n, 0.0, seed)

    while heap_n > 0 and n_out < size:
        _heap_pop(heap_d, heap_i, &heap_n, &d, &u)
        if settled[u]:
            continue
        settled[u] = 1
        out_nodes[n_out] = u
        out_dists[n_out] = d
        n_out += 1
        for e in range(indptr[u], indptr[u + 1]):
            v = indices[e]
            if settled[v]:
                continue
            nd = d + weights[e]
            if nd < dist[v]:
                if dist[v] == INFINITY:
                    touched[n_touched] = v
                    n_touched += 1
                dist[v] = nd
                _heap_push(heap_d, heap_i, &heap_n, nd, v)

    for e in range(n_touched):
        dist[touched[e]] = INFINITY
        settled[touched[e]] = 0
    return n_out


def geodesic_from(indptr, indices, weights, seed, size):
    cdef const i64[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const i64[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const f64[::1] wt = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = ip.shape[0] - 1
    cdef Py_ssize_t cap = ix.shape[0] + 1

    dist_arr = np.full(n, np.inf)
    settled_arr = np.zeros(n, dtype=np.uint8)
    heap_d_arr = np.empty(cap)
    heap_i_arr = np.empty(cap, dtype=np.int64)
    touched_arr = np.empty(n, dtype=np.int64)
    nodes_arr = np.empty(size, dtype=np.int64)
    dists_arr = np.empty(size)

    cdef f64[::1] dist = dist_arr
    cdef cnp.uint8_t[::1] settled = settled_arr
    cdef f64[::1] heap_d = heap_d_arr
    cdef i64[::1] heap_i = heap_i_arr
    cdef i64[::1] touched = touched_arr
    cdef i64[::1] nodes = nodes_arr
    cdef f64[::1] dists = dists_arr

    cdef Py_ssize_t m = _dijkstra(
        ip, ix, wt, seed, size,
        &dist[0], &settled[0], &heap_d[0], &heap_i[0], &touched[0],
        &nodes[0], &dists[0],
    )
    return nodes_arr[:m].copy(), dists_arr[:m].copy()


def geodesic_all(indptr, indices, weights, size):
    cdef const i64[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const i64[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const f64[::1] wt = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = ip.shape[0] - 1
    cdef Py_ssize_t cap = ix.shape[0] + 1
    cdef Py_ssize_t sz = size

    nodes_arr = np.full((n, sz), -1, dtype=np.int64)
    dists_arr = np.full((n, sz), np.inf)
    counts_arr = np.zeros(n, dtype=np.int64)
    dist_arr = np.full(n, np.inf)
    settled_arr = np.zeros(n, dtype=np.uint8)
    heap_d_arr = np.empty(cap)
    heap_i_arr = np.empty(cap, dtype=np.int64)
    touched_arr = np.empty(n, dtype=np.int64)

    cdef i64[:, ::1] nodes = nodes_arr
    cdef f64[:, ::1] dists = dists_arr
    cdef i64[::1] counts = counts_arr
    cdef f64[::1] dist = dist_arr
    cdef cnp.uint8_t[::1] settled = settled_arr
    cdef f64[::1] heap_d = heap_d_arr
    cdef i64[::1] heap_i = heap_i_arr
    cdef i64[::1] touched = touched_arr

    cdef Py_ssize_t s
    with nogil:
        for s in range(n):
            counts[s] = _dijkstra(
                ip, ix, wt, s, sz,
                &dist[0], &settled[0], &heap_d[0], &heap_i[0], &touched[0],
                &nodes[s, 0], &dists[s, 0],
            )
    return nodes_arr, dists_arr, counts_arr


def splat_forward(qx, qy, h, w, r):
    cdef const f64[::1] px = np.ascontiguousarray(qx, dtype=np.float64)
    cdef const f64[::1] py = np.ascontiguousarray(qy, dtype=np.float64)
    cdef Py_ssize_t hh = h, ww = w
    cdef f64 rr = r
    acc_arr = np.zeros((hh, ww))
    cdef f64[:, ::1] acc = acc_arr
    cdef f64 half = GAUSS_CUTOFF * rr
    cdef f64 inv = 1.0 / (2.0 * rr * rr)
    cdef Py_ssize_t i, iy, ix2, x0, x1, y0, y1
    cdef f64 dx, dy, g

    with nogil:
        for i in range(px.shape[0]):
            x0 = <Py_ssize_t>ceil(px[i] - half)
            x1 = <Py_ssize_t>floor(px[i] + half)
            y0 = <Py_ssize_t>ceil(py[i] - half)
            y1 = <Py_ssize_t>floor(py[i] + half)
            if x0 < 0: x0 = 0
            if y0 < 0: y0 = 0
            if x1 > ww - 1: x1 = ww - 1
            if y1 > hh - 1: y1 = hh - 1
            for iy in range(y0, y1 + 1):
                dy = iy - py[i]
                for ix2 in range(x0, x1 + 1):
                    dx = ix2 - px[i]
                    g = exp(-(dx * dx + dy * dy) * inv)
                    if g > 1.0 - GAUSS_CLAMP:
                        g = 1.0 - GAUSS_CLAMP
                    acc[iy, ix2] += log1p(-g)
    return 1.0 - np.exp(acc_arr)


def splat_backward(upstream, qx, qy, r):
    up_arr = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef const f64[:, ::1] up = up_arr
    cdef const f64[::1] px = np.ascontiguousarray(qx, dtype=np.float64)
    cdef const f64[::1] py = np.ascontiguousarray(qy, dtype=np.float64)
    cdef Py_ssize_t hh = up.shape[0], ww = up.shape[1]
    cdef Py_ssize_t m = px.shape[0]
    cdef f64 rr = r
    gx_arr = np.zeros(m)
    gy_arr = np.zeros(m)
    cdef f64[::1] gx = gx_arr
    cdef f64[::1] gy = gy_arr
    cdef f64 half = GAUSS_CUTOFF * rr
    cdef f64 inv = 1.0 / (2.0 * rr * rr)
    cdef f64 r2 = rr * rr
    cdef Py_ssize_t i, iy, ix2, x0, x1, y0, y1
    cdef f64 dx, dy, g, coupling, sx, sy

    with nogil:
        for i in range(m):
            x0 = <Py_ssize_t>ceil(px[i] - half)
            x1 = <Py_ssize_t>floor(px[i] + half)
            y0 = <Py_ssize_t>ceil(py[i] - half)
            y1 = <Py_ssize_t>floor(py[i] + half)
            if x0 < 0: x0 = 0
            if y0 < 0: y0 = 0
            if x1 > ww - 1: x1 = ww - 1
            if y1 > hh - 1: y1 = hh - 1
            sx = 0.0
            sy = 0.0
            for iy in range(y0, y1 + 1):
                dy = iy - py[i]
                for ix2 in range(x0, x1 + 1):
                    dx = ix2 - px[i]
                    g = exp(-(dx * dx + dy * dy) * inv)
                    if g > 1.0 - GAUSS_CLAMP:
                        g = 1.0 - GAUSS_CLAMP
                    coupling = up[iy, ix2] * (g / (1.0 - g))
                    sx += coupling * dx
                    sy += coupling * dy
            gx[i] = sx / r2
            gy[i] = sy / r2
    return gx_arr, gy_arr


def zbuffer_points(qx, qy, depth, h, w, radius):
    cdef const f64[::1] px = np.ascontiguousarray(qx, dtype=np.float64)
    cdef const f64[::1] py = np.ascontiguousarray(qy, dtype=np.float64)
    cdef const f64[::1] dp = np.ascontiguousarray(depth, dtype=np.float64)
    cdef Py_ssize_t hh = h, ww = w
    cdef f64 rad = radius
    owner_arr = np.full((hh, ww), -1, dtype=np.int64)
    zbuf_arr = np.full((hh, ww), np.inf)
    cdef i64[:, ::1] owner = owner_arr
    cdef f64[:, ::1] zbuf = zbuf_arr
    cdef f64 r2 = rad * rad
    cdef Py_ssize_t i, iy, ix2, x0, x1, y0, y1
    cdef f64 dx, dy

    with nogil:
        for i in range(px.shape[0]):
            x0 = <Py_ssize_t>ceil(px[i] - rad)
            x1 = <Py_ssize_t>floor(px[i] + rad)
            y0 = <Py_ssize_t>ceil(py[i] - rad)
            y1 = <Py_ssize_t>floor(py[i] + rad)
            if x0 < 0: x0 = 0
            if y0 < 0: y0 = 0
            if x1 > ww - 1: x1 = ww - 1
            if y1 > hh - 1: y1 = hh - 1
            for iy in range(y0, y1 + 1):
                dy = iy - py[i]
                for ix2 in range(x0, x1 + 1):
                    dx = ix2 - px[i]
                    if dx * dx + dy * dy <= r2:
                        if owner[iy, ix2] < 0 or dp[i] < zbuf[iy, ix2] - DEPTH_TIE_TOL:
                            owner[iy, ix2] = i
                            zbuf[iy, ix2] = dp[i]
    return owner_arr
