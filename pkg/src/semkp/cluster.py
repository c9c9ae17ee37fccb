"""DBSCAN with deterministic label order.

Standard semantics (sklearn conventions: the eps-ball is inclusive and
contains the query point itself) with one extra pin: cluster ids are
assigned in order of first core-point discovery by ascending point index,
and expansion queues are processed in ascending order, so labels are a
pure function of the input.
"""

from __future__ import annotations

from collections import deque

import numpy as np
from scipy.spatial import cKDTree

from .errors import SchemaError

UNVISITED = -2
NOISE = -1


def dbscan_labels(points: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Labels in {-1, 0, 1, ...}; -1 marks noise."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise SchemaError(f"expected 2d point array, got {pts.shape}")
    if not eps > 0:
        raise SchemaError("eps must be positive")
    if min_samples < 1:
        raise SchemaError("min_samples must be >= 1")

    n = pts.shape[0]
    labels = np.full(n, UNVISITED, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    neigh = [sorted(nb) for nb in tree.query_ball_point(pts, r=eps)]

    cluster = 0
    for i in range(n):
        if labels[i] != UNVISITED:
            continue
        if len(neigh[i]) < min_samples:
            labels[i] = NOISE
            continue
        labels[i] = cluster
        queue = deque(neigh[i])
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cluster  # border point reclaimed
            if labels[j] != UNVISITED:
                continue
            labels[j] = cluster
            if len(neigh[j]) >= min_samples:
                queue.extend(neigh[j])
        cluster += 1
    return labels
