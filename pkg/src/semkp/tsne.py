"""Plain t-SNE for projecting candidate embeddings to 2D.

Classic formulation: per-point Gaussian bandwidths solved by binary search
to hit the target perplexity, symmetrized affinities, Student-t low-d
kernel, gradient descent with momentum, gains, and an early exaggeration
phase.  Layout starts from the two principal components (sign-fixed, so
no randomness enters at all); duplicate input rows therefore receive
identical initial positions and identical gradients, and stay coincident
in the output.  Output is a pure function of (data, perplexity, seed).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .errors import PerplexityTooLarge, SchemaError

EXAGGERATION = 4.0
EXAGGERATION_ITERS = 100
MOMENTUM_SWITCH = 250
N_ITER = 1000
LEARNING_RATE = 200.0
MIN_GAIN = 0.01


def _conditional_probs(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 50):
    """Row-stochastic affinities whose entropy matches log(perplexity).

    The bandwidth search and the normalizer run on the sorted distance
    row, so two points with identical distance multisets (duplicates)
    get bitwise-identical bandwidths and affinities regardless of where
    their entries sit in the row.
    """
    n = d2.shape[0]
    p = np.zeros((n, n))
    target = np.log(perplexity)
    for i in range(n):
        mask = np.arange(n) != i
        row = np.sort(d2[i, mask])
        beta_lo, beta_hi = 0.0, np.inf
        beta = 1.0
        sw = 0.0
        for _ in range(max_steps):
            w = np.exp(-row * beta)
            sw = w.sum()
            if sw <= 0:
                entropy = 0.0
            else:
                probs = w / sw
                nz = probs > 0
                entropy = -np.sum(probs[nz] * np.log(probs[nz]))
            if abs(entropy - target) < tol:
                break
            if entropy > target:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else 0.5 * (beta + beta_hi)
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else 0.5 * (beta + beta_lo)
        if sw > 0:
            p[i, mask] = np.exp(-d2[i, mask] * beta) / sw
    return p


def _pca_init(x: np.ndarray) -> np.ndarray:
    """First two principal components, scaled to tiny spread.

    Signs are fixed by forcing the largest-magnitude loading of each
    component positive, so the layout is a pure function of the data.
    """
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((x.shape[0], 2))
    for k in range(min(2, vt.shape[0])):
        v = vt[k]
        pivot = np.argmax(np.abs(v))
        if v[pivot] < 0:
            v = -v
        # Row-wise reduction instead of a matvec: BLAS gemv may round tail
        # rows of a blocked matrix differently, which would let duplicate
        # rows land on different initial positions.
        comps[:, k] = (centered * v).sum(axis=1)
    scale = comps[:, 0].std()
    if scale > 0:
        comps *= 1e-4 / scale
    return comps


def tsne_2d(
    data: np.ndarray,
    perplexity: float = 30.0,
    seed: int = 0,
    n_iter: int = N_ITER,
    learning_rate: float = LEARNING_RATE,
) -> np.ndarray:
    """Project (N, D) data to (N, 2).  Requires N >= 3 * perplexity.

    `seed` is part of the stable interface but the layout is entirely
    data-determined; it is recorded by callers alongside the output.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise SchemaError(f"expected 2d data, got shape {x.shape}")
    n = x.shape[0]
    if not perplexity >= 1.0:
        raise SchemaError("perplexity must be >= 1")
    if n < 3 * perplexity:
        raise PerplexityTooLarge(
            f"{n} samples cannot support perplexity {perplexity} (need >= {3 * perplexity:.0f})"
        )

    # cdist evaluates each pair with a fixed summation order, so duplicate
    # input rows produce bitwise-identical distance rows (the matmul trick
    # does not guarantee that)
    d2 = cdist(x, x, "sqeuclidean")
    p = _conditional_probs(d2, perplexity)
    p = (p + p.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    y = _pca_init(x)
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)

    p_run = p * EXAGGERATION
    for it in range(n_iter):
        if it == EXAGGERATION_ITERS:
            p_run = p
        ydiff = y[:, None, :] - y[None, :, :]
        num = 1.0 / (1.0 + (ydiff * ydiff).sum(axis=2))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq_num = (p_run - q) * num
        # pairwise-difference form rather than the diag(rowsum) matmul
        # trick: duplicate rows then get bitwise-identical gradients (the
        # mutual term is an exact zero vector), so coincident points can
        # never drift apart through rounding noise
        grad = 4.0 * np.einsum("ij,ijk->ik", pq_num, ydiff)

        momentum = 0.5 if it < MOMENTUM_SWITCH else 0.8
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, MIN_GAIN, out=gains)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return y


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over non-noise points; needs >= 2 clusters.

    Independent of any clustering internals: plain pairwise distances.
    """
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    keep = labels >= 0
    pts, labels = pts[keep], labels[keep]
    ids = np.unique(labels)
    if ids.size < 2:
        raise SchemaError("silhouette needs >= 2 clusters")
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    scores = np.zeros(pts.shape[0])
    for i in range(pts.shape[0]):
        own = labels == labels[i]
        n_own = own.sum()
        a = d[i, own].sum() / (n_own - 1) if n_own > 1 else 0.0
        b = min(d[i, labels == c].mean() for c in ids if c != labels[i])
        scores[i] = 0.0 if n_own == 1 else (b - a) / max(a, b)
    return float(scores.mean())
