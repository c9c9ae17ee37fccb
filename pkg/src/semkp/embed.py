"""Pointwise embedding network with two training regimes.

The map is a shared per-point MLP over (xyz concatenated with a global
max-pooled hidden feature): 3 -> h1, pool, (3+h1) -> h2 -> 128.  The
128-wide final layer is the embedding; an optional softmax head on top
turns it into a classifier.  Differentiation is hand-rolled (the whole
model is a few dense matmuls), checked against finite differences.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateLabels, IoError, NoPositivePairs, SchemaError
from .storage import decode_floats, encode_floats

EMBED_DIM = 128


@dataclass(frozen=True)
class NetSpec:
    hidden1: int = 64
    hidden2: int = 128
    embed_dim: int = EMBED_DIM
    n_classes: int = 0

    def __post_init__(self):
        if min(self.hidden1, self.hidden2, self.embed_dim) < 1:
            raise SchemaError("layer widths must be positive")
        if self.n_classes < 0:
            raise SchemaError("n_classes must be >= 0")

    @property
    def n_params(self) -> int:
        h1, h2, d, k = self.hidden1, self.hidden2, self.embed_dim, self.n_classes
        return h1 * 3 + h1 + h2 * (3 + h1) + h2 + d * h2 + d + k * d + k


@dataclass(frozen=True)
class EmbeddingNet:
    spec: NetSpec
    params: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (self.spec.n_params,):
            raise SchemaError(
                f"parameter vector has {p.shape}, spec needs ({self.spec.n_params},)"
            )
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "params", p)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 0  # 0 = full batch
    seed: int = 0
    margin: float = 1.0
    sigma_aug: float = 0.01
    lambda_consistency: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise SchemaError("learning rate must be positive")
        if self.margin < 0:
            raise SchemaError("margin must be >= 0")
        if self.epochs < 0 or self.batch_size < 0:
            raise SchemaError("epochs and batch size must be >= 0")
        if self.sigma_aug < 0:
            raise SchemaError("sigma_aug must be >= 0")


def _split_params(params: np.ndarray, spec: NetSpec):
    h1, h2, d, k = spec.hidden1, spec.hidden2, spec.embed_dim, spec.n_classes
    sizes = [h1 * 3, h1, h2 * (3 + h1), h2, d * h2, d, k * d, k]
    shapes = [(h1, 3), (h1,), (h2, 3 + h1), (h2,), (d, h2), (d,), (k, d), (k,)]
    out = []
    pos = 0
    for size, shape in zip(sizes, shapes):
        out.append(params[pos:pos + size].reshape(shape))
        pos += size
    return out


def init_net(spec: NetSpec, seed: int = 0) -> EmbeddingNet:
    """Random initialization: weights ~ N(0, 1/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    h1, h2, d, k = spec.hidden1, spec.hidden2, spec.embed_dim, spec.n_classes
    chunks = [
        rng.normal(0.0, 1.0 / math.sqrt(3), h1 * 3),
        np.zeros(h1),
        rng.normal(0.0, 1.0 / math.sqrt(3 + h1), h2 * (3 + h1)),
        np.zeros(h2),
        rng.normal(0.0, 1.0 / math.sqrt(h2), d * h2),
        np.zeros(d),
    ]
    if k:
        chunks += [rng.normal(0.0, 1.0 / math.sqrt(d), k * d), np.zeros(k)]
    return EmbeddingNet(spec, np.concatenate(chunks))


def zero_net(spec: NetSpec) -> EmbeddingNet:
    return EmbeddingNet(spec, np.zeros(spec.n_params))


def _forward(params: np.ndarray, spec: NetSpec, points: np.ndarray, rows=None):
    """Embeddings at `rows` (all points when None), plus the backward cache."""
    w1, b1, w2, b2, w3, b3, _, _ = _split_params(params, spec)
    x = np.asarray(points, dtype=np.float64)
    h1 = np.tanh(x @ w1.T + b1)
    amax = np.argmax(h1, axis=0)
    g = h1[amax, np.arange(spec.hidden1)]
    if rows is None:
        rows = np.arange(x.shape[0])
    else:
        rows = np.asarray(rows, dtype=np.int64)
    xr = x[rows]
    z = np.concatenate([xr, np.broadcast_to(g, (xr.shape[0], spec.hidden1))], axis=1)
    h2 = np.tanh(z @ w2.T + b2)
    emb = h2 @ w3.T + b3
    cache = (x, rows, h1, amax, z, h2)
    return emb, cache


def _backward(params: np.ndarray, spec: NetSpec, cache, d_emb: np.ndarray) -> np.ndarray:
    """Parameter gradient given d(loss)/d(embedding rows)."""
    _, _, w2, _, w3, _, _, _ = _split_params(params, spec)
    x, rows, h1, amax, z, h2 = cache
    grad = np.zeros_like(params)
    gw1, gb1, gw2, gb2, gw3, gb3, _, _ = _split_params(grad, spec)

    gw3 += d_emb.T @ h2
    gb3 += d_emb.sum(axis=0)
    d_h2 = d_emb @ w3
    d_pre2 = d_h2 * (1.0 - h2 * h2)
    gw2 += d_pre2.T @ z
    gb2 += d_pre2.sum(axis=0)
    d_g = (d_pre2 @ w2[:, 3:]).sum(axis=0)

    # the pooled feature routes each channel's gradient to its argmax row
    d_pre1_rows = {}
    for j in range(spec.hidden1):
        r = int(amax[j])
        d_pre1_rows.setdefault(r, np.zeros(spec.hidden1))[j] += d_g[j]
    for r, vec in d_pre1_rows.items():
        d_pre1 = vec * (1.0 - h1[r] * h1[r])
        gw1 += np.outer(d_pre1, x[r])
        gb1 += d_pre1
    return grad


def forward_embeddings(net: EmbeddingNet, points: np.ndarray) -> np.ndarray:
    """Per-point 128-d embeddings; permutation-equivariant in the rows."""
    emb, _ = _forward(net.params, net.spec, points)
    return emb


def classification_loss(params: np.ndarray, spec: NetSpec, batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over labeled rows of several clouds.

    `batch` is a list of (points, rows, labels) triples.  Returns
    (loss, parameter gradient).
    """
    if spec.n_classes < 2:
        raise DegenerateLabels("classification needs a head with >= 2 classes")
    _, _, _, _, _, _, wh, bh = _split_params(params, spec)
    grad = np.zeros_like(params)
    total = 0.0
    count = sum(len(rows) for _, rows, _ in batch)
    if count == 0:
        raise DegenerateLabels("empty classification batch")

    for points, rows, labels in batch:
        labels = np.asarray(labels, dtype=np.int64)
        emb, cache = _forward(params, spec, points, rows)
        logits = emb @ wh.T + bh
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        total += -np.log(probs[np.arange(len(labels)), labels]).sum()

        d_logits = probs.copy()
        d_logits[np.arange(len(labels)), labels] -= 1.0
        d_logits /= count
        g = grad[-spec.n_classes * (spec.embed_dim + 1):]
        gwh = g[:spec.n_classes * spec.embed_dim].reshape(spec.n_classes, spec.embed_dim)
        gbh = g[spec.n_classes * spec.embed_dim:]
        gwh += d_logits.T @ emb
        gbh += d_logits.sum(axis=0)
        d_emb = d_logits @ wh
        grad += _backward(params, spec, cache, d_emb)
    return total / count, grad


def contrastive_loss(params: np.ndarray, spec: NetSpec, models, margin: float) -> tuple[float, np.ndarray]:
    """L = sum of positive squared distances - sum of min(d_neg, margin)^2.

    `models` is a list of (points, rows, semantics).  Positive pairs are
    same-semantic keypoints on different models; the negative term takes,
    per anchor keypoint, the hardest (closest) other keypoint on the same
    model, in plain L2 distance, clipped at the margin before squaring.
    The margin kink uses the one-sided derivative from below (d <= margin
    contributes gradient).
    """
    embs = []
    caches = []
    d_embs = []
    sems = []
    for points, rows, semantics in models:
        emb, cache = _forward(params, spec, points, rows)
        embs.append(emb)
        caches.append(cache)
        d_embs.append(np.zeros_like(emb))
        sems.append(np.asarray(semantics, dtype=np.int64))

    loss = 0.0
    n_pos = 0
    for a in range(len(embs)):
        for b in range(a + 1, len(embs)):
            shared, ia, ib = np.intersect1d(sems[a], sems[b], return_indices=True)
            if shared.size == 0:
                continue
            n_pos += shared.size
            diff = embs[a][ia] - embs[b][ib]
            loss += float(np.sum(diff * diff))
            d_embs[a][ia] += 2.0 * diff
            d_embs[b][ib] -= 2.0 * diff
    if n_pos == 0:
        raise NoPositivePairs("no semantic index is shared between any two models")

    for m in range(len(embs)):
        emb = embs[m]
        k = emb.shape[0]
        if k < 2:
            continue
        d2 = np.sum((emb[:, None, :] - emb[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        hardest = np.argmin(d2, axis=1)
        for a in range(k):
            h = int(hardest[a])
            d = math.sqrt(d2[a, h])
            if d <= margin:
                loss -= d2[a, h]
                d_embs[m][a] -= 2.0 * (emb[a] - emb[h])
                d_embs[m][h] += 2.0 * (emb[a] - emb[h])
            else:
                loss -= margin * margin

    grad = np.zeros_like(params)
    for cache, d_emb in zip(caches, d_embs):
        grad += _backward(params, spec, cache, d_emb)
    return loss, grad


def _adam_run(params0, loss_grad_fn, cfg: TrainConfig):
    """Full-batch adaptive-moment descent; returns (params, per-epoch losses)."""
    params = params0.copy()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    losses = []
    for epoch in range(cfg.epochs):
        loss, grad = loss_grad_fn(params, epoch)
        losses.append(float(loss))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        mhat = m / (1.0 - beta1 ** (epoch + 1))
        vhat = v / (1.0 - beta2 ** (epoch + 1))
        params -= cfg.lr * mhat / (np.sqrt(vhat) + eps)
    return params, losses


def train_gtheta(samples, n_classes: int, cfg: TrainConfig, spec: NetSpec | None = None):
    """Classification training of g_theta on bootstrap-labeled keypoints.

    `samples` is a list of (points, rows, labels) per model; labels are
    class ids in [0, n_classes).  Returns (net, per-epoch losses).
    """
    if n_classes < 2:
        raise DegenerateLabels(f"need >= 2 classes, got {n_classes}")
    counts = np.zeros(n_classes, dtype=np.int64)
    for _, rows, labels in samples:
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != len(rows):
            raise SchemaError("rows and labels must align")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise SchemaError("label out of range")
        np.add.at(counts, labels, 1)
    if np.count_nonzero(counts) < 2:
        raise DegenerateLabels("all samples share one class")
    if counts.min() < 2:
        raise DegenerateLabels("every class needs >= 2 samples")

    if spec is None:
        spec = NetSpec(n_classes=n_classes)
    elif spec.n_classes != n_classes:
        spec = replace(spec, n_classes=n_classes)
    net0 = init_net(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    def step(params, epoch):
        batch = samples
        if cfg.batch_size and cfg.batch_size < len(samples):
            pick = rng.choice(len(samples), size=cfg.batch_size, replace=False)
            batch = [samples[i] for i in sorted(pick)]
        return classification_loss(params, spec, batch)

    params, losses = _adam_run(net0.params, step, cfg)
    return EmbeddingNet(spec, params), losses


def classification_accuracy(net: EmbeddingNet, samples) -> float:
    """Fraction of labeled rows the head classifies correctly."""
    _, _, _, _, _, _, wh, bh = _split_params(net.params, net.spec)
    hit = 0
    count = 0
    for points, rows, labels in samples:
        emb, _ = _forward(net.params, net.spec, points, rows)
        pred = np.argmax(emb @ wh.T + bh, axis=1)
        hit += int(np.sum(pred == np.asarray(labels)))
        count += len(labels)
    return hit / count if count else 0.0


def train_contrastive(models, cfg: TrainConfig, spec: NetSpec | None = None):
    """Contrastive training of h on aggregated keypoints.

    `models` is a list of (points, rows, semantics).  Each epoch jitters
    every cloud with Gaussian noise sigma_aug (fresh draws, seeded) before
    the forward pass.  Returns (net, per-epoch losses).
    """
    if len(models) < 2:
        raise NoPositivePairs("contrastive training needs >= 2 models")
    all_sems = [set(np.asarray(s).tolist()) for _, _, s in models]
    if not any(a & b for i, a in enumerate(all_sems) for b in all_sems[i + 1:]):
        raise NoPositivePairs("no semantic index is shared between any two models")

    if spec is None:
        spec = NetSpec()
    net0 = init_net(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    def step(params, epoch):
        batch = models
        if cfg.batch_size and cfg.batch_size < len(models):
            pick = rng.choice(len(models), size=cfg.batch_size, replace=False)
            batch = [models[i] for i in sorted(pick)]
        jittered = [
            (points + rng.normal(0.0, cfg.sigma_aug, points.shape), rows, sems)
            if cfg.sigma_aug > 0 else (points, rows, sems)
            for points, rows, sems in batch
        ]
        return contrastive_loss(params, spec, jittered, cfg.margin)

    params, losses = _adam_run(net0.params, step, cfg)
    return EmbeddingNet(spec, params), losses


def gradient_check(loss_grad_fn, params: np.ndarray, step: float = 1e-5) -> float:
    """||analytic - central FD|| / max(||analytic||, ||FD||).

    The vector-norm form: per-coordinate ratios blow up on parameters
    whose true gradient is ~0, where the FD difference is pure roundoff.
    """
    _, analytic = loss_grad_fn(params)
    fd = np.zeros_like(analytic)
    for i in range(params.shape[0]):
        bumped = params.copy()
        bumped[i] += step
        up = loss_grad_fn(bumped)[0]
        bumped[i] -= 2.0 * step
        down = loss_grad_fn(bumped)[0]
        fd[i] = (up - down) / (2.0 * step)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(analytic - fd) / denom)


def corresponding_point(net: EmbeddingNet, src_points: np.ndarray, src_index: int,
                        dst_points: np.ndarray) -> int:
    """Index of the target point nearest in embedding space; ties -> lowest."""
    src_emb, _ = _forward(net.params, net.spec, src_points, [src_index])
    dst_emb = forward_embeddings(net, dst_points)
    d2 = np.sum((dst_emb - src_emb[0]) ** 2, axis=1)
    return int(np.argmin(d2))


def save_net(net: EmbeddingNet, path: str, extra: dict | None = None) -> None:
    obj = {
        "hidden1": net.spec.hidden1,
        "hidden2": net.spec.hidden2,
        "embed_dim": net.spec.embed_dim,
        "n_classes": net.spec.n_classes,
        "params": encode_floats(net.params),
    }
    if extra:
        obj["config"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def load_net(path: str) -> EmbeddingNet:
    if not os.path.exists(path):
        raise IoError(f"no such checkpoint: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        spec = NetSpec(
            hidden1=int(obj["hidden1"]), hidden2=int(obj["hidden2"]),
            embed_dim=int(obj["embed_dim"]), n_classes=int(obj["n_classes"]),
        )
        params = decode_floats(obj["params"], spec.n_params, path)
        return EmbeddingNet(spec, params)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IoError(f"{path}: malformed checkpoint ({exc})") from exc
