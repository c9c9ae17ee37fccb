"""The consensus engine: saliency, fidelity, NMS, clustering, verification.

Raw multi-annotator clicks become consensus semantic keypoints in one
alternating pass: bootstrap pseudo-labels from pooled annotations, train
the embedding classifier, score every cloud point with the
correspondence-transferred fidelity loss, propose local minima by
non-minimum suppression over geodesic neighborhoods, then align proposals
across models by clustering their embeddings (t-SNE + DBSCAN).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import graph as geo
from .cluster import dbscan_labels
from .core import (
    AggregatedKeypointSet,
    ModelCloud,
    RawAnnotationSet,
    SymmetryGroup,
    stage_seed,
)
from .embed import (
    EmbeddingNet,
    NetSpec,
    TrainConfig,
    classification_accuracy,
    forward_embeddings,
    train_gtheta,
)
from .errors import (
    ConfigError,
    EmptyConsensus,
    InsufficientModels,
    InvalidDecision,
    SchemaError,
)
from .tsne import silhouette_score, tsne_2d

DEFAULT_SIGMA = 0.03


def snap_to_vertices(points: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Nearest-vertex index for each position; ties go to the lower index."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if pos.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    d2 = np.sum((pos[:, None, :] - points[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)


@dataclass(frozen=True)
class SaliencyField:
    """Normalized Gaussian click-error weights around one annotation."""

    weights: np.ndarray
    sigma: float
    normalizer: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


def saliency_weights(points: np.ndarray, annotation, sigma: float = DEFAULT_SIGMA) -> SaliencyField:
    """Discrete saliency field: weight[i] propto exp(-|l - x_i|^2 / (2 sigma^2)).

    `annotation` is a vertex index or a 3D position (annotations are
    snapped to vertices at ingest, so both name a cloud vertex).
    """
    if not sigma > 0:
        raise SchemaError("sigma must be positive")
    pts = np.asarray(points, dtype=np.float64)
    if np.ndim(annotation) == 0:
        l_pos = pts[int(annotation)]
    else:
        l_pos = np.asarray(annotation, dtype=np.float64)
    d2 = np.sum((pts - l_pos) ** 2, axis=1)
    raw = np.exp(-d2 / (2.0 * sigma * sigma))
    z = float(raw.sum())
    return SaliencyField(raw / z, float(sigma), z)


def _saliency_rows(points: np.ndarray, vertex_idx: np.ndarray, sigma: float) -> np.ndarray:
    """Stacked normalized saliency rows, one per annotated vertex."""
    pos = points[vertex_idx]
    d2 = (
        np.sum(pos * pos, axis=1)[:, None]
        - 2.0 * pos @ points.T
        + np.sum(points * points, axis=1)[None, :]
    )
    w = np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma * sigma))
    return w / w.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class FidelityMap:
    """Per-point fidelity of one model; lower is better."""

    model_index: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0:
            raise SchemaError("fidelity values must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


class FidelityEngine:
    """Shared tables for computing fidelity maps across a model set.

    For candidate y on model m, fidelity sums over other models m' and
    their annotators c the saliency-weighted embedding distance between
    the correspondence of y on m' and the annotator's nearest keypoint:
    the per-annotator table G[c][k, j] = sum_x d(x, j) phi_hat_k(x) is
    precomputed once, so a map costs one cross-model argmin per pair plus
    gathers.
    """

    def __init__(self, embeddings, annotation_indices, points_list, sigma: float = DEFAULT_SIGMA):
        if len(embeddings) < 2:
            raise InsufficientModels("fidelity needs >= 2 models")
        if not (len(embeddings) == len(annotation_indices) == len(points_list)):
            raise SchemaError("embeddings, annotations, and points must align")
        self.embeddings = [np.asarray(e, dtype=np.float64) for e in embeddings]
        self.sq_norms = [np.sum(e * e, axis=1) for e in self.embeddings]
        self.sigma = float(sigma)
        self.tables = []
        for emb, sq, ann, pts in zip(self.embeddings, self.sq_norms, annotation_indices, points_list):
            d_emb = np.maximum(sq[:, None] - 2.0 * (emb @ emb.T) + sq[None, :], 0.0)
            per_annotator = []
            for idx in ann:
                idx = np.asarray(idx, dtype=np.int64)
                if idx.size == 0:
                    continue
                phi = _saliency_rows(pts, idx, self.sigma)
                g_table = phi @ d_emb
                kstar = np.argmin(d_emb[idx], axis=0)
                per_annotator.append((g_table, kstar))
            self.tables.append(per_annotator)

    @property
    def n_models(self) -> int:
        return len(self.embeddings)

    def map_for(self, m: int) -> np.ndarray:
        """Fidelity over every point of model m."""
        if not 0 <= m < self.n_models:
            raise SchemaError(f"model index {m} out of range")
        em = self.embeddings[m]
        out = np.zeros(em.shape[0])
        for other in range(self.n_models):
            if other == m:
                continue
            cross = self.sq_norms[other][:, None] - 2.0 * (self.embeddings[other] @ em.T)
            corr = np.argmin(cross, axis=0)
            for g_table, kstar in self.tables[other]:
                out += g_table[kstar[corr], corr]
        return out


def fidelity_map(m: int, clouds, annotation_sets, net: EmbeddingNet,
                 sigma: float = DEFAULT_SIGMA) -> FidelityMap:
    """One-shot fidelity map; `aggregate_run` uses the engine directly."""
    points_list = [c.points for c in clouds]
    embeddings = [forward_embeddings(net, pts) for pts in points_list]
    ann_idx = [
        [snap_to_vertices(pts, s.positions) for s in per_model]
        for pts, per_model in zip(points_list, annotation_sets)
    ]
    engine = FidelityEngine(embeddings, ann_idx, points_list, sigma)
    return FidelityMap(m, engine.map_for(m))


def nms_candidates(
    fvalues: np.ndarray,
    graph: geo.CloudGraph,
    bandwidth: float = geo.DEFAULT_BANDWIDTH,
    neighborhood_size: int = geo.DEFAULT_NEIGHBORHOOD,
    neighborhoods=None,
    presmoothed: bool = False,
):
    """Indices whose smoothed fidelity is minimal over their geodesic
    neighborhood; equal-value plateaus keep only the lowest index.

    Returns (candidate indices ascending, smoothed field).
    """
    vals = np.asarray(fvalues, dtype=np.float64)
    if vals.shape != (graph.n,):
        raise SchemaError("fidelity length does not match graph")
    if neighborhoods is None:
        neighborhoods = geo.all_geodesic_neighborhoods(graph, neighborhood_size)
    nodes, _, _ = neighborhoods
    smoothed = vals if presmoothed else geo.graph_gaussian_smooth(
        vals, graph, bandwidth, neighborhood_size, neighborhoods
    )

    gathered = np.where(nodes >= 0, smoothed[np.maximum(nodes, 0)], np.inf)
    rowmin = gathered.min(axis=1)
    # lowest index attaining the row minimum (sentinel n for non-attaining slots)
    attaining = np.where(gathered <= rowmin[:, None], np.where(nodes >= 0, nodes, graph.n), graph.n)
    winner = attaining.min(axis=1)
    candidates = np.flatnonzero(winner == np.arange(graph.n)).astype(np.int64)
    return candidates, smoothed


@dataclass(frozen=True)
class ClusterResult:
    """2D projection and density clustering of pooled candidates."""

    coords: np.ndarray
    labels: np.ndarray
    eps: float
    min_samples: int
    perplexity: float
    seed: int

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        l = np.asarray(self.labels, dtype=np.int64)
        if c.shape[0] != l.shape[0]:
            raise SchemaError("coords and labels must align")
        for arr in (c, l):
            arr.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "labels", l)


@dataclass(frozen=True)
class AggregateConfig:
    sigma: float = DEFAULT_SIGMA
    knn_k: int = geo.DEFAULT_KNN
    neighborhood_size: int = geo.DEFAULT_NEIGHBORHOOD
    bandwidth: float = geo.DEFAULT_BANDWIDTH
    bootstrap_eps: float = 0.08
    bootstrap_min_frac: float = 0.3
    perplexity: float = 30.0
    cluster_eps: float = 3.0
    cluster_min_frac: float = 0.25
    max_candidates: int = 64
    iterations: int = 1
    epochs: int = 80
    lr: float = 1e-3
    sigma_aug: float = 0.01
    hidden1: int = 64
    hidden2: int = 128
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma > 0 and self.bandwidth > 0 and self.bootstrap_eps > 0
                and self.cluster_eps > 0 and self.lr > 0):
            raise ConfigError("sigma, bandwidth, eps values, and lr must be positive")
        if not (0 < self.bootstrap_min_frac <= 1 and 0 < self.cluster_min_frac <= 1):
            raise ConfigError("min-sample fractions must be in (0, 1]")
        if self.knn_k < 1 or self.neighborhood_size < 1 or self.max_candidates < 1:
            raise ConfigError("knn_k, neighborhood_size, max_candidates must be >= 1")
        if self.iterations < 0 or self.epochs < 1:
            raise ConfigError("iterations must be >= 0 and epochs >= 1")
        if self.hidden1 < 1 or self.hidden2 < 1:
            raise ConfigError("hidden layer widths must be >= 1")
        if self.sigma_aug < 0:
            raise ConfigError("sigma_aug must be >= 0")
        if not self.perplexity >= 1:
            raise ConfigError("perplexity must be >= 1")


def _pooled_bootstrap(clouds, ann_idx, cfg: AggregateConfig):
    """Cluster pooled annotation positions into initial class labels.

    Returns (instances, labels) where instances are (model_pos, vertex)
    pairs in pooling order and labels align with them (-1 = noise).
    Clouds are canonically aligned, so same-meaning clicks from different
    models land close in normalized coordinates.
    """
    coords = []
    instances = []
    n_lists = 0
    for mi, (cloud, per_model) in enumerate(zip(clouds, ann_idx)):
        for idx in per_model:
            n_lists += 1
            for v in idx:
                coords.append(cloud.points[v])
                instances.append((mi, int(v)))
    if not coords:
        raise EmptyConsensus("no annotations to aggregate")
    mean_annotators = n_lists / len(clouds)
    min_samples = max(2, int(cfg.bootstrap_min_frac * mean_annotators * len(clouds)))
    labels = dbscan_labels(np.asarray(coords), cfg.bootstrap_eps, min_samples)
    return instances, labels, min_samples


def _train_samples(clouds, instances, labels):
    """Group labeled instances per model for the classifier."""
    per_model = {}
    for (mi, v), lab in zip(instances, labels):
        if lab < 0:
            continue
        per_model.setdefault(mi, []).append((v, int(lab)))
    samples = []
    for mi, cloud in enumerate(clouds):
        pairs = per_model.get(mi, [])
        rows = np.array([p[0] for p in pairs], dtype=np.int64)
        labs = np.array([p[1] for p in pairs], dtype=np.int64)
        samples.append((cloud.points, rows, labs))
    return samples


def _init_sets(clouds, instances, labels):
    """Initial Y: one raw-annotation representative per bootstrap class.

    Per (model, class) the instance nearest the class's pooled spatial
    centroid wins; ties go to the lower vertex index.
    """
    by_class = {}
    for (mi, v), lab in zip(instances, labels):
        if lab >= 0:
            by_class.setdefault(int(lab), []).append((mi, v))
    centroids = {
        lab: np.mean([clouds[mi].points[v] for mi, v in members], axis=0)
        for lab, members in by_class.items()
    }
    sets = {}
    for mi, cloud in enumerate(clouds):
        chosen = {}
        for lab, members in sorted(by_class.items()):
            best = None
            for mj, v in members:
                if mj != mi:
                    continue
                d = float(np.linalg.norm(cloud.points[v] - centroids[lab]))
                if best is None or (d, v) < best[:2]:
                    best = (d, v)
            if best is not None:
                chosen[lab] = best[1]
        sets[cloud.model_id] = AggregatedKeypointSet(
            cloud.model_id,
            np.array([chosen[lab] for lab in sorted(chosen)], dtype=np.int64),
            np.array(sorted(chosen), dtype=np.int64),
        )
    return sets


def aggregate_run(clouds, annotations, cfg: AggregateConfig = AggregateConfig()):
    """Full consensus pass; returns ({model_id: AggregatedKeypointSet}, diagnostics).

    `clouds` is a list of ModelCloud; `annotations` maps model_id to that
    model's RawAnnotationSet list.  Diagnostics include per-stage wall
    times under "timings" (callers that need reproducible artifacts strip
    that key; everything else is deterministic).
    """
    clouds = sorted(clouds, key=lambda c: c.model_id)
    if len(clouds) < 2:
        raise InsufficientModels("aggregation needs >= 2 models")
    if len({c.model_id for c in clouds}) != len(clouds):
        raise SchemaError("duplicate model ids")
    ann_sets = []
    for cloud in clouds:
        per_model = sorted(annotations.get(cloud.model_id, []), key=lambda s: s.annotator_id)
        ann_sets.append(per_model)
    if not any(ann_sets):
        raise SchemaError("no annotators present")

    timings = {}
    tick = time.perf_counter()
    ann_idx = [
        [snap_to_vertices(cloud.points, s.positions) for s in per_model]
        for cloud, per_model in zip(clouds, ann_sets)
    ]
    instances, boot_labels, boot_min_samples = _pooled_bootstrap(clouds, ann_idx, cfg)
    n_classes = int(boot_labels.max()) + 1
    if n_classes < 1:
        raise EmptyConsensus("bootstrap clustering found no classes")
    timings["bootstrap"] = time.perf_counter() - tick

    diagnostics = {
        "models": [c.model_id for c in clouds],
        "bootstrap": {
            "classes": n_classes,
            "noise": int(np.sum(boot_labels < 0)),
            "min_samples": boot_min_samples,
        },
        "iterations": cfg.iterations,
    }

    sets = _init_sets(clouds, instances, boot_labels)
    if cfg.iterations == 0:
        diagnostics["timings"] = timings
        return sets, diagnostics

    labels_per_model = _train_samples(clouds, instances, boot_labels)
    for iteration in range(cfg.iterations):
        tick = time.perf_counter()
        train_cfg = TrainConfig(
            lr=cfg.lr, epochs=cfg.epochs, sigma_aug=cfg.sigma_aug,
            seed=stage_seed(cfg.seed, f"gtheta:{iteration}"),
        )
        n_classes = max(int(labs.max(initial=-1)) for _, _, labs in labels_per_model) + 1
        spec = NetSpec(cfg.hidden1, cfg.hidden2, n_classes=n_classes)
        net, losses = train_gtheta(labels_per_model, n_classes, train_cfg, spec=spec)
        timings[f"train:{iteration}"] = time.perf_counter() - tick
        diagnostics[f"gtheta:{iteration}"] = {
            "losses": [round(v, 9) for v in losses],
            "accuracy": classification_accuracy(net, labels_per_model),
            "classes": n_classes,
        }

        tick = time.perf_counter()
        embeddings = [forward_embeddings(net, c.points) for c in clouds]
        engine = FidelityEngine(embeddings, ann_idx, [c.points for c in clouds], cfg.sigma)
        candidates = []
        cand_counts = {}
        for mi, cloud in enumerate(clouds):
            g = geo.build_knn_graph(cloud.points, cfg.knn_k)
            fmap = engine.map_for(mi)
            cand, smoothed = nms_candidates(
                fmap, g, cfg.bandwidth, cfg.neighborhood_size
            )
            if cand.shape[0] > cfg.max_candidates:
                order = np.lexsort((cand, smoothed[cand]))
                cand = np.sort(cand[order[:cfg.max_candidates]])
            cand_counts[cloud.model_id] = int(cand.shape[0])
            # raw fidelity, not the smoothed proposal field, ranks members
            # of a cluster later: the objective being minimized is f itself
            for v in cand:
                candidates.append((mi, int(v), float(fmap[v])))
        timings[f"fidelity:{iteration}"] = time.perf_counter() - tick

        if not candidates:
            raise EmptyConsensus("non-minimum suppression proposed no candidates")

        tick = time.perf_counter()
        pooled = np.stack([embeddings[mi][v] for mi, v, _ in candidates])
        perplexity = min(cfg.perplexity, len(candidates) // 4)
        if perplexity < 1:
            raise EmptyConsensus(f"{len(candidates)} candidates are too few to cluster")
        tsne_seed = stage_seed(cfg.seed, f"tsne:{iteration}")
        coords = tsne_2d(pooled, perplexity, seed=tsne_seed)
        min_samples = max(2, int(cfg.cluster_min_frac * len(clouds)))
        labels = dbscan_labels(coords, cfg.cluster_eps, min_samples)
        cluster = ClusterResult(coords, labels, cfg.cluster_eps, min_samples,
                                float(perplexity), tsne_seed)
        timings[f"cluster:{iteration}"] = time.perf_counter() - tick

        n_clusters = int(labels.max()) + 1
        if n_clusters < 1:
            raise EmptyConsensus("density clustering labeled every candidate noise")

        # per (model, cluster): keep the best-fidelity member
        chosen = {}
        for (mi, v, f), lab in zip(candidates, labels):
            if lab < 0:
                continue
            key = (mi, int(lab))
            if key not in chosen or (f, v) < chosen[key]:
                chosen[key] = (f, v)
        sets = {}
        present = {}
        for mi, cloud in enumerate(clouds):
            sems = sorted(lab for (mj, lab) in chosen if mj == mi)
            verts = [chosen[(mi, lab)][1] for lab in sems]
            fids = [chosen[(mi, lab)][0] for lab in sems]
            sets[cloud.model_id] = AggregatedKeypointSet(
                cloud.model_id,
                np.asarray(verts, dtype=np.int64),
                np.asarray(sems, dtype=np.int64),
                np.asarray(fids, dtype=np.float64),
            )
            for lab in sems:
                present.setdefault(lab, 0)
                present[lab] += 1

        sizes = {int(lab): int(np.sum(labels == lab)) for lab in range(n_clusters)}
        diag_cluster = {
            "n_candidates": len(candidates),
            "candidate_counts": cand_counts,
            "perplexity": float(perplexity),
            "clusters": n_clusters,
            "sizes": sizes,
            "noise": int(np.sum(labels < 0)),
            "singletons": sorted(lab for lab, cnt in present.items() if cnt < 2),
            # one record per candidate so review tools can draw the embedding
            # scatter without re-running the pipeline
            "candidates": [
                {
                    "model": clouds[mi].model_id,
                    "vertex": v,
                    "fidelity": round(f, 9),
                    "x": round(float(coords[ci, 0]), 6),
                    "y": round(float(coords[ci, 1]), 6),
                    "label": int(labels[ci]),
                }
                for ci, (mi, v, f) in enumerate(candidates)
            ],
        }
        if n_clusters >= 2:
            diag_cluster["silhouette"] = round(silhouette_score(coords, labels), 9)
        diagnostics[f"clustering:{iteration}"] = diag_cluster

        # feed the next alternation round, if any
        labels_per_model = [
            (clouds[mi].points,
             sets[clouds[mi].model_id].vertex_indices,
             sets[clouds[mi].model_id].semantics)
            for mi in range(len(clouds))
        ]

    diagnostics["timings"] = timings
    return sets, diagnostics


@dataclass(frozen=True)
class VerificationDecision:
    """Expert review outcome: per-cluster actions plus symmetry declarations.

    Actions map semantic index to "accept", "reject", or ("merge", target).
    Unmentioned clusters are accepted.  Merge targets must themselves be
    accepted clusters (one hop, no chains).
    """

    actions: dict
    symmetries: tuple = ()

    def __post_init__(self):
        actions = {}
        for key, act in dict(self.actions).items():
            key = int(key)
            if act in ("accept", "reject"):
                actions[key] = act
            elif isinstance(act, (tuple, list)) and len(act) == 2 and act[0] == "merge":
                actions[key] = ("merge", int(act[1]))
            else:
                raise InvalidDecision(f"unknown action {act!r} for cluster {key}")
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "symmetries", tuple(self.symmetries))


def apply_verification(sets: dict, decision: VerificationDecision) -> dict:
    """Apply expert decisions; returns new sets with dense semantic ids."""
    known = set()
    for s in sets.values():
        known.update(int(v) for v in s.semantics)
    for key, act in decision.actions.items():
        if key not in known:
            raise InvalidDecision(f"decision references unknown cluster {key}")
        if isinstance(act, tuple):
            target = act[1]
            if target not in known:
                raise InvalidDecision(f"merge target {target} does not exist")
            target_act = decision.actions.get(target, "accept")
            if target_act != "accept":
                raise InvalidDecision(
                    f"cluster {key} merges into {target}, which is not accepted"
                )
            if target == key:
                raise InvalidDecision(f"cluster {key} cannot merge into itself")

    def resolve(sem: int):
        act = decision.actions.get(sem, "accept")
        if act == "reject":
            return None
        if isinstance(act, tuple):
            return act[1]
        return sem

    survivors = sorted({resolve(s) for s in known} - {None})
    remap = {old: new for new, old in enumerate(survivors)}

    out = {}
    for model_id, s in sets.items():
        kept = {}
        for v, sem, f in zip(s.vertex_indices, s.semantics, s.fidelities):
            sem = resolve(int(sem))
            if sem is None:
                continue
            new = remap[sem]
            if new not in kept or (float(f), int(v)) < kept[new]:
                kept[new] = (float(f), int(v))
        sems = sorted(kept)
        syms = _remap_symmetries(decision.symmetries, resolve, remap)
        out[model_id] = AggregatedKeypointSet(
            model_id,
            np.array([kept[k][1] for k in sems], dtype=np.int64),
            np.array(sems, dtype=np.int64),
            np.array([kept[k][0] for k in sems], dtype=np.float64),
            syms,
        )
    return out


def _remap_symmetries(symmetries, resolve, remap):
    out = []
    for sym in symmetries:
        def lift(sem):
            r = resolve(int(sem))
            if r is None:
                raise InvalidDecision(
                    f"symmetry declaration references rejected cluster {sem}"
                )
            return remap[r]

        if sym.kind == "reflection-pair":
            members = tuple((lift(a), lift(b)) for a, b in sym.members)
        else:
            members = tuple(lift(s) for s in sym.members)
        out.append(SymmetryGroup(
            kind=sym.kind, members=members, normal=sym.normal, offset=sym.offset,
            axis=sym.axis, center=sym.center, order=sym.order,
        ))
    return tuple(out)
