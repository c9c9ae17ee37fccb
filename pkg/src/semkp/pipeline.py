"""Pipeline stages behind the command line.

Each stage is a pure function of its config and input directory: it
reads the previous stage's files, computes, and writes one artifact
directory.  The full config is written as config.json next to every
stage's outputs, so any result file sits beside the exact settings that
produced it.  All randomness flows from the single root seed through
stage_seed; runs with equal configs produce byte-identical artifacts.
The only exception is timings.json, which holds wall-clock measurements
and is therefore excluded from reproducibility comparisons.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .aggregate import AggregateConfig, aggregate_run
from .camera import (
    CameraRig,
    Viewpoint,
    coarse_bin_search,
    finetune_viewpoint,
    project_points,
    render_soft_silhouette,
    transfer_embeddings,
)
from .core import (
    DEFAULT_SPLIT_RATIOS,
    DatasetManifest,
    ManifestEntry,
    make_splits,
    stage_seed,
    symmetry_orbit,
)
from .embed import (
    NetSpec,
    TrainConfig,
    corresponding_point,
    forward_embeddings,
    load_net,
    save_net,
    train_contrastive,
)
from .errors import ConfigError, SchemaError
from .pck import ImageRecord, KeypointPrediction, PckConfig, pck_report, write_pck_csv, write_pck_summary
from .storage import (
    load_aggregated,
    load_annotations,
    load_cloud,
    load_manifest,
    save_aggregated,
    save_annotations,
    save_cloud,
    save_manifest,
)
from .synth import SHAPE_KINDS, SyntheticShapeSpec, default_profiles, generate_shape, simulate_annotations
from .viz import dump_raw, embedding_rgb, save_gray_png, save_rgb_png


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the five stages, in one flat record.

    The aggregation block mirrors AggregateConfig; its validation is
    delegated there so the two can never drift apart.
    """

    seed: int = 0

    # synthetic dataset
    kind: str = "table"
    n_models: int = 8
    n_annotators: int = 5
    noise_sigma: float = 0.03
    miss_rate: float = 0.05
    spurious_rate: float = 0.05
    split_ratios: tuple = DEFAULT_SPLIT_RATIOS

    # aggregation; defaults are tuned for the default dataset profile
    # above.  cluster_eps lives in t-SNE layout units, and those depend
    # on the candidate pool size: other dataset scales need other radii.
    sigma: float = 0.01
    knn_k: int = 12
    neighborhood_size: int = 55
    bandwidth: float = 0.08
    bootstrap_eps: float = 0.08
    bootstrap_min_frac: float = 0.3
    perplexity: float = 30.0
    cluster_eps: float = 0.8
    cluster_min_frac: float = 0.25
    max_candidates: int = 64
    iterations: int = 1
    gtheta_epochs: int = 150
    gtheta_lr: float = 1e-3
    sigma_aug: float = 0.01
    hidden1: int = 16
    hidden2: int = 32

    # contrastive embedding
    embed_dim: int = 128
    margin: float = 1.0
    lambda_consistency: float = 1.0
    contrastive_epochs: int = 200
    contrastive_lr: float = 1e-3

    # projection
    resolution: int = 128
    splat_radius: float = 2.0
    view_distance: float = 2.0
    finetune_steps: int = 20
    finetune_lr: float = 0.05

    # evaluation
    alpha: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "split_ratios",
                           tuple(float(r) for r in self.split_ratios))
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"kind must be one of {SHAPE_KINDS}, got {self.kind!r}")
        if self.n_models < 2:
            raise ConfigError("n_models must be >= 2 (aggregation is cross-model)")
        if self.n_annotators < 1:
            raise ConfigError("n_annotators must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        for name in ("miss_rate", "spurious_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios) \
                or sum(self.split_ratios) <= 0:
            raise ConfigError(f"split_ratios must be 3 non-negative numbers, got {self.split_ratios}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if not (self.margin > 0 and self.contrastive_lr > 0):
            raise ConfigError("margin and contrastive_lr must be positive")
        if self.lambda_consistency < 0:
            raise ConfigError("lambda_consistency must be >= 0")
        if self.contrastive_epochs < 1:
            raise ConfigError("contrastive_epochs must be >= 1")
        if self.resolution < 16:
            raise ConfigError("resolution must be >= 16")
        if not (self.splat_radius > 0 and self.view_distance > 0):
            raise ConfigError("splat_radius and view_distance must be positive")
        if self.finetune_steps < 0:
            raise ConfigError("finetune_steps must be >= 0")
        if not self.finetune_lr > 0:
            raise ConfigError("finetune_lr must be positive")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        self.aggregate_config()  # delegate the aggregation block

    def aggregate_config(self, seed: int | None = None) -> AggregateConfig:
        return AggregateConfig(
            sigma=self.sigma,
            knn_k=self.knn_k,
            neighborhood_size=self.neighborhood_size,
            bandwidth=self.bandwidth,
            bootstrap_eps=self.bootstrap_eps,
            bootstrap_min_frac=self.bootstrap_min_frac,
            perplexity=self.perplexity,
            cluster_eps=self.cluster_eps,
            cluster_min_frac=self.cluster_min_frac,
            max_candidates=self.max_candidates,
            iterations=self.iterations,
            epochs=self.gtheta_epochs,
            lr=self.gtheta_lr,
            sigma_aug=self.sigma_aug,
            hidden1=self.hidden1,
            hidden2=self.hidden2,
            seed=self.seed if seed is None else seed,
        )

    def camera_rig(self) -> CameraRig:
        res = int(self.resolution)
        return CameraRig(width=res, height=res, focal=1.2 * (res / 2),
                         cx=res / 2, cy=res / 2)

    def to_json(self) -> dict:
        obj = dataclasses.asdict(self)
        obj["split_ratios"] = list(self.split_ratios)
        return obj

    @classmethod
    def from_json(cls, obj) -> "PipelineConfig":
        """Build from a parsed JSON mapping, reporting every bad key.

        Unknown keys and out-of-range values are collected into one
        ConfigError whose message lists them line by line, so a caller
        can show a complete validation report instead of the first
        failure only.
        """
        if not isinstance(obj, dict):
            raise ConfigError(f"config must be a JSON object, got {type(obj).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        problems = [f"unknown config key {k!r}" for k in sorted(obj.keys() - known)]
        kwargs = {k: v for k, v in obj.items() if k in known}
        if not problems:
            try:
                return cls(**kwargs)
            except (ConfigError, SchemaError, TypeError, ValueError) as exc:
                problems.append(str(exc))
        raise ConfigError("\n".join(problems))


def _write_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True))
        fh.write("\n")


def _read_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_config(cfg: PipelineConfig, out_dir: str) -> None:
    _write_json(cfg.to_json(), os.path.join(out_dir, "config.json"))


def _load_dataset(data_dir: str):
    """(manifest, clouds sorted by model id)."""
    manifest = load_manifest(os.path.join(data_dir, "manifest.json"))
    entries = sorted(manifest.entries, key=lambda e: e.model_id)
    clouds = [load_cloud(os.path.join(data_dir, e.path)) for e in entries]
    return manifest, clouds


def run_synth(cfg: PipelineConfig, out_dir: str) -> DatasetManifest:
    """Generate shapes, ground truth, and simulated annotator clicks.

    Writes manifest.json plus clouds/, annotations/, and truth/ trees.
    Model ids are {kind}-{seed:04d} with per-model seeds seed*1000 + i,
    readable and collision-free for any sane model count.
    """
    for sub in ("clouds", "annotations", "truth"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    profiles = default_profiles(
        cfg.n_annotators, cfg.noise_sigma, cfg.miss_rate, cfg.spurious_rate,
        seed=stage_seed(cfg.seed, "profiles"),
    )
    ann_seed = stage_seed(cfg.seed, "annotate")
    ids = []
    for i in range(cfg.n_models):
        shape = SyntheticShapeSpec(cfg.kind, seed=cfg.seed * 1000 + i)
        cloud, truth = generate_shape(shape)
        ids.append(cloud.model_id)
        sets = simulate_annotations(cloud, truth, profiles, seed=ann_seed)
        save_cloud(cloud, os.path.join(out_dir, "clouds", f"{cloud.model_id}.json"))
        save_annotations(sets, os.path.join(out_dir, "annotations", f"{cloud.model_id}.json"))
        save_aggregated(truth, os.path.join(out_dir, "truth", f"{cloud.model_id}.json"))
    splits = make_splits(ids, categories={mid: cfg.kind for mid in ids},
                         ratios=cfg.split_ratios, seed=stage_seed(cfg.seed, "splits"))
    manifest = DatasetManifest(
        tuple(ManifestEntry(mid, cfg.kind, splits[mid], f"clouds/{mid}.json")
              for mid in ids),
        cfg.split_ratios,
    )
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    _write_config(cfg, out_dir)
    return manifest


def run_aggregate(cfg: PipelineConfig, data_dir: str, out_dir: str) -> dict:
    """Aggregate raw annotations into consensus keypoint sets.

    Writes aggregated/{id}.json per model, diagnostics.json, and the
    wall-clock timings.json sidecar.  Returns the diagnostics mapping.
    """
    os.makedirs(os.path.join(out_dir, "aggregated"), exist_ok=True)
    _, clouds = _load_dataset(data_dir)
    annotations = {
        c.model_id: load_annotations(
            os.path.join(data_dir, "annotations", f"{c.model_id}.json"))
        for c in clouds
    }
    acfg = cfg.aggregate_config(stage_seed(cfg.seed, "aggregate"))
    sets, diagnostics = aggregate_run(clouds, annotations, acfg)
    for model_id in sorted(sets):
        save_aggregated(sets[model_id],
                        os.path.join(out_dir, "aggregated", f"{model_id}.json"))
    timings = diagnostics.pop("timings", {})
    _write_json(diagnostics, os.path.join(out_dir, "diagnostics.json"))
    _write_json(timings, os.path.join(out_dir, "timings.json"))
    _write_config(cfg, out_dir)
    return diagnostics


def _load_aggregated_sets(agg_dir: str, model_ids):
    return {
        mid: load_aggregated(os.path.join(agg_dir, "aggregated", f"{mid}.json"))
        for mid in model_ids
    }


def run_train_embed(cfg: PipelineConfig, data_dir: str, agg_dir: str, out_dir: str) -> str:
    """Train the dense contrastive embedding on aggregated keypoints.

    Writes net.json and losses.json; returns the checkpoint path.
    """
    os.makedirs(out_dir, exist_ok=True)
    _, clouds = _load_dataset(data_dir)
    sets = _load_aggregated_sets(agg_dir, [c.model_id for c in clouds])
    models = [
        (c.points, sets[c.model_id].vertex_indices, sets[c.model_id].semantics)
        for c in clouds
    ]
    n_classes = max(
        (int(sem.max()) for _, _, sem in models if sem.size), default=-1) + 1
    if n_classes < 1:
        raise SchemaError("aggregated sets carry no keypoints to train on")
    tcfg = TrainConfig(
        lr=cfg.contrastive_lr, epochs=cfg.contrastive_epochs,
        seed=stage_seed(cfg.seed, "train-embed"), margin=cfg.margin,
        sigma_aug=cfg.sigma_aug, lambda_consistency=cfg.lambda_consistency,
    )
    spec = NetSpec(cfg.hidden1, cfg.hidden2, embed_dim=cfg.embed_dim,
                   n_classes=n_classes)
    net, losses = train_contrastive(models, tcfg, spec)
    net_path = os.path.join(out_dir, "net.json")
    save_net(net, net_path, extra=cfg.to_json())
    _write_json({"losses": [round(v, 9) for v in losses]},
                os.path.join(out_dir, "losses.json"))
    _write_config(cfg, out_dir)
    return net_path


def _orbit_for(semantic: int, position: np.ndarray, symmetries, viewpoint, rig):
    """Projected pixel orbit of one keypoint, () when asymmetric."""
    for group in symmetries:
        if semantic in group.member_indices():
            pts = symmetry_orbit(position, group)
            px, _, valid = project_points(pts, viewpoint, rig)
            return tuple((float(x), float(y)) for x, y in px[valid])
    return ()


def run_project(cfg: PipelineConfig, data_dir: str, agg_dir: str,
                net_path: str, out_dir: str) -> dict:
    """Render, estimate viewpoints, and transfer keypoints to images.

    Per model: a hidden target viewpoint is drawn from the stage seed,
    its soft silhouette rendered, and the viewpoint re-estimated by
    coarse grid search plus gradient refinement.  Ground-truth pixels
    are the model's own consensus keypoints projected at the *true*
    viewpoint; predictions project keypoints carried over from the next
    model in id order (embedding nearest neighbour) at the *estimated*
    viewpoint, so the score reflects both transfer and pose error.

    Writes silhouettes/{id}.png, embeddings/{id}.png (+ raw f8 dump of
    the RGB preview), and projections.json with per-image keypoint
    records; returns the projections mapping.
    """
    for sub in ("silhouettes", "embeddings"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    _, clouds = _load_dataset(data_dir)
    ids = [c.model_id for c in clouds]
    sets = _load_aggregated_sets(agg_dir, ids)
    net = load_net(net_path)
    rig = cfg.camera_rig()

    images = []
    for mi, cloud in enumerate(clouds):
        model_id = cloud.model_id
        rng = np.random.default_rng(stage_seed(cfg.seed, f"view:{model_id}"))
        true_vp = Viewpoint(
            azimuth=rng.uniform(0.0, 2.0 * np.pi),
            elevation=rng.uniform(-np.pi / 3.0, np.pi / 3.0),
            distance=cfg.view_distance,
        )
        target = render_soft_silhouette(cloud.points, true_vp, rig, cfg.splat_radius)
        coarse, start, coarse_loss = coarse_bin_search(
            target, cloud.points, rig, cfg.view_distance, cfg.splat_radius)
        est_vp, final_loss, _ = finetune_viewpoint(
            target, cloud.points, rig, start, steps=cfg.finetune_steps,
            lr=cfg.finetune_lr, splat_radius=cfg.splat_radius, full_output=True)

        emb = forward_embeddings(net, cloud.points)
        emb_img, mask = transfer_embeddings(cloud.points, emb, est_vp, rig,
                                            cfg.splat_radius)
        save_gray_png(target, os.path.join(out_dir, "silhouettes", f"{model_id}.png"))
        rgb = embedding_rgb(emb_img, mask)
        save_rgb_png(rgb, os.path.join(out_dir, "embeddings", f"{model_id}.png"))
        dump_raw(rgb, os.path.join(out_dir, "embeddings", f"{model_id}.f8"))

        # object extent in the target image, for bbox-normalized PCK
        hard = target >= 0.5
        if hard.any():
            rows = np.flatnonzero(hard.any(axis=1))
            cols = np.flatnonzero(hard.any(axis=0))
            bbox = [int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)]
        else:
            bbox = [rig.width, rig.height]

        own = sets[model_id]
        donor_id = ids[(mi + 1) % len(ids)]
        donor = sets[donor_id]
        donor_cloud = clouds[(mi + 1) % len(ids)]
        donor_vertex = dict(zip(donor.semantics.tolist(), donor.vertex_indices.tolist()))

        gt_px, _, gt_valid = project_points(
            cloud.points[own.vertex_indices], true_vp, rig)
        keypoints = []
        for k, semantic in enumerate(own.semantics.tolist()):
            if semantic not in donor_vertex:
                continue
            pred_vertex = corresponding_point(
                net, donor_cloud.points, donor_vertex[semantic], cloud.points)
            pred_px, _, pred_valid = project_points(
                cloud.points[pred_vertex][None, :], est_vp, rig)
            visible = bool(gt_valid[k]) and bool(pred_valid[0])
            gt = [float(gt_px[k, 0]), float(gt_px[k, 1])] if gt_valid[k] else [0.0, 0.0]
            pred = [float(pred_px[0, 0]), float(pred_px[0, 1])] if pred_valid[0] else [0.0, 0.0]
            orbit = ()
            if visible:
                orbit = _orbit_for(semantic, cloud.points[own.vertex_indices[k]],
                                   own.symmetries, true_vp, rig)
            keypoints.append({
                "semantic": int(semantic),
                "gt": gt,
                "pred": pred,
                "visible": visible,
                "orbit": [list(p) for p in orbit],
            })

        images.append({
            "model_id": model_id,
            "width": rig.width,
            "height": rig.height,
            "bbox": bbox,
            "true": {"azimuth": true_vp.azimuth, "elevation": true_vp.elevation,
                     "distance": true_vp.distance},
            "coarse": {"az_bin": coarse.az_bin, "el_bin": coarse.el_bin,
                       "loss": coarse_loss},
            "estimated": {"azimuth": est_vp.azimuth, "elevation": est_vp.elevation,
                          "loss": final_loss},
            "keypoints": keypoints,
        })

    projections = {"images": images}
    _write_json(projections, os.path.join(out_dir, "projections.json"))
    _write_config(cfg, out_dir)
    return projections


def run_evaluate(cfg: PipelineConfig, proj_dir: str, out_dir: str,
                 use_symmetry: bool = False) -> dict:
    """Score projected keypoints; writes pck.csv and summary.json.

    Symmetry-aware distances are opt-in: with `use_symmetry` the orbit
    recorded for each keypoint (if any) replaces the plain ground-truth
    distance by the orbit minimum.
    """
    os.makedirs(out_dir, exist_ok=True)
    projections = _read_json(os.path.join(proj_dir, "projections.json"))
    records = []
    for img in projections["images"]:
        keypoints = tuple(
            KeypointPrediction(
                kp["semantic"], tuple(kp["pred"]), tuple(kp["gt"]),
                visible=kp["visible"],
                orbit=tuple(tuple(p) for p in kp.get("orbit", ())) if use_symmetry else (),
            )
            for kp in img["keypoints"]
        )
        records.append(ImageRecord(
            img["model_id"], img["width"], img["height"],
            img["bbox"][0], img["bbox"][1], keypoints,
        ))
    rows, summary = pck_report(records, PckConfig(cfg.alpha))
    write_pck_csv(rows, os.path.join(out_dir, "pck.csv"))
    write_pck_summary(summary, os.path.join(out_dir, "summary.json"))
    _write_config(cfg, out_dir)
    return summary
