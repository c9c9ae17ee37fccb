"""Core value types: clouds, annotations, keypoint sets, manifests, splits.

Instances are treated as immutable values after construction.  Numpy payloads
are defensively copied and write-locked so that downstream stages cannot
mutate shared state by accident.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCloud, DuplicateId, SchemaError

CLOUD_SIZE = 2048
MAX_KEYPOINTS_PER_ANNOTATOR = 24
DEFAULT_SPLIT_RATIOS = (7, 1, 2)
SPLIT_NAMES = ("train", "val", "test")


def _frozen_array(values, dtype, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise SchemaError(f"expected array of shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelCloud:
    """A single shape: exactly 2048 surface points plus identity metadata."""

    model_id: str
    category: str
    points: np.ndarray

    def __post_init__(self):
        if not self.model_id:
            raise SchemaError("model_id must be non-empty")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (CLOUD_SIZE, 3):
            raise SchemaError(
                f"cloud must have shape ({CLOUD_SIZE}, 3), got {pts.shape}"
            )
        if not np.all(np.isfinite(pts)):
            raise SchemaError("cloud contains non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def normalize_points(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Center an (n, 3) array at its centroid and scale max radius to 1.

    Returns (normalized points, centroid, scale).  The same affine transform
    ``p' = (p - centroid) / scale`` can then be applied to any companion
    geometry (annotation positions, symmetry parameters).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SchemaError(f"expected (n, 3) points, got {pts.shape}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.linalg.norm(centered, axis=1).max(initial=0.0))
    if scale <= 1e-12:
        raise DegenerateCloud("all points coincide; cloud has no extent")
    return centered / scale, centroid, scale


def normalize_cloud(cloud: ModelCloud) -> ModelCloud:
    """Return a copy of `cloud` with centroid 0 and max point norm 1."""
    pts, _, _ = normalize_points(cloud.points)
    return ModelCloud(cloud.model_id, cloud.category, pts)


@dataclass(frozen=True)
class RawAnnotationSet:
    """One annotator's click list for one model.

    Positions are 3D coordinates in the model's normalized frame; ordering
    is the annotator's private keypoint ordering.  At most 24 entries.
    """

    model_id: str
    annotator_id: str
    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.size == 0:
            pos = pos.reshape(0, 3)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise SchemaError(f"positions must be (k, 3), got {pos.shape}")
        if pos.shape[0] > MAX_KEYPOINTS_PER_ANNOTATOR:
            raise SchemaError(
                f"annotator {self.annotator_id!r} placed {pos.shape[0]} keypoints; "
                f"the limit is {MAX_KEYPOINTS_PER_ANNOTATOR}"
            )
        if not np.all(np.isfinite(pos)):
            raise SchemaError("annotation positions contain non-finite values")
        pos = pos.copy()
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]


SYMMETRY_KINDS = ("reflection-pair", "finite-rotational", "infinite-rotational")


@dataclass(frozen=True)
class SymmetryGroup:
    """A declared symmetry over a subset of semantic indices.

    "reflection-pair": `normal` and `offset` define the mirror plane
    ``normal . x = offset`` in normalized coordinates; `members` holds the
    semantic index pairs swapped by the mirror (a self-symmetric index may
    pair with itself).

    "finite-rotational": `axis` (unit vector) and `center` (a point on the
    axis) define the rotation, `order` >= 2 the cyclic order, and `members`
    the semantic indices the group permutes.

    "infinite-rotational": same axis parameters, continuous orbit
    (`order` is stored as 0).
    """

    kind: str
    members: tuple
    normal: tuple = ()
    offset: float = 0.0
    axis: tuple = ()
    center: tuple = ()
    order: int = 0

    def __post_init__(self):
        if self.kind not in SYMMETRY_KINDS:
            raise SchemaError(f"unknown symmetry kind {self.kind!r}")
        if self.kind == "reflection-pair":
            if len(self.normal) != 3:
                raise SchemaError("reflection-pair needs a 3-vector plane normal")
            members = tuple(tuple(int(i) for i in p) for p in self.members)
            for pair in members:
                if len(pair) != 2:
                    raise SchemaError("reflection-pair members must be index pairs")
        else:
            if len(self.axis) != 3 or len(self.center) != 3:
                raise SchemaError(f"{self.kind} needs axis and center")
            order = int(self.order)
            if self.kind == "finite-rotational" and order < 2:
                raise SchemaError("finite-rotational order must be >= 2")
            if self.kind == "infinite-rotational":
                order = 0
            object.__setattr__(self, "order", order)
            members = tuple(int(i) for i in self.members)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "normal", tuple(float(v) for v in self.normal))
        object.__setattr__(self, "axis", tuple(float(v) for v in self.axis))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "offset", float(self.offset))

    def member_indices(self) -> tuple:
        """Sorted semantic indices the group touches."""
        if self.kind == "reflection-pair":
            return tuple(sorted({i for pair in self.members for i in pair}))
        return tuple(sorted(set(self.members)))


def symmetry_orbit(position, group: SymmetryGroup, circle_samples: int = 360) -> np.ndarray:
    """Orbit of one 3D point under a declared symmetry group.

    Returns (n, 3) with the point itself first.  A reflection pair adds
    the mirrored point; a finite rotation its `order` copies; an infinite
    rotation a dense circle of `circle_samples` evenly spaced angles, so
    any true orbit point is at most half a step from a sample.
    """
    p = np.asarray(position, dtype=np.float64).reshape(3)
    if group.kind == "reflection-pair":
        n = np.asarray(group.normal, dtype=np.float64)
        nn = float(n @ n)
        if nn == 0.0:
            raise SchemaError("reflection normal must be non-zero")
        mirrored = p - 2.0 * (float(n @ p) - group.offset) / nn * n
        return np.stack([p, mirrored])
    axis = np.asarray(group.axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise SchemaError("rotation axis must be non-zero")
    axis = axis / norm
    steps = group.order if group.kind == "finite-rotational" else int(circle_samples)
    if steps < 1:
        raise SchemaError("circle_samples must be >= 1")
    theta = 2.0 * np.pi * np.arange(steps) / steps
    center = np.asarray(group.center, dtype=np.float64)
    v = p - center
    cross = np.cross(axis, v)
    along = float(axis @ v)
    orbit = (
        center
        + np.outer(np.cos(theta), v)
        + np.outer(np.sin(theta), cross)
        + np.outer((1.0 - np.cos(theta)) * along, axis)
    )
    orbit[0] = p  # exact, not cos(0)-rounded
    return orbit


@dataclass(frozen=True)
class AggregatedKeypointSet:
    """Consensus keypoints for one model.

    `vertex_indices[i]` is a vertex of the model cloud and `semantics[i]`
    its semantic index; semantic indices are shared across models in a
    dataset.  `fidelities` carries the aggregation score per keypoint
    (lower is better) and may be all-zero for ground truth sets.
    """

    model_id: str
    vertex_indices: np.ndarray
    semantics: np.ndarray
    fidelities: np.ndarray = None
    symmetries: tuple = ()

    def __post_init__(self):
        vi = _frozen_array(self.vertex_indices, np.int64)
        se = _frozen_array(self.semantics, np.int64)
        if vi.ndim != 1 or se.shape != vi.shape:
            raise SchemaError("vertex_indices and semantics must be equal-length 1d")
        fid = self.fidelities
        if fid is None:
            fid = np.zeros(vi.shape[0])
        fid = _frozen_array(fid, np.float64, vi.shape)
        if len(set(se.tolist())) != se.shape[0]:
            raise DuplicateId(f"model {self.model_id!r} repeats a semantic index")
        object.__setattr__(self, "vertex_indices", vi)
        object.__setattr__(self, "semantics", se)
        object.__setattr__(self, "fidelities", fid)
        object.__setattr__(self, "symmetries", tuple(self.symmetries))

    def __len__(self) -> int:
        return self.vertex_indices.shape[0]

    def positions(self, cloud: ModelCloud) -> np.ndarray:
        if cloud.model_id != self.model_id:
            raise SchemaError(
                f"keypoint set for {self.model_id!r} queried against {cloud.model_id!r}"
            )
        return cloud.points[self.vertex_indices]


@dataclass(frozen=True)
class ManifestEntry:
    model_id: str
    category: str
    split: str
    path: str

    def __post_init__(self):
        if self.split not in SPLIT_NAMES:
            raise SchemaError(f"unknown split tag {self.split!r}")
        if not self.path:
            raise SchemaError(f"entry {self.model_id!r} has an empty path")


@dataclass(frozen=True)
class DatasetManifest:
    """Index of a dataset: one entry per model plus the declared split ratios."""

    entries: tuple
    ratios: tuple = DEFAULT_SPLIT_RATIOS

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for e in entries:
            if e.model_id in seen:
                raise DuplicateId(f"duplicate model id {e.model_id!r} in manifest")
            seen.add(e.model_id)
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
            raise SchemaError(f"bad split ratios {self.ratios!r}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "ratios", ratios)
        self._check_ratios()

    def _check_ratios(self):
        """Split sizes per category must match the declared ratios within rounding."""
        total = sum(self.ratios)
        for category in self.categories():
            counts = self.counts(category)
            n = sum(counts.values())
            for split, ratio in zip(SPLIT_NAMES, self.ratios):
                expected = n * ratio / total
                if abs(counts[split] - expected) > 2.0:
                    raise SchemaError(
                        f"category {category!r}: {split} has {counts[split]} models, "
                        f"expected {expected:.1f} by the declared ratio"
                    )

    def categories(self) -> list[str]:
        return sorted({e.category for e in self.entries})

    def counts(self, category: str | None = None) -> dict[str, int]:
        counts = {name: 0 for name in SPLIT_NAMES}
        for e in self.entries:
            if category is None or e.category == category:
                counts[e.split] += 1
        return counts

    def ids_for(self, split: str, category: str | None = None) -> list[str]:
        if split not in SPLIT_NAMES:
            raise SchemaError(f"unknown split tag {split!r}")
        return [
            e.model_id
            for e in self.entries
            if e.split == split and (category is None or e.category == category)
        ]


def keypoint_statistics(counts) -> dict:
    """Summary of per-model keypoint counts: n, total, min, max, median.

    The median follows the usual midpoint convention for even n, so it
    can be fractional.
    """
    arr = np.asarray(list(counts), dtype=np.int64)
    if arr.size == 0:
        raise SchemaError("keypoint_statistics needs at least one count")
    if arr.min() < 0:
        raise SchemaError("keypoint counts cannot be negative")
    return {
        "n": int(arr.size),
        "total": int(arr.sum()),
        "min": int(arr.min()),
        "max": int(arr.max()),
        "median": float(np.median(arr)),
    }


def stage_seed(root_seed: int, stage: str) -> int:
    """Derive a per-stage RNG seed from a root seed.

    Hash-based so that adding a stage never shifts the streams of existing
    stages, which plain sequential spawning would.
    """
    digest = hashlib.sha256(f"{int(root_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_splits(
    model_ids,
    categories=None,
    ratios=DEFAULT_SPLIT_RATIOS,
    seed: int = 0,
) -> dict[str, str]:
    """Assign each model id to train/val/test.

    Models are partitioned per category with val and test taking
    ``floor(n * r / sum(r))`` models each and train the remainder, so train
    absorbs all rounding. The shuffle is seeded per category; passing the
    same ids in any order yields the same assignment.
    """
    ids = list(model_ids)
    if len(set(ids)) != len(ids):
        raise DuplicateId("model ids passed to make_splits must be unique")
    if categories is None:
        categories = {mid: "default" for mid in ids}
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise SchemaError(f"bad split ratios {ratios!r}")
    total = sum(ratios)

    by_cat: dict[str, list[str]] = {}
    for mid in ids:
        by_cat.setdefault(categories[mid], []).append(mid)

    assignment: dict[str, str] = {}
    for cat in sorted(by_cat):
        members = sorted(by_cat[cat])
        rng = np.random.default_rng(stage_seed(seed, f"split:{cat}"))
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        n = len(shuffled)
        n_val = int(n * ratios[1] / total)
        n_test = int(n * ratios[2] / total)
        for mid in shuffled[:n_val]:
            assignment[mid] = "val"
        for mid in shuffled[n_val:n_val + n_test]:
            assignment[mid] = "test"
        for mid in shuffled[n_val + n_test:]:
            assignment[mid] = "train"
    return assignment
