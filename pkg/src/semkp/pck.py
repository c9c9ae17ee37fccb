"""PCK evaluation: correctness under image- or bbox-relative tolerance.

A prediction is correct when its Euclidean distance to the ground truth
is at most alpha * max(width, height) of the chosen normalization frame;
the boundary is inclusive.  Scores pool every visible keypoint across
all images.  Symmetry-aware scoring is opt-in: the distance becomes the
minimum over a projected orbit of the ground-truth point.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NoKeypoints, SchemaError

DEFAULT_ALPHA = 0.1
NORMS = ("img", "bbox")


@dataclass(frozen=True)
class PckConfig:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.alpha > 0:
            raise SchemaError("alpha must be positive")


@dataclass(frozen=True)
class KeypointPrediction:
    """One scored keypoint on one image.

    `orbit`, when non-empty, holds the projected symmetry orbit of the
    ground-truth point for this particular image; it takes precedence
    over any global orbit table during scoring.
    """

    semantic_index: int
    pred: tuple
    gt: tuple
    visible: bool = True
    orbit: tuple = ()

    def __post_init__(self):
        pred = tuple(float(v) for v in self.pred)
        gt = tuple(float(v) for v in self.gt)
        if len(pred) != 2 or len(gt) != 2:
            raise SchemaError("keypoints are 2D pixel positions")
        if not all(np.isfinite(v) for v in pred + gt):
            raise SchemaError("keypoint pixels must be finite")
        orbit = tuple(tuple(float(v) for v in row) for row in self.orbit)
        if any(len(row) != 2 or not all(np.isfinite(v) for v in row) for row in orbit):
            raise SchemaError("orbit members are finite 2D pixel positions")
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "gt", gt)
        object.__setattr__(self, "orbit", orbit)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: float
    height: float
    bbox_width: float
    bbox_height: float
    keypoints: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.image_id:
            raise SchemaError("image_id must be non-empty")
        for name in ("width", "height", "bbox_width", "bbox_height"):
            if not getattr(self, name) > 0:
                raise SchemaError(f"{name} must be positive")
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    def threshold(self, alpha: float, norm: str) -> float:
        if norm == "img":
            return alpha * max(self.width, self.height)
        if norm == "bbox":
            return alpha * max(self.bbox_width, self.bbox_height)
        raise SchemaError(f"unknown normalization {norm!r}")


def orbit_distance(pred, orbit: np.ndarray) -> float:
    """Minimum Euclidean distance from pred to any orbit member.

    The orbit is the ground-truth point's image under its declared
    symmetry group, projected to the image plane; infinite rotational
    orbits arrive as dense circle samples (360 points, one-degree steps,
    so a point on the circle is at most half a degree from a sample).
    """
    pts = np.asarray(orbit, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise SchemaError(f"orbit must be (n, 2) with n >= 1, got {pts.shape}")
    p = np.asarray(pred, dtype=np.float64)
    return float(np.sqrt(((pts - p) ** 2).sum(axis=1)).min())


def _distances(record: ImageRecord, orbits=None) -> np.ndarray:
    out = []
    for kp in record.keypoints:
        if not kp.visible:
            continue
        if kp.orbit:
            out.append(orbit_distance(kp.pred, np.asarray(kp.orbit)))
        elif orbits is not None and kp.semantic_index in orbits:
            out.append(orbit_distance(kp.pred, orbits[kp.semantic_index]))
        else:
            dx = kp.pred[0] - kp.gt[0]
            dy = kp.pred[1] - kp.gt[1]
            out.append(np.hypot(dx, dy))
    return np.asarray(out, dtype=np.float64)


def pck_score(records, cfg: PckConfig = PckConfig(), norm: str = "img",
              orbits=None) -> float:
    """Fraction of visible keypoints within tolerance, pooled over images.

    `orbits` optionally maps semantic index -> (n, 2) projected orbit for
    symmetry-aware distances; absent indices fall back to plain PCK.
    """
    if norm not in NORMS:
        raise SchemaError(f"norm must be one of {NORMS}")
    correct = 0
    total = 0
    for record in records:
        d = _distances(record, orbits)
        if d.size == 0:
            continue
        correct += int((d <= record.threshold(cfg.alpha, norm)).sum())
        total += d.size
    if total == 0:
        raise NoKeypoints("no visible keypoints to score")
    return correct / total


def pck_report(records, cfg: PckConfig = PckConfig(), orbits=None):
    """Per-image rows plus a pooled summary, both normalizations.

    Rows carry (image_id, n_kp, n_correct, pck_img, pck_bbox) where
    n_correct counts hits under image normalization.
    """
    records = list(records)
    rows = []
    pooled = {"img": 0, "bbox": 0}
    total = 0
    for record in records:
        d = _distances(record, orbits)
        n = int(d.size)
        hits = {
            norm: int((d <= record.threshold(cfg.alpha, norm)).sum())
            for norm in NORMS
        }
        rows.append(
            {
                "image_id": record.image_id,
                "n_kp": n,
                "n_correct": hits["img"],
                "pck_img": hits["img"] / n if n else 0.0,
                "pck_bbox": hits["bbox"] / n if n else 0.0,
            }
        )
        for norm in NORMS:
            pooled[norm] += hits[norm]
        total += n
    if total == 0:
        raise NoKeypoints("no visible keypoints to score")
    summary = {
        "alpha": cfg.alpha,
        "n_images": len(records),
        "n_keypoints": total,
        "pck_img": pooled["img"] / total,
        "pck_bbox": pooled["bbox"] / total,
    }
    return rows, summary


def write_pck_csv(rows, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["image_id", "n_kp", "n_correct", "pck_img", "pck_bbox"]
        )
        writer.writeheader()
        writer.writerows(rows)


def write_pck_summary(summary: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
