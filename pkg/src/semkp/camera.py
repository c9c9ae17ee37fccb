"""Viewpoints, pinhole projection, soft silhouettes, and pose search.

Conventions: world y is up, models live in the normalized frame (centroid
at the origin, max radius 1).  A viewpoint is (azimuth, elevation,
distance); the camera always looks at the origin.  Image axes follow the
usual raster layout: x right, y down, depth positive in front of the
camera, pixel centers at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import SchemaError

N_AZIMUTH_BINS = 24
N_ELEVATION_BINS = 12
TWO_PI = 2.0 * math.pi
DEFAULT_SPLAT_RADIUS = 2.0
# disk radius whose hard mask matches the 0.5 level set of one soft splat
MASK_RADIUS_FACTOR = math.sqrt(2.0 * math.log(2.0))
MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class Viewpoint:
    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        az = float(self.azimuth) % TWO_PI
        el = float(self.elevation)
        if math.isnan(az) or math.isnan(el):
            raise SchemaError("viewpoint angles must be finite")
        el = min(max(el, -0.5 * math.pi), 0.5 * math.pi)
        if not self.distance > 0:
            raise SchemaError("viewpoint distance must be positive")
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", el)
        object.__setattr__(self, "distance", float(self.distance))


@dataclass(frozen=True)
class ViewpointBin:
    """Cell of the 24 x 12 search grid (azimuth is circular)."""

    az_bin: int
    el_bin: int

    def __post_init__(self):
        if not 0 <= self.az_bin < N_AZIMUTH_BINS:
            raise SchemaError(f"azimuth bin {self.az_bin} out of range")
        if not 0 <= self.el_bin < N_ELEVATION_BINS:
            raise SchemaError(f"elevation bin {self.el_bin} out of range")

    @staticmethod
    def of(viewpoint: Viewpoint) -> "ViewpointBin":
        az_w = TWO_PI / N_AZIMUTH_BINS
        el_w = math.pi / N_ELEVATION_BINS
        az_bin = int(viewpoint.azimuth / az_w) % N_AZIMUTH_BINS
        el_bin = min(int((viewpoint.elevation + 0.5 * math.pi) / el_w), N_ELEVATION_BINS - 1)
        return ViewpointBin(az_bin, el_bin)

    def center(self, distance: float) -> Viewpoint:
        az = (self.az_bin + 0.5) * TWO_PI / N_AZIMUTH_BINS
        el = -0.5 * math.pi + (self.el_bin + 0.5) * math.pi / N_ELEVATION_BINS
        return Viewpoint(az, el, distance)


@dataclass(frozen=True)
class CameraRig:
    """Fixed pinhole intrinsics; only the viewpoint moves during search."""

    width: int = 128
    height: int = 128
    focal: float = 76.8
    cx: float = 64.0
    cy: float = 64.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SchemaError("image resolution must be positive")
        if not self.focal > 0:
            raise SchemaError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SchemaError("principal point must lie inside the image")


def camera_frame(viewpoint: Viewpoint):
    """Rotation R (rows are the camera axes) and translation T = -R C.

    Camera center C = distance * u with u = (cos el sin az, sin el,
    cos el cos az); the optical axis points at the origin and image y points
    world-down at zero elevation.  The closed forms stay orthonormal at the
    poles, where a look-at construction against world-up degenerates.
    """
    sa, ca = math.sin(viewpoint.azimuth), math.cos(viewpoint.azimuth)
    se, ce = math.sin(viewpoint.elevation), math.cos(viewpoint.elevation)
    x_c = np.array([ca, 0.0, -sa])
    y_c = np.array([se * sa, -ce, se * ca])
    z_c = np.array([-ce * sa, -se, -ce * ca])
    rot = np.stack([x_c, y_c, z_c])
    center = viewpoint.distance * np.array([ce * sa, se, ce * ca])
    return rot, -rot @ center


def project_points(points: np.ndarray, viewpoint: Viewpoint, rig: CameraRig):
    """Pinhole projection.

    Returns (pixels (n, 2), depths (n,), valid (n,) bool); pixels of
    non-valid points (at or behind the camera plane) are NaN.
    """
    pts = np.asarray(points, dtype=np.float64)
    rot, t = camera_frame(viewpoint)
    cam = pts @ rot.T + t
    depth = cam[:, 2]
    valid = depth > MIN_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        px = rig.focal * cam[:, 0] / depth + rig.cx
        py = rig.focal * cam[:, 1] / depth + rig.cy
    pixels = np.stack([px, py], axis=1)
    pixels[~valid] = np.nan
    return pixels, depth, valid


def render_soft_silhouette(
    points: np.ndarray,
    viewpoint: Viewpoint,
    rig: CameraRig,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
) -> np.ndarray:
    """Differentiable silhouette: union of Gaussian splats, values in [0, 1].

    Each splat stays strictly below 1, but dense coverage can saturate a
    pixel to exactly 1.0 at float precision.
    """
    pixels, _, valid = project_points(points, viewpoint, rig)
    q = pixels[valid]
    return _kernels.splat_forward(
        np.ascontiguousarray(q[:, 0]), np.ascontiguousarray(q[:, 1]),
        rig.height, rig.width, float(splat_radius),
    )


def silhouette_loss(
    target: np.ndarray,
    points: np.ndarray,
    viewpoint: Viewpoint,
    rig: CameraRig,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
):
    """SSD between the rendered silhouette and `target`, with the analytic
    gradient in (azimuth, elevation).

    Returns (loss, d_azimuth, d_elevation).
    """
    if target.shape != (rig.height, rig.width):
        raise SchemaError(
            f"target shape {target.shape} does not match rig {rig.height}x{rig.width}"
        )
    pts = np.asarray(points, dtype=np.float64)
    rot, t = camera_frame(viewpoint)
    cam = pts @ rot.T + t
    depth = cam[:, 2]
    valid = depth > MIN_DEPTH
    cam = cam[valid]
    z = cam[:, 2]
    qx = rig.focal * cam[:, 0] / z + rig.cx
    qy = rig.focal * cam[:, 1] / z + rig.cy

    rendered = _kernels.splat_forward(
        np.ascontiguousarray(qx), np.ascontiguousarray(qy),
        rig.height, rig.width, float(splat_radius),
    )
    diff = rendered - target
    loss = float(np.sum(diff * diff))
    upstream = 2.0 * diff * (1.0 - rendered)
    gx, gy = _kernels.splat_backward(
        upstream, np.ascontiguousarray(qx), np.ascontiguousarray(qy), float(splat_radius)
    )

    sa, ca = math.sin(viewpoint.azimuth), math.cos(viewpoint.azimuth)
    se, ce = math.sin(viewpoint.elevation), math.cos(viewpoint.elevation)
    u = np.array([ce * sa, se, ce * ca])
    du_daz = np.array([ce * ca, 0.0, -ce * sa])
    du_del = np.array([-se * sa, ce, -se * ca])
    drot_daz = np.stack([
        np.array([-sa, 0.0, -ca]),
        np.array([se * ca, 0.0, -se * sa]),
        -du_daz,
    ])
    drot_del = np.stack([
        np.zeros(3),
        u,
        -du_del,
    ])

    rel = pts[valid] - viewpoint.distance * u
    grads = []
    for drot, du in ((drot_daz, du_daz), (drot_del, du_del)):
        dcam = rel @ drot.T - (rot @ (viewpoint.distance * du))
        dz = dcam[:, 2]
        dqx = rig.focal * (dcam[:, 0] * z - cam[:, 0] * dz) / (z * z)
        dqy = rig.focal * (dcam[:, 1] * z - cam[:, 1] * dz) / (z * z)
        grads.append(float(np.sum(gx * dqx + gy * dqy)))
    return loss, grads[0], grads[1]


def render_bank(points: np.ndarray, rig: CameraRig, distance: float = 2.0,
                splat_radius: float = DEFAULT_SPLAT_RADIUS):
    """Silhouettes at all 288 bin centers, in elevation-major bin order."""
    bank = []
    for el_bin in range(N_ELEVATION_BINS):
        for az_bin in range(N_AZIMUTH_BINS):
            vp = ViewpointBin(az_bin, el_bin).center(distance)
            bank.append((vp, render_soft_silhouette(points, vp, rig, splat_radius)))
    return bank


def coarse_bin_search(
    target: np.ndarray,
    points: np.ndarray,
    rig: CameraRig,
    distance: float = 2.0,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
    bank=None,
):
    """Exhaustive SSD scan over the 24 x 12 viewpoint grid.

    Ties keep the lowest (elevation, azimuth) bin.  A precomputed
    `render_bank` for the same (points, rig, distance) can be supplied when
    searching many targets against one model.

    Returns (ViewpointBin, bin-center Viewpoint, loss).
    """
    if bank is None:
        bank = render_bank(points, rig, distance, splat_radius)
    best = None
    pos = 0
    for el_bin in range(N_ELEVATION_BINS):
        for az_bin in range(N_AZIMUTH_BINS):
            vp, rendered = bank[pos]
            pos += 1
            diff = rendered - target
            loss = float(np.sum(diff * diff))
            if best is None or loss < best[2]:
                best = (ViewpointBin(az_bin, el_bin), vp, loss)
    return best


def finetune_viewpoint(
    target: np.ndarray,
    points: np.ndarray,
    rig: CameraRig,
    init: Viewpoint,
    steps: int = 20,
    lr: float = 0.05,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
    full_output: bool = False,
):
    """Gradient descent on the silhouette SSD over (azimuth, elevation).

    Each of the `steps` iterations backtracks (halving the step) until the
    loss decreases; distance stays fixed.  Returns the best viewpoint seen,
    whose loss is never worse than the initial one.  With `full_output` the
    accepted-loss trace comes back too.
    """
    vp = init
    loss, gaz, gel = silhouette_loss(target, points, vp, rig, splat_radius)
    trace = [loss]
    for _ in range(steps):
        step = lr
        accepted = None
        for _ in range(16):
            cand = Viewpoint(vp.azimuth - step * gaz, vp.elevation - step * gel, vp.distance)
            closs, cgaz, cgel = silhouette_loss(target, points, cand, rig, splat_radius)
            if closs < loss:
                accepted = (cand, closs, cgaz, cgel)
                break
            step *= 0.5
        if accepted is None:
            break
        vp, loss, gaz, gel = accepted
        trace.append(loss)
    if full_output:
        return vp, loss, trace
    return vp


def transfer_embeddings(
    points: np.ndarray,
    embeddings: np.ndarray,
    viewpoint: Viewpoint,
    rig: CameraRig,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
):
    """Carry per-point embeddings into image space through a z-buffer.

    Each pixel inside the hard silhouette mask takes the embedding of the
    nearest (smallest-depth) point whose disk covers it.  Returns
    (embedding image (H, W, D), mask (H, W) bool).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    if emb.shape[0] != pts.shape[0]:
        raise SchemaError("points and embeddings must align")
    pixels, depth, valid = project_points(pts, viewpoint, rig)
    idx = np.flatnonzero(valid)
    q = pixels[idx]
    owner = _kernels.zbuffer_points(
        np.ascontiguousarray(q[:, 0]), np.ascontiguousarray(q[:, 1]),
        np.ascontiguousarray(depth[idx]),
        rig.height, rig.width, float(splat_radius) * MASK_RADIUS_FACTOR,
    )
    mask = owner >= 0
    image = np.zeros((rig.height, rig.width, emb.shape[1]))
    image[mask] = emb[idx[owner[mask]]]
    return image, mask
