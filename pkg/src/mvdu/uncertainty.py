"""Per-view depth uncertainty from multi-view point density.

For each instance cluster, the member views' back-projected depth points are
fused into one world cloud and downsampled to a fixed size. Each view's own
points are then ball-queried against that cloud; high neighborhood density
means the views agree there (low uncertainty), sparse neighborhoods mean the
depths scatter (high uncertainty). Densities are normalized per instance by
the global maximum over all member views, and per-pixel uncertainty is one
minus the normalized density. Background clusters and unsegmented pixels get
uncertainty zero.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloudError
from .spatial import GridIndex

log = logging.getLogger(__name__)

DOWNSAMPLE_TARGET = 30_000
BALL_RADIUS_PAD = 0.01
OBB_TILT_DEG = 15.0
OBB_GRID = 20


@dataclass(frozen=True)
class FusedInstanceCloud:
    cluster_id: int
    points: np.ndarray       # (n, 3) world
    source_view: np.ndarray  # (n,) view id of each point

    def __post_init__(self):
        if self.points.shape[0] != self.source_view.shape[0]:
            raise ValueError("points and source_view must align")
        if self.points.size and not np.isfinite(self.points).all():
            raise ValueError("fused points must be finite")


class DownsampledCloud:
    """Fixed-size cloud with lazily built per-radius grid indexes."""

    def __init__(self, points):
        if points.shape[0] == 0:
            raise EmptyCloudError("downsampled cloud is empty")
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self._indexes = {}

    def __len__(self):
        return self.points.shape[0]

    def index_for(self, radius):
        key = float(radius)
        if key not in self._indexes:
            self._indexes[key] = GridIndex(self.points, key)
        return self._indexes[key]


@dataclass(frozen=True)
class ObbResult:
    """Oriented bounding box; columns of ``axes`` are the box directions."""

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray
    volume: float


@dataclass(frozen=True)
class UncertaintyMap:
    values: np.ndarray  # (h, w) float32 in [0, 1]
    valid: np.ndarray   # (h, w) bool, True where an instance point produced a value

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise ValueError("values and valid must have the same shape")
        v = self.values
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("uncertainty values must lie in [0, 1]")


def fuse_instance(cluster):
    """Union of all member views' back-projected points, with provenance."""
    pts = [m.cloud for m in cluster.members]
    views = [np.full(m.cloud.shape[0], m.view_id, dtype=np.int64)
             for m in cluster.members]
    points = np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))
    if points.shape[0] == 0:
        raise EmptyCloudError(
            f"cluster {cluster.cluster_id} has no valid depth points")
    return FusedInstanceCloud(cluster.cluster_id, points,
                              np.concatenate(views, axis=0))


def downsample(cloud, target=DOWNSAMPLE_TARGET, seed=0):
    """Uniform random subsample (without replacement) to at most ``target``.

    Decouples point count from the number of views; identity when the cloud
    is already small enough. Deterministic for a fixed seed.
    """
    points = cloud.points if isinstance(cloud, FusedInstanceCloud) else np.asarray(cloud)
    if points.shape[0] == 0:
        raise EmptyCloudError("cannot downsample an empty cloud")
    if points.shape[0] <= target:
        return DownsampledCloud(points)
    rng = np.random.default_rng(seed)
    sel = np.sort(rng.choice(points.shape[0], size=target, replace=False))
    return DownsampledCloud(points[sel])


def _euler(a, b, c):
    sa, ca = math.sin(a), math.cos(a)
    sb, cb = math.sin(b), math.cos(b)
    sc, cc = math.sin(c), math.cos(c)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cc, -sc], [0, sc, cc]])
    return rz @ ry @ rx


def oriented_bounding_box(points, tilt_deg=OBB_TILT_DEG, grid=OBB_GRID):
    """Approximate minimum-volume oriented bounding box.

    PCA-seeded: candidate orientations are the PCA axes perturbed by a dense
    Euler-angle grid within +/- tilt_deg (plus the PCA frame itself and the
    world axes), keeping the minimum-volume candidate. Always contains all
    input points.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must have shape (n, 3)")
    if points.shape[0] < 1:
        raise EmptyCloudError("oriented bounding box needs at least one point")
    mean = points.mean(axis=0)
    centered = points - mean
    cov = centered.T @ centered / points.shape[0]
    _, eigvecs = np.linalg.eigh(cov)
    if np.linalg.det(eigvecs) < 0:
        eigvecs = eigvecs * np.array([1.0, 1.0, -1.0])

    angles = np.linspace(-math.radians(tilt_deg), math.radians(tilt_deg), grid)
    candidates = [np.eye(3), eigvecs]
    for a in angles:
        for b in angles:
            for c in angles:
                candidates.append(eigvecs @ _euler(a, b, c))

    best = None
    chunk = max(1, int(4_000_000 / max(1, points.shape[0])))
    for lo in range(0, len(candidates), chunk):
        block = candidates[lo:lo + chunk]
        stacked = np.concatenate(block, axis=1)          # (3, 3 * nb)
        proj = centered @ stacked                        # (n, 3 * nb)
        mn = proj.min(axis=0).reshape(-1, 3)
        mx = proj.max(axis=0).reshape(-1, 3)
        vols = np.prod(mx - mn, axis=1)
        k = int(np.argmin(vols))
        if best is None or vols[k] < best[0]:
            best = (float(vols[k]), block[k], mn[k], mx[k])

    volume, axes, mn, mx = best
    half = (mx - mn) / 2.0
    center = mean + axes @ ((mn + mx) / 2.0)
    return ObbResult(center, axes, half, volume)


def ball_radius(cloud, mode="paper", obb=None):
    """Ball-query radius from the cloud's minimum oriented bounding box.

    mode 'paper': Vol + pad, the published rule taken literally (a volume
    plus a length; see README). mode 'cbrt': cbrt(Vol) + pad, the
    dimensionally consistent variant. A degenerate (zero-volume) box yields
    the bare pad in both modes.
    """
    if mode not in ("paper", "cbrt"):
        raise ValueError(f"radius mode must be 'paper' or 'cbrt', got {mode!r}")
    if obb is None:
        obb = oriented_bounding_box(cloud.points)
    vol = max(0.0, obb.volume)
    if mode == "cbrt":
        return vol ** (1.0 / 3.0) + BALL_RADIUS_PAD
    return vol + BALL_RADIUS_PAD


def point_density(query_points, cloud, radius):
    """Raw densities: cloud points within ``radius`` of each query point."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    queries = np.asarray(query_points, dtype=np.float64)
    if queries.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return cloud.index_for(radius).ball_counts(queries, radius)


def normalize_densities(per_view_densities, cluster_id=None):
    """Scale an instance's densities by the global max over its member views.

    Returns a map with values in [0, 1]. If every density is zero the
    instance is maximally uncertain: all normalized densities become 0 and a
    warning is logged.
    """
    dmax = 0.0
    for d in per_view_densities.values():
        if d.size:
            dmax = max(dmax, float(d.max()))
    if dmax <= 0:
        log.warning("cluster %s: all densities zero, forcing full uncertainty",
                    cluster_id)
        return {v: np.zeros_like(np.asarray(d), dtype=np.float64)
                for v, d in per_view_densities.items()}
    return {v: np.asarray(d, dtype=np.float64) / dmax
            for v, d in per_view_densities.items()}


def assemble_uncertainty(views, clusters, normalized, image_shape=None):
    """Per-view uncertainty maps from normalized instance densities.

    normalized: map cluster_id -> (map view_id -> densities aligned with the
    member's cloud_pixels). Background clusters and pixels outside any
    instance stay at zero.
    """
    maps = {}
    for view in views:
        shape = image_shape or (view.intrinsics.height, view.intrinsics.width)
        values = np.zeros(shape, dtype=np.float64)
        valid = np.zeros(shape, dtype=bool)
        maps[view.view_id] = (values, valid)

    for cluster in clusters:
        if cluster.is_background:
            continue
        per_view = normalized.get(cluster.cluster_id)
        if per_view is None:
            continue
        for member in cluster.members:
            dens = per_view.get(member.view_id)
            if dens is None:
                continue
            values, valid = maps[member.view_id]
            us = member.cloud_pixels[:, 0]
            vs = member.cloud_pixels[:, 1]
            values[vs, us] = 1.0 - dens
            valid[vs, us] = True

    return {vid: UncertaintyMap(np.clip(vals, 0.0, 1.0).astype(np.float32), ok)
            for vid, (vals, ok) in maps.items()}


def compute_uncertainty_maps(views, clusters, downsample_target=DOWNSAMPLE_TARGET,
                             radius_mode="paper", seed=0):
    """Full per-view uncertainty estimation over all non-background clusters.

    Returns (maps: view_id -> UncertaintyMap, info: cluster_id -> dict of
    diagnostics). Clusters whose members have no valid depth points are
    skipped with a warning.
    """
    normalized = {}
    info = {}
    for cluster in clusters:
        if cluster.is_background:
            continue
        try:
            fused = fuse_instance(cluster)
        except EmptyCloudError:
            log.warning("cluster %d has no points, skipped", cluster.cluster_id)
            continue
        ds = downsample(fused, target=downsample_target, seed=seed)
        obb = oriented_bounding_box(ds.points)
        radius = ball_radius(ds, mode=radius_mode, obb=obb)
        densities = {m.view_id: point_density(m.cloud, ds, radius).astype(np.float64)
                     for m in cluster.members}
        normalized[cluster.cluster_id] = normalize_densities(
            densities, cluster_id=cluster.cluster_id)
        info[cluster.cluster_id] = {
            "fused_points": fused.points.shape[0],
            "downsampled_points": len(ds),
            "obb_volume": obb.volume,
            "radius": radius,
        }
    return assemble_uncertainty(views, clusters, normalized), info
