"""Cross-view instance association via a Chamfer-distance graph.

Per-view 2D mask regions are back-projected (with aligned depths) into world
clouds; regions from different views whose clouds sit within a Chamfer
threshold are connected, and connected components of that graph become
scene-level instance clusters.
"""

from dataclasses import dataclass

import numpy as np

from . import camera
from .errors import EmptyCloudError
from .spatial import GridIndex, default_cell_size

DEFAULT_CHAMFER_THRESHOLD = 0.05
GRAPH_SUBSAMPLE = 2048


@dataclass(frozen=True)
class ViewInstance:
    """One mask region in one view, with its back-projected world points."""

    view_id: int
    mask_label: int
    pixels: np.ndarray        # (np, 2) int64, all mask pixels as (u, v)
    cloud: np.ndarray         # (nc, 3) world points of valid masked depths
    cloud_pixels: np.ndarray  # (nc, 2) int64, pixel of each cloud point

    def __post_init__(self):
        if self.pixels.shape[0] == 0:
            raise ValueError("instance mask region is empty")
        if self.cloud.shape[0] != self.cloud_pixels.shape[0]:
            raise ValueError("cloud and cloud_pixels must align")

    @property
    def key(self):
        return (self.view_id, self.mask_label)


@dataclass(frozen=True)
class InstanceCluster:
    cluster_id: int
    members: tuple
    is_background: bool = False

    def member_in_view(self, view_id):
        for m in self.members:
            if m.view_id == view_id:
                return m
        return None


def extract_view_instances(views, aligned_depths):
    """Split each view's mask into ViewInstances (label 0 = unsegmented).

    aligned_depths: map view_id -> DepthMap to back-project (typically the
    scale-shift aligned monocular depths).
    """
    instances = []
    for view in views:
        if view.mask is None:
            raise ValueError(f"view {view.view_id} has no instance mask")
        depth = aligned_depths[view.view_id]
        for label in np.unique(view.mask):
            if label == 0:
                continue
            region = view.mask == label
            vs, us = np.nonzero(region)
            pixels = np.stack([us, vs], axis=1).astype(np.int64)
            cloud, cloud_px = camera.back_project_depth_map(
                view, depth=depth, select=region)
            instances.append(ViewInstance(int(view.view_id), int(label),
                                          pixels, cloud, cloud_px))
    return instances


def chamfer_distance(a, b):
    """Symmetric Chamfer distance (meters) between two nonempty point sets.

    0.5 * (mean_a NN(a->b) + mean_b NN(b->a)), nearest neighbors via the
    uniform grid index.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyCloudError("chamfer distance requires nonempty sets")
    d_ab = GridIndex(b, default_cell_size(b)).nn_dist(a)
    d_ba = GridIndex(a, default_cell_size(a)).nn_dist(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def _graph_cloud(inst, max_points, seed):
    """Per-instance subsample for graph construction; seeded by the instance
    key so results do not depend on list order."""
    cloud = inst.cloud
    if cloud.shape[0] <= max_points:
        return cloud
    rng = np.random.default_rng(
        np.random.SeedSequence([abs(int(seed)), inst.view_id, inst.mask_label]))
    sel = np.sort(rng.choice(cloud.shape[0], size=max_points, replace=False))
    return cloud[sel]


def build_instance_graph(instances, threshold=DEFAULT_CHAMFER_THRESHOLD,
                         max_points=GRAPH_SUBSAMPLE, seed=0):
    """Edges (i, j) between instances of different views with Chamfer < threshold.

    Clouds larger than ``max_points`` are subsampled (seeded) before the
    Chamfer test; instances with empty clouds stay isolated.
    """
    clouds = [_graph_cloud(inst, max_points, seed) for inst in instances]
    edges = []
    for i in range(len(instances)):
        if clouds[i].shape[0] == 0:
            continue
        for j in range(i + 1, len(instances)):
            if instances[i].view_id == instances[j].view_id:
                continue
            if clouds[j].shape[0] == 0:
                continue
            if chamfer_distance(clouds[i], clouds[j]) < threshold:
                edges.append((i, j))
    return edges


def cluster_graph(edges, instances):
    """Connected components of the instance graph as InstanceClusters.

    Cluster ids are assigned by each component's smallest
    (view_id, mask_label) member, so the result is independent of input
    order.
    """
    parent = list(range(len(instances)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj

    groups = {}
    for i in range(len(instances)):
        groups.setdefault(find(i), []).append(i)

    components = []
    for idx in groups.values():
        members = sorted((instances[i] for i in idx), key=lambda m: m.key)
        components.append(members)
    components.sort(key=lambda ms: ms[0].key)
    return [InstanceCluster(cid, tuple(ms)) for cid, ms in enumerate(components)]


def mark_background(clusters, background_labels):
    """Flag clusters containing any (view, label) listed as background.

    background_labels: map view_id -> iterable of mask labels. A plain
    iterable of labels applies to every view.
    """
    def is_bg(member):
        if isinstance(background_labels, dict):
            return member.mask_label in background_labels.get(member.view_id, ())
        return member.mask_label in background_labels

    out = []
    for c in clusters:
        flag = any(is_bg(m) for m in c.members)
        out.append(InstanceCluster(c.cluster_id, c.members, is_background=flag))
    return out
