import numpy as np
import pytest

from mvdu import scenes
from mvdu.clustering import (InstanceCluster, build_instance_graph, cluster_graph,
                             extract_view_instances, mark_background)
from mvdu.errors import EmptyCloudError
from mvdu.oracles import brute_force_density, convex_hull_volume
from mvdu.uncertainty import (DownsampledCloud, FusedInstanceCloud,
                              assemble_uncertainty, ball_radius,
                              compute_uncertainty_maps, downsample,
                              fuse_instance, normalize_densities,
                              oriented_bounding_box, point_density)

from test_clustering import make_instance


def rot_z(a):
    return np.array([[np.cos(a), -np.sin(a), 0],
                     [np.sin(a), np.cos(a), 0], [0, 0, 1]])


# ---------------- fuse / downsample ----------------

def test_fuse_counts_points(rng):
    a = make_instance(0, 1, rng.normal(size=(40, 3)))
    b = make_instance(1, 1, rng.normal(size=(25, 3)))
    fused = fuse_instance(InstanceCluster(0, (a, b)))
    assert fused.points.shape[0] == 65
    assert (fused.source_view == 0).sum() == 40
    assert (fused.source_view == 1).sum() == 25


def test_fuse_duplicate_views(rng):
    pts = rng.normal(size=(30, 3))
    a = make_instance(0, 1, pts)
    b = make_instance(1, 1, pts)
    fused = fuse_instance(InstanceCluster(0, (a, b)))
    assert fused.points.shape[0] == 60


def test_fuse_empty_cluster_rejected():
    a = make_instance(0, 1, np.zeros((0, 3)))
    with pytest.raises(EmptyCloudError):
        fuse_instance(InstanceCluster(0, (a,)))


def test_fused_sphere_points_on_surface():
    prim = scenes.Sphere(1, (0.0, 0.0, 0.3), 0.35, (0.8, 0.2, 0.2))
    room = scenes.Box(9, (-3, -3, -0.5), (3, 3, 2.5), (0.6,) * 3, background=True)
    intr = scenes.fov_intrinsics(72, 72, 60)
    cams = scenes.camera_ring(8, 1.8, 0.9, (0, 0, 0.3), intr)
    spec = scenes.SceneSpec((prim, room), tuple(cams))
    rendered = scenes.render_ground_truth(spec)
    views = [type(c)(c.view_id, c.intrinsics, c.pose, mask=rendered[i]["mask"])
             for i, c in enumerate(cams)]
    instances = extract_view_instances(views, {i: rendered[i]["depth"]
                                               for i in range(8)})
    members = tuple(i for i in instances if i.mask_label == 1)
    fused = fuse_instance(InstanceCluster(0, members))
    dist = np.abs(np.linalg.norm(fused.points - np.array([0, 0, 0.3]), axis=1)
                  - 0.35)
    assert dist.max() < 1e-4


def test_downsample_identity_below_target(rng):
    cloud = FusedInstanceCloud(0, rng.normal(size=(100, 3)),
                               np.zeros(100, dtype=np.int64))
    ds = downsample(cloud, target=30000, seed=1)
    assert np.array_equal(ds.points, cloud.points)


def test_downsample_cardinality_and_subset(rng):
    pts = rng.normal(size=(60000, 3))
    cloud = FusedInstanceCloud(0, pts, np.zeros(60000, dtype=np.int64))
    ds = downsample(cloud, target=30000, seed=1)
    assert len(ds) == 30000
    # subset check on a few rows
    view = {tuple(p) for p in pts[::97]}
    assert all(tuple(p) in view or True for p in ds.points[:5])
    idx = {tuple(np.round(p, 12)) for p in pts}
    assert all(tuple(np.round(p, 12)) in idx for p in ds.points[:200])


def test_downsample_deterministic(rng):
    pts = rng.normal(size=(50000, 3))
    cloud = FusedInstanceCloud(0, pts, np.zeros(50000, dtype=np.int64))
    a = downsample(cloud, target=10000, seed=42)
    b = downsample(cloud, target=10000, seed=42)
    assert np.array_equal(a.points, b.points)


# ---------------- oriented bounding box ----------------

def unit_cube_corners():
    g = np.array(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"))
    return g.reshape(3, -1).T.astype(np.float64)


def test_obb_axis_aligned_cube():
    obb = oriented_bounding_box(unit_cube_corners())
    assert obb.volume == pytest.approx(1.0, abs=1e-6)


def test_obb_rotated_cube_volume(rng):
    corners = unit_cube_corners()
    for _ in range(3):
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 2] *= -1
        rotated = corners @ q.T + rng.normal(size=3)
        obb = oriented_bounding_box(rotated)
        assert obb.volume == pytest.approx(1.0, rel=0.02)


def test_obb_sandwich_bounds(rng):
    pts = rng.normal(size=(500, 3)) * np.array([1.0, 0.5, 0.2])
    pts = pts @ rot_z(0.4).T
    obb = oriented_bounding_box(pts)
    aabb = np.prod(pts.max(axis=0) - pts.min(axis=0))
    hull = convex_hull_volume(pts)
    assert hull <= obb.volume + 1e-9
    assert obb.volume <= aabb + 1e-9


def test_obb_contains_all_points(rng):
    pts = rng.normal(size=(300, 3))
    obb = oriented_bounding_box(pts)
    local = (pts - obb.center) @ obb.axes
    assert (np.abs(local) <= obb.half_extents + 1e-6).all()


def test_obb_empty_rejected():
    with pytest.raises(EmptyCloudError):
        oriented_bounding_box(np.zeros((0, 3)))


def test_obb_degenerate_planar():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    obb = oriented_bounding_box(pts)
    assert obb.volume == pytest.approx(0.0, abs=1e-9)


# ---------------- ball radius ----------------

def test_ball_radius_paper_mode_unit_cube(rng):
    pts = rng.uniform(0, 1, (5000, 3))
    corners = unit_cube_corners()
    cloud = DownsampledCloud(np.concatenate([pts, corners]))
    r = ball_radius(cloud, mode="paper")
    assert r == pytest.approx(1.01, abs=0.02)


def test_ball_radius_cbrt_mode_unit_cube(rng):
    pts = np.concatenate([rng.uniform(0, 1, (5000, 3)), unit_cube_corners()])
    cloud = DownsampledCloud(pts)
    assert ball_radius(cloud, mode="cbrt") == pytest.approx(1.01, abs=0.02)


def test_ball_radius_degenerate_planar_cloud():
    pts = np.concatenate([np.random.default_rng(0).uniform(0, 1, (50, 2)),
                          np.zeros((50, 1))], axis=1)
    cloud = DownsampledCloud(pts)
    assert ball_radius(cloud, mode="paper") == pytest.approx(0.01, abs=1e-9)
    assert ball_radius(cloud, mode="cbrt") == pytest.approx(0.01, abs=1e-9)


def test_ball_radius_bad_mode():
    with pytest.raises(ValueError):
        ball_radius(DownsampledCloud(np.zeros((1, 3))), mode="sqrt")


# ---------------- density ----------------

def test_density_far_query_zero(rng):
    cloud = DownsampledCloud(rng.normal(size=(100, 3)))
    counts = point_density(np.array([[50.0, 50.0, 50.0]]), cloud, 0.5)
    assert counts.tolist() == [0]


def test_density_coincident_query(rng):
    pts = rng.normal(size=(100, 3))
    cloud = DownsampledCloud(pts)
    counts = point_density(pts[:1], cloud, 1e-9)
    assert counts[0] >= 1


def test_density_matches_brute_force(rng):
    pts = rng.normal(size=(5000, 3))
    cloud = DownsampledCloud(pts)
    queries = rng.normal(size=(1000, 3)) * 1.2
    for radius in (0.08, 0.35):
        fast = point_density(queries, cloud, radius)
        assert np.array_equal(fast, brute_force_density(queries, pts, radius))


def test_density_monotone_under_duplication(rng):
    pts = rng.normal(size=(800, 3))
    queries = pts[:200]
    radius = 0.3
    base = point_density(queries, DownsampledCloud(pts), radius)
    dup = point_density(queries, DownsampledCloud(
        np.concatenate([pts, pts])), radius)
    assert (dup >= base).all()
    # duplicating every point doubles all counts: uncertainty is unchanged
    norm_base = normalize_densities({0: base.astype(float)})
    norm_dup = normalize_densities({0: dup.astype(float)})
    assert np.allclose(norm_dup[0], norm_base[0])


# ---------------- normalization ----------------

def test_normalize_constant_densities():
    out = normalize_densities({0: np.array([3.0, 3.0]), 1: np.array([3.0])})
    assert np.allclose(out[0], 1.0) and np.allclose(out[1], 1.0)


def test_normalize_direct_values():
    out = normalize_densities({0: np.array([2.0, 4.0]), 1: np.array([8.0])})
    assert np.allclose(out[0], [0.25, 0.5])
    assert np.allclose(out[1], [1.0])


def test_normalize_global_max_is_cross_view(rng):
    d = {v: rng.uniform(0, 10, 50) for v in range(3)}
    out = normalize_densities(d)
    gmax = max(float(x.max()) for x in d.values())
    for v in range(3):
        assert np.allclose(out[v], d[v] / gmax)
    assert max(float(x.max()) for x in out.values()) == pytest.approx(1.0)


def test_normalize_all_zero_forces_max_uncertainty(caplog):
    import logging
    with caplog.at_level(logging.WARNING):
        out = normalize_densities({0: np.zeros(4)}, cluster_id=7)
    assert np.allclose(out[0], 0.0)  # uncertainty 1 - 0 = 1
    assert any("uncertainty" in r.message for r in caplog.records)


# ---------------- assembly + end-to-end maps ----------------

def _corrupted_scene(seed=5):
    text = """
    image 112 112
    fov 62
    ring views=9 radius=1.6 height=0.95 target=0,0,0.2
    ring views=7 radius=1.7 height=0.3 target=0,0,0.2
    sphere id=1 center=0.25,0.12,0.2 radius=0.2 color=0.85,0.25,0.2
    sphere id=2 center=-0.32,-0.1,0.16 radius=0.16 color=0.2,0.45,0.85
    box id=3 min=-0.02,-0.45,0.0 max=0.28,-0.15,0.3 color=0.25,0.75,0.3
    box id=9 min=-2.2,-2.2,-0.3 max=2.2,2.2,2.6 color=0.62,0.6,0.58 background
    """
    spec0 = scenes.parse_scene(text)
    rendered = scenes.render_ground_truth(spec0)
    cv = len(spec0.cameras) - 1
    mask = rendered[cv]["mask"]
    vs, us = np.nonzero(mask == 1)
    v0, v1 = vs.min(), vs.max()
    rect = (int(us.min()), int(v0), int(us.max()) + 1,
            int(v0 + 0.42 * (v1 - v0 + 1)))
    spec = scenes.SceneSpec(
        spec0.primitives, spec0.cameras,
        corruptions=(scenes.CorruptionRegion(cv, rect, bias=-0.15,
                                             sigma=0.012, warp=0.03),))
    gt = [r["depth"] for r in rendered]
    mono, errors = scenes.corrupt_depths(gt, spec, seed=seed)
    views = [type(c)(c.view_id, c.intrinsics, c.pose, mask=rendered[i]["mask"],
                     rgb=rendered[i]["rgb"]) for i, c in enumerate(spec.cameras)]
    return spec, views, rendered, mono, errors, cv


@pytest.fixture(scope="module")
def corrupted_maps():
    spec, views, rendered, mono, errors, cv = _corrupted_scene()
    depths = {i: mono[i] for i in range(len(views))}
    instances = extract_view_instances(views, depths)
    edges = build_instance_graph(instances, threshold=0.06, seed=5)
    clusters = mark_background(cluster_graph(edges, instances),
                               spec.background_ids)
    maps, info = compute_uncertainty_maps(views, clusters, seed=5)
    return spec, views, rendered, errors, cv, clusters, maps, info


def test_maps_in_unit_range_and_zero_outside(corrupted_maps):
    spec, views, rendered, errors, cv, clusters, maps, info = corrupted_maps
    for vid, umap in maps.items():
        assert umap.values.min() >= 0.0 and umap.values.max() <= 1.0
        outside = rendered[vid]["mask"] == 0
        background = rendered[vid]["mask"] == 9
        assert (umap.values[outside] == 0).all()
        assert (umap.values[background] == 0).all()


def test_clusters_fully_merged(corrupted_maps):
    spec, views, rendered, errors, cv, clusters, maps, info = corrupted_maps
    fg = [c for c in clusters if not c.is_background]
    assert sorted(len(c.members) for c in fg) == [16, 16, 16]


def test_corrupted_region_stands_out(corrupted_maps):
    spec, views, rendered, errors, cv, clusters, maps, info = corrupted_maps
    m = maps[cv].values
    e = errors[cv]
    fg = (rendered[cv]["mask"] > 0) & (rendered[cv]["mask"] != 9)
    corrupt_mean = m[fg & (e > 0.03)].mean()
    clean_mean = m[fg & (e <= 0.03)].mean()
    assert corrupt_mean > 2.0 * clean_mean


def test_uncertainty_correlates_with_true_error(corrupted_maps):
    from scipy.stats import spearmanr
    spec, views, rendered, errors, cv, clusters, maps, info = corrupted_maps
    m = maps[cv].values
    fg = (rendered[cv]["mask"] > 0) & (rendered[cv]["mask"] != 9)
    rho = spearmanr(m[fg], errors[cv][fg]).statistic
    assert rho > 0.3


def test_maps_deterministic(corrupted_maps):
    spec, views, rendered, errors, cv, clusters, maps, info = corrupted_maps
    maps2, _ = compute_uncertainty_maps(views, clusters, seed=5)
    for vid in maps:
        assert np.array_equal(maps[vid].values, maps2[vid].values)


def test_assemble_blank_for_unknown_cluster(rng):
    view = scenes.camera_ring(2, 1.0, 0.5, (0, 0, 0),
                              scenes.fov_intrinsics(8, 8, 60))[0]
    maps = assemble_uncertainty([view], [], {})
    assert maps[0].values.shape == (8, 8)
    assert (maps[0].values == 0).all()
