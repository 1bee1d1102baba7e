import numpy as np
import pytest

from mvdu.camera import (CameraView, DepthMap, Intrinsics, Pose, back_project,
                         back_project_depth_map, generate_ray, generate_rays,
                         project)
from mvdu.oracles import homogeneous_back_project, homogeneous_project

from conftest import random_intrinsics, random_pose, random_view


def identity_view(fx=1.0, fy=1.0, cx=0.0, cy=0.0, w=4, h=4):
    return CameraView(0, Intrinsics(fx, fy, cx, cy, w, h),
                      Pose(np.eye(3), np.zeros(3)))


def test_back_project_identity_camera_no_centering():
    view = identity_view()
    p = back_project(view, (0, 0), 1.0, pixel_center=0.0)
    assert np.allclose(p, [0.0, 0.0, 1.0])


def test_project_principal_point():
    view = CameraView(0, Intrinsics(100, 100, 50, 50, 101, 101),
                      Pose(np.eye(3), np.zeros(3)))
    uv, depth, valid = project(view, np.array([0.0, 0.0, 1.0]), pixel_center=0.0)
    assert valid
    assert np.allclose(uv, [50.0, 50.0], atol=1e-12)
    assert depth == pytest.approx(1.0)


def test_round_trip_random_cameras(rng):
    for _ in range(20):
        view = random_view(rng)
        n = 50
        uv = np.stack([rng.uniform(0, view.intrinsics.width - 1, n),
                       rng.uniform(0, view.intrinsics.height - 1, n)], axis=1)
        d = rng.uniform(0.2, 8.0, n)
        pts = back_project(view, uv, d)
        uv2, d2, valid = project(view, pts)
        assert valid.all()
        assert np.abs(uv2 - uv).max() < 1e-4
        assert np.abs(d2 - d).max() < 1e-6


def test_back_project_matches_homogeneous_oracle(rng):
    view = random_view(rng)
    n = 1000
    uv = np.stack([rng.uniform(0, view.intrinsics.width - 1, n),
                   rng.uniform(0, view.intrinsics.height - 1, n)], axis=1)
    d = rng.uniform(0.3, 5.0, n)
    mat = np.eye(4)
    mat[:3, :3] = view.pose.rotation
    mat[:3, 3] = view.pose.translation
    ref = homogeneous_back_project(view.intrinsics.matrix(), mat, uv, d)
    ours = back_project(view, uv, d)
    assert np.abs(ours - ref).max() < 1e-6


def test_project_matches_homogeneous_oracle(rng):
    view = random_view(rng)
    pts = view.pose.translation + rng.normal(size=(1000, 3)) * 2.0
    mat = np.eye(4)
    mat[:3, :3] = view.pose.rotation
    mat[:3, 3] = view.pose.translation
    uv_ref, z_ref = homogeneous_project(view.intrinsics.matrix(), mat, pts)
    uv, z, valid = project(view, pts)
    sel = z_ref > 1e-6
    assert (valid == sel).all()
    assert np.abs(uv[sel] - uv_ref[sel]).max() < 1e-4


def test_behind_camera_marker():
    view = identity_view(w=10, h=10)
    uv, depth, valid = project(view, np.array([0.0, 0.0, -1.0]))
    assert not valid
    assert np.isnan(uv).all()


def test_pose_invariance_of_back_projection(rng):
    view = random_view(rng)
    uv = np.array([[3.0, 2.0], [10.0, 20.0]])
    d = np.array([1.0, 2.5])
    pts = back_project(view, uv, d)
    extra = random_pose(rng)
    moved = Pose(extra.rotation @ view.pose.rotation,
                 extra.rotation @ view.pose.translation + extra.translation)
    view2 = CameraView(0, view.intrinsics, moved)
    pts2 = back_project(view2, uv, d)
    expected = pts @ extra.rotation.T + extra.translation
    assert np.abs(pts2 - expected).max() < 1e-6


def test_generate_ray_unit_norm_and_center_direction(rng):
    view = identity_view(fx=50, fy=50, cx=2.0, cy=2.0, w=5, h=5)
    ray = generate_ray(view, (1.5, 1.5))  # pixel center at principal point
    assert np.allclose(ray.direction, [0, 0, 1], atol=1e-9)
    view = random_view(rng)
    uv = np.stack([rng.uniform(0, view.intrinsics.width - 1, 100),
                   rng.uniform(0, view.intrinsics.height - 1, 100)], axis=1)
    _, dirs, _ = generate_rays(view, uv)
    assert np.abs(np.linalg.norm(dirs, axis=1) - 1.0).max() < 1e-6


def test_ray_consistent_with_back_projection(rng):
    view = random_view(rng)
    uv = np.array([[5.0, 7.0]])
    origin, dirs, z_scale = generate_rays(view, uv)
    d = 2.3
    p_ray = origin + (d / z_scale[0]) * dirs[0]
    p_bp = back_project(view, uv[0], d)
    assert np.abs(p_ray - p_bp).max() < 1e-6


def test_corner_ray_directions_hand_computed():
    # fx=fy=2, cx=cy=2, 4x4 image; pixel (0,0) center -> K^-1 [0.5,0.5,1]
    view = identity_view(fx=2.0, fy=2.0, cx=2.0, cy=2.0, w=4, h=4)
    ray = generate_ray(view, (0, 0))
    v = np.array([(0.5 - 2.0) / 2.0, (0.5 - 2.0) / 2.0, 1.0])
    assert np.allclose(ray.direction, v / np.linalg.norm(v), atol=1e-12)


def test_out_of_bounds_pixel_rejected():
    view = identity_view(w=8, h=8)
    with pytest.raises(ValueError):
        back_project(view, (8, 0), 1.0)
    with pytest.raises(ValueError):
        generate_ray(view, (0, -1))


def test_non_positive_depth_rejected():
    view = identity_view(w=8, h=8)
    with pytest.raises(ValueError):
        back_project(view, (1, 1), 0.0)
    with pytest.raises(ValueError):
        back_project(view, (1, 1), -2.0)


def test_pose_validation():
    bad = np.eye(3)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError):
        Pose(bad, np.zeros(3))
    reflect = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        Pose(reflect, np.zeros(3))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 9.0, 0.0, 4, 4)


def test_depth_map_validation():
    with pytest.raises(ValueError):
        DepthMap(np.array([[1.0, -2.0]], dtype=np.float32),
                 np.array([[True, True]]))
    dm = DepthMap.from_values(np.array([[1.0, -2.0], [np.nan, 3.0]]))
    assert dm.valid.tolist() == [[True, False], [False, True]]


def test_back_project_depth_map_counts(rng):
    view = random_view(rng, width=8, height=6)
    values = rng.uniform(0.5, 2.0, (6, 8)).astype(np.float32)
    valid = rng.random((6, 8)) > 0.3
    dm = DepthMap(np.where(valid, values, np.nan), valid)
    pts, uv = back_project_depth_map(view, depth=dm)
    assert pts.shape[0] == valid.sum() == uv.shape[0]
    sel = np.zeros((6, 8), dtype=bool)
    sel[2, :] = True
    pts2, _ = back_project_depth_map(view, depth=dm, select=sel)
    assert pts2.shape[0] == valid[2].sum()
