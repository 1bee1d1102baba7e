"""Independent reference implementations used to verify the fast paths.

Everything here is deliberately naive (O(n*m) scans, explicit homogeneous
matrices, plain Python compositing loops) and shares no code with the
modules it checks.
"""

import numpy as np
from scipy.spatial import ConvexHull


def brute_force_density(queries, points, radius):
    """Neighbor counts within ``radius`` by full pairwise distance scan."""
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    counts = np.zeros(queries.shape[0], dtype=np.int64)
    r2 = radius * radius
    for i, q in enumerate(queries):
        d = points - q
        counts[i] = int(np.count_nonzero(
            d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2 <= r2))
    return counts


def brute_force_nn(queries, points):
    """Nearest-neighbor distances by full pairwise scan."""
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    out = np.empty(queries.shape[0])
    for i, q in enumerate(queries):
        d = points - q
        out[i] = np.sqrt((d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2).min())
    return out


def brute_force_chamfer(a, b):
    """Symmetric Chamfer distance: halved sum of both mean NN distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point sets must be nonempty")
    return 0.5 * (brute_force_nn(a, b).mean() + brute_force_nn(b, a).mean())


def convex_hull_volume(points):
    """Convex hull volume (Qhull). Degenerate inputs have zero volume."""
    points = np.asarray(points, dtype=np.float64)
    try:
        return float(ConvexHull(points).volume)
    except Exception:
        return 0.0


def finite_difference_gradient(f, x0, eps=1e-5, indices=None):
    """Central-difference gradient of scalar ``f`` at flat parameter vector x0.

    indices: optional subset of coordinates (full gradient otherwise).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    idx = np.arange(x0.size) if indices is None else np.asarray(indices)
    grad = np.zeros(idx.size)
    for n, i in enumerate(idx):
        xp = x0.copy()
        xp[i] += eps
        xm = x0.copy()
        xm[i] -= eps
        grad[n] = (f(xp) - f(xm)) / (2 * eps)
    return grad


def homogeneous_back_project(k_matrix, cam_to_world, pixels, depths,
                             pixel_center=0.5):
    """Back-projection via explicit homogeneous 4x4 / inverse-K matrices."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    k_inv = np.linalg.inv(np.asarray(k_matrix, dtype=np.float64))
    hom = np.concatenate([pixels + pixel_center,
                          np.ones((pixels.shape[0], 1))], axis=1)
    cam = (k_inv @ hom.T).T * depths[:, None]
    cam_h = np.concatenate([cam, np.ones((cam.shape[0], 1))], axis=1)
    world = (np.asarray(cam_to_world, dtype=np.float64) @ cam_h.T).T
    return world[:, :3] / world[:, 3:4]


def homogeneous_project(k_matrix, cam_to_world, points, pixel_center=0.5):
    """Projection via the inverse homogeneous transform; returns (uv, z)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    world_to_cam = np.linalg.inv(np.asarray(cam_to_world, dtype=np.float64))
    pts_h = np.concatenate([points, np.ones((points.shape[0], 1))], axis=1)
    cam = (world_to_cam @ pts_h.T).T
    cam = cam[:, :3] / cam[:, 3:4]
    proj = (np.asarray(k_matrix, dtype=np.float64) @ cam.T).T
    uv = proj[:, :2] / proj[:, 2:3] - pixel_center
    return uv, cam[:, 2]


def composite_reference(colors, opacities, probs):
    """Front-to-back compositing by direct per-term summation.

    Every term's occlusion product is re-derived from scratch rather than
    carried as a running transparency.
    """
    colors = [np.asarray(c, dtype=np.float64) for c in colors]
    out = np.zeros(3)
    for i in range(len(colors)):
        prod = 1.0
        for k in range(i):
            prod *= 1.0 - opacities[k] * probs[k]
        out = out + colors[i] * opacities[i] * probs[i] * prod
    return out
