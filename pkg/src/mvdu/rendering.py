"""Differentiable volume rendering over a dense SDF voxel grid.

The scene is a trilinearly interpolated signed-distance + color grid with a
Laplace density mapping sigma(s) (scale beta). Rendering composites color,
ray-distance depth and normals front to back; the backward pass scatters
hand-derived gradients into the grid arrays, so no ML framework is needed
and gradients stay finite-difference checkable.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

_ALPHA_CLIP = 40.0   # cap on sigma*delta before exp underflow
_NORM_EPS = 1e-9


@dataclass
class SdfGrid:
    """Dense n^3 signed-distance + RGB field over an axis-aligned box."""

    sdf: np.ndarray     # (n, n, n) float64, meters
    color: np.ndarray   # (n, n, n, 3) float64 in [0, 1]
    beta: float
    lo: np.ndarray      # (3,) world AABB
    hi: np.ndarray

    def __post_init__(self):
        self.sdf = np.ascontiguousarray(self.sdf, dtype=np.float64)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64)
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.sdf.ndim != 3 or self.color.shape != self.sdf.shape + (3,):
            raise ValueError("sdf must be (n, n, n) with color (n, n, n, 3)")
        if not np.isfinite(self.sdf).all():
            raise ValueError("sdf must be finite")
        if self.beta <= 1e-5:
            raise ValueError("beta must exceed 1e-5")
        if not (self.hi > self.lo).all():
            raise ValueError("degenerate bounds")

    @property
    def resolution(self):
        return self.sdf.shape[0]

    @property
    def voxel_size(self):
        """World size of one grid step, per axis."""
        return (self.hi - self.lo) / (np.array(self.sdf.shape) - 1)

    def world_to_grid(self, pts):
        return (np.asarray(pts, dtype=np.float64) - self.lo) \
            / (self.hi - self.lo) * (np.array(self.sdf.shape) - 1)

    def sample_sdf(self, pts):
        return kernels.trilerp(self.sdf, self.world_to_grid(pts))

    def sample_color(self, pts):
        return kernels.trilerp(self.color, self.world_to_grid(pts))

    def sdf_gradient(self, pts):
        """Central-difference SDF gradient, one voxel half-step per axis."""
        pts = np.asarray(pts, dtype=np.float64)
        h = self.voxel_size
        grad = np.empty_like(pts)
        for a in range(3):
            step = np.zeros(3)
            step[a] = h[a]
            grad[:, a] = (self.sample_sdf(pts + step)
                          - self.sample_sdf(pts - step)) / (2 * h[a])
        return grad

    @classmethod
    def sphere_init(cls, resolution, lo, hi, center=None, radius=None,
                    color=0.5, beta=0.1, inverted=True):
        """Grid initialized to a sphere SDF.

        inverted=True is the indoor warm start: empty interior, solid
        beyond the sphere (the zero level sits near the walls). False gives
        the classic outward blob.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if center is None:
            center = (lo + hi) / 2
        if radius is None:
            radius = 0.45 * float(np.min(hi - lo))
        axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx, gy, gz], axis=-1) - np.asarray(center)
        dist = np.linalg.norm(pts, axis=-1)
        sdf = (radius - dist) if inverted else (dist - radius)
        col = np.full((resolution,) * 3 + (3,), float(color))
        return cls(sdf, col, beta, lo, hi)


def sdf_to_density(s, beta):
    """Laplace-CDF density: 1/(2b) at the surface, ->1/b inside, ->0 outside."""
    s = np.asarray(s, dtype=np.float64)
    inside = s <= 0
    out = np.empty_like(s)
    out[inside] = 1.0 / beta - np.exp(s[inside] / beta) / (2.0 * beta)
    out[~inside] = np.exp(-s[~inside] / beta) / (2.0 * beta)
    return out


def sdf_to_density_grads(s, beta):
    """(sigma, d sigma/d s, d sigma/d beta) at given signed distances."""
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(-np.abs(s) / beta)
    sigma = np.where(s <= 0, 1.0 / beta - e / (2.0 * beta), e / (2.0 * beta))
    dsig_ds = -e / (2.0 * beta * beta)
    dsig_db = np.where(
        s <= 0,
        -1.0 / beta ** 2 + e / (2.0 * beta ** 2) * (1.0 + s / beta),
        e / (2.0 * beta ** 2) * (s / beta - 1.0),
    )
    return sigma, dsig_ds, dsig_db


def ray_aabb(origins, dirs, lo, hi):
    """Slab intersection; returns (t_near, t_far, hit) with t_near >= 0."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_near = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    t_far = np.maximum(t0, t1).min(axis=1)
    hit = t_far > t_near + 1e-9
    return t_near, t_far, hit


def stratified_samples(t_near, t_far, num_samples, rng=None):
    """Per-ray increasing sample distances and forward intervals.

    One sample per equal bin, jittered by ``rng`` (bin midpoints when None).
    The last interval is the leftover distance to t_far, so all intervals
    stay positive.
    """
    nr = t_near.shape[0]
    if rng is None:
        u = np.full((nr, num_samples), 0.5)
    else:
        u = rng.random((nr, num_samples))
    width = (t_far - t_near)[:, None] / num_samples
    t = t_near[:, None] + (np.arange(num_samples)[None, :] + u) * width
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = t_far - t[:, -1]
    return t, delta


@dataclass
class RenderOutput:
    color: np.ndarray    # (r, 3)
    depth: np.ndarray    # (r,) ray-distance expectation
    normal: np.ndarray   # (r, 3)
    alpha: np.ndarray    # (r, m)
    trans: np.ndarray    # (r, m)
    weights: np.ndarray  # (r, m) = alpha * trans
    hit: np.ndarray      # (r,) bool, ray intersected the grid bounds
    cache: dict | None = None

    @property
    def weight_sum(self):
        return self.weights.sum(axis=1)


def _composite(alpha):
    trans = np.cumprod(1.0 - alpha[:, :-1], axis=1)
    trans = np.concatenate([np.ones((alpha.shape[0], 1)), trans], axis=1)
    return trans, alpha * trans


def render_rays(grid, origins, dirs, num_samples=64, rng=None,
                with_normals=True, keep_cache=False):
    """Volume-render a ray batch against the grid.

    Rays that miss the bounds come back fully transparent (all weights
    zero). ``keep_cache`` retains the intermediates needed by
    :func:`render_rays_backward`.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    nr = dirs.shape[0]
    if origins.shape[0] == 1 and nr > 1:
        origins = np.broadcast_to(origins, (nr, 3))
    t_near, t_far, hit = ray_aabb(origins, dirs, grid.lo, grid.hi)
    # Degenerate spans keep the math defined; their weights are zeroed below.
    span_ok = hit
    t_far_safe = np.where(span_ok, t_far, t_near + 1e-6)
    t, delta = stratified_samples(t_near, t_far_safe, num_samples, rng=rng)

    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    s = grid.sample_sdf(flat).reshape(nr, num_samples)
    sigma = sdf_to_density(s, grid.beta)
    sd = np.minimum(sigma * delta, _ALPHA_CLIP)
    alpha = 1.0 - np.exp(-sd)
    alpha[~span_ok] = 0.0
    trans, weights = _composite(alpha)

    cols = grid.sample_color(flat).reshape(nr, num_samples, 3)
    color = (weights[..., None] * cols).sum(axis=1)
    depth = (weights * t).sum(axis=1)
    if with_normals:
        g = grid.sdf_gradient(flat)
        norm = np.sqrt((g * g).sum(axis=1) + _NORM_EPS ** 2)
        n = (g / norm[:, None]).reshape(nr, num_samples, 3)
        normal = (weights[..., None] * n).sum(axis=1)
    else:
        g = norm = n = None
        normal = np.zeros((nr, 3))

    cache = None
    if keep_cache:
        cache = {"pts": flat, "t": t, "delta": delta, "s": s, "sigma": sigma,
                 "sd": sd, "alpha": alpha, "trans": trans, "weights": weights,
                 "cols": cols, "g": g, "norm": norm, "n": n,
                 "span_ok": span_ok, "nr": nr, "m": num_samples}
    return RenderOutput(color, depth, normal, alpha, trans, weights,
                        span_ok, cache)


def weight_backward(alpha, trans, weights, d_weights, span_ok, delta, sigma):
    """Gradient of a loss through compositing weights back to densities.

    Given dL/dw (r, m), returns dL/dsigma (r, m) using
    dL/dalpha_i = dL/dw_i * T_i - sum_{j>i} dL/dw_j * w_j / (1 - alpha_i).
    """
    aw = d_weights * weights
    suffix = np.flip(np.cumsum(np.flip(aw, axis=1), axis=1), axis=1)
    tail = suffix - aw  # sum over j > i
    one_minus = np.maximum(1.0 - alpha, 1e-300)
    d_alpha = d_weights * trans - tail / one_minus
    # alpha = 1 - exp(-clip(sigma * delta)); through the clip the grad is 0.
    sd = sigma * delta
    d_sigma = np.where(sd < _ALPHA_CLIP, d_alpha * np.exp(-np.minimum(sd, _ALPHA_CLIP)) * delta, 0.0)
    d_sigma[~span_ok] = 0.0
    return d_sigma


def render_rays_backward(grid, cache, d_color=None, d_depth=None, d_normal=None):
    """Scatter rendering gradients into (grad_sdf, grad_color, grad_beta).

    d_color (r, 3), d_depth (r,), d_normal (r, 3) are the loss gradients
    w.r.t. the corresponding RenderOutput fields (None = not used).
    """
    nr, m = cache["nr"], cache["m"]
    weights = cache["weights"]
    gpts = grid.world_to_grid(cache["pts"])
    grad_sdf = np.zeros_like(grid.sdf)
    grad_color = np.zeros_like(grid.color)

    d_w = np.zeros((nr, m))
    if d_color is not None:
        d_w += (cache["cols"] * d_color[:, None, :]).sum(axis=2)
        dcols = weights[..., None] * d_color[:, None, :]
        grad_color += kernels.trilerp_scatter(grid.color.shape, gpts,
                                              dcols.reshape(-1, 3))
    if d_depth is not None:
        d_w += d_depth[:, None] * cache["t"]
    if d_normal is not None:
        if cache["n"] is None:
            raise ValueError("render was called with with_normals=False")
        d_w += (cache["n"] * d_normal[:, None, :]).sum(axis=2)
        # Through the (safe) normalization and central differences.
        d_n = (weights[..., None] * d_normal[:, None, :]).reshape(-1, 3)
        g, norm = cache["g"], cache["norm"]
        d_g = d_n / norm[:, None] \
            - g * ((g * d_n).sum(axis=1) / norm ** 3)[:, None]
        h = grid.voxel_size
        for a in range(3):
            step = np.zeros(3)
            step[a] = 1.0  # one-voxel world offset is one grid unit
            coeff = d_g[:, a] / (2 * h[a])
            grad_sdf += kernels.trilerp_scatter(grid.sdf.shape, gpts + step, coeff)
            grad_sdf -= kernels.trilerp_scatter(grid.sdf.shape, gpts - step, coeff)

    d_sigma = weight_backward(cache["alpha"], cache["trans"], weights, d_w,
                              cache["span_ok"], cache["delta"], cache["sigma"])
    _, ds_dsdf, ds_dbeta = sdf_to_density_grads(cache["s"], grid.beta)
    d_s = d_sigma * ds_dsdf
    grad_sdf += kernels.trilerp_scatter(grid.sdf.shape, gpts, d_s.reshape(-1))
    grad_beta = float((d_sigma * ds_dbeta).sum())
    return grad_sdf, grad_color, grad_beta


def composite_gaussians(items):
    """Front-to-back compositing of (color, opacity, gaussian weight) splats.

    The standalone per-pixel operation: each splat contributes its color
    scaled by opacity * weight and the transparency accumulated so far.
    """
    out = np.zeros(3)
    trans = 1.0
    for color, opacity, prob in items:
        if not (0.0 <= opacity <= 1.0 and 0.0 <= prob <= 1.0):
            raise ValueError("opacity and gaussian weight must lie in [0, 1]")
        a = opacity * prob
        out = out + np.asarray(color, dtype=np.float64) * a * trans
        trans = trans * (1.0 - a)
    return out


def extract_surface_points(grid, level=0.0):
    """Zero-level-set vertices of the SDF grid (marching cubes), world space.

    Returns an empty (0, 3) array when the level set is empty.
    """
    from skimage import measure

    try:
        verts, _, _, _ = measure.marching_cubes(
            grid.sdf, level=level, spacing=tuple(grid.voxel_size))
    except (ValueError, RuntimeError):
        return np.zeros((0, 3))
    return verts + grid.lo


def render_depth_map(grid, view, scale=1.0, num_samples=64, min_weight=0.5):
    """Render the view's depth map (camera-z) at ``scale`` times resolution.

    Rays whose accumulated weight stays under ``min_weight`` (mostly empty
    space) are marked invalid. Deterministic midpoint sampling.
    """
    from .camera import DepthMap, generate_rays  # local to avoid cycle

    intr = view.intrinsics.scaled(scale)
    scaled_view = type(view)(view.view_id, intr, view.pose)
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
    origin, dirs, z_scale = generate_rays(scaled_view, pixels)
    out = render_rays(grid, origin[None, :], dirs, num_samples=num_samples,
                      rng=None, with_normals=False)
    wsum = out.weight_sum
    # Expected ray distance of the surface; renormalize by the hit weight.
    with np.errstate(divide="ignore", invalid="ignore"):
        t_exp = out.depth / wsum
    depth = t_exp * z_scale
    valid = (wsum >= min_weight) & np.isfinite(depth) & (depth > 0)
    values = np.where(valid, depth, np.nan).reshape(h, w)
    return DepthMap.from_values(values.astype(np.float32))
