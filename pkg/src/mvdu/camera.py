"""Pinhole camera model: rays, back-projection, and projection.

Conventions (shared by the whole package and the on-disk formats):
  * poses are camera-to-world; the camera center is the pose translation;
  * integer pixel (u, v) refers to the pixel center (u + 0.5, v + 0.5);
  * depth is camera-z in meters, not distance along the ray.
"""

from dataclasses import dataclass, field

import numpy as np

_Z_EPS = 1e-8


def _frozen_array(a, dtype=np.float64):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor):
        """Intrinsics of the same camera at ``factor`` times the resolution."""
        return Intrinsics(self.fx * factor, self.fy * factor,
                          self.cx * factor, self.cy * factor,
                          max(1, int(round(self.width * factor))),
                          max(1, int(round(self.height * factor))))


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen_array(self.rotation)
        t = _frozen_array(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3, 3) and translation (3,)")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self):
        return self.translation


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel camera-z depths with an explicit validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = _frozen_array(self.values, dtype=np.float32)
        m = _frozen_array(self.valid, dtype=bool)
        if v.ndim != 2 or m.shape != v.shape:
            raise ValueError("values must be (h, w) with a matching valid mask")
        ok = v[m]
        if ok.size and not (np.isfinite(ok).all() and (ok > 0).all()):
            raise ValueError("valid depths must be finite and positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @classmethod
    def from_values(cls, values):
        """Mark non-finite or non-positive entries invalid."""
        values = np.asarray(values, dtype=np.float32)
        valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, np.float32(np.nan)), valid)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple

    def __post_init__(self):
        o = _frozen_array(self.origin)
        d = _frozen_array(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class CameraView:
    """One frame: camera model plus its optional per-pixel data."""

    view_id: int
    intrinsics: Intrinsics
    pose: Pose
    depth: DepthMap | None = None
    mask: np.ndarray | None = field(default=None)
    rgb: np.ndarray | None = field(default=None)

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.depth is not None and (self.depth.height, self.depth.width) != (h, w):
            raise ValueError("depth dimensions do not match intrinsics")
        if self.mask is not None:
            m = _frozen_array(self.mask, dtype=np.uint16)
            if m.shape != (h, w):
                raise ValueError("mask dimensions do not match intrinsics")
            object.__setattr__(self, "mask", m)
        if self.rgb is not None:
            c = _frozen_array(self.rgb)
            if c.shape != (h, w, 3):
                raise ValueError("rgb dimensions do not match intrinsics")
            object.__setattr__(self, "rgb", c)

    @property
    def optical_axis(self):
        """Camera viewing direction (+z of the camera frame) in world space."""
        return self.pose.rotation[:, 2]


def _as_points2(pixels):
    p = np.asarray(pixels, dtype=np.float64)
    single = p.ndim == 1
    return np.atleast_2d(p), single


def back_project(view, pixels, depths, pixel_center=0.5):
    """Lift pixels with known depth to world-space points.

    pixels: (u, v) pair or (n, 2) array; depths: scalar or (n,).
    Returns (3,) or (n, 3). Out-of-bounds pixels and non-positive depths are
    rejected.
    """
    uv, single = _as_points2(pixels)
    d = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    intr = view.intrinsics
    if ((uv[:, 0] < 0) | (uv[:, 0] >= intr.width)
            | (uv[:, 1] < 0) | (uv[:, 1] >= intr.height)).any():
        raise ValueError("pixel out of image bounds")
    if (~np.isfinite(d)).any() or (d <= 0).any():
        raise ValueError("depths must be finite and positive")
    x = (uv[:, 0] + pixel_center - intr.cx) / intr.fx * d
    y = (uv[:, 1] + pixel_center - intr.cy) / intr.fy * d
    cam = np.stack([x, y, d], axis=1)
    world = cam @ view.pose.rotation.T + view.pose.translation
    return world[0] if single else world


def project(view, points, pixel_center=0.5):
    """Project world points into the view.

    Returns (uv, depth, valid): uv may fall outside the image (callers
    filter); ``valid`` is False at or behind the camera plane, where uv and
    depth are NaN. Shapes follow the input (single point or (n, 3)).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    intr = view.intrinsics
    cam = (pts - view.pose.translation) @ view.pose.rotation
    z = cam[:, 2]
    valid = z > _Z_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx - pixel_center
        v = intr.fy * cam[:, 1] / z + intr.cy - pixel_center
    uv = np.stack([u, v], axis=1)
    uv[~valid] = np.nan
    depth = np.where(valid, z, np.nan)
    if single:
        return uv[0], depth[0], bool(valid[0])
    return uv, depth, valid


def generate_rays(view, pixels, pixel_center=0.5):
    """World-space rays through pixel centers.

    Returns (origin (3,), directions (n, 3) unit, z_scale (n,)) where a point
    at ray parameter t has camera-z depth ``t * z_scale``.
    """
    uv, _ = _as_points2(pixels)
    intr = view.intrinsics
    if ((uv[:, 0] < 0) | (uv[:, 0] >= intr.width)
            | (uv[:, 1] < 0) | (uv[:, 1] >= intr.height)).any():
        raise ValueError("pixel out of image bounds")
    x = (uv[:, 0] + pixel_center - intr.cx) / intr.fx
    y = (uv[:, 1] + pixel_center - intr.cy) / intr.fy
    cam = np.stack([x, y, np.ones_like(x)], axis=1)
    norm = np.linalg.norm(cam, axis=1)
    dirs = (cam / norm[:, None]) @ view.pose.rotation.T
    return view.pose.center, dirs, 1.0 / norm


def generate_ray(view, pixel, pixel_center=0.5):
    """Single-pixel convenience wrapper around :func:`generate_rays`."""
    origin, dirs, _ = generate_rays(view, [pixel], pixel_center=pixel_center)
    return Ray(origin, dirs[0], (pixel[0], pixel[1]))


def back_project_depth_map(view, depth=None, select=None, pixel_center=0.5):
    """Back-project every valid depth pixel of a view.

    select: optional (h, w) boolean mask restricting the pixels.
    Returns (points (n, 3), pixels (n, 2) int64) aligned row for row.
    """
    dm = depth if depth is not None else view.depth
    if dm is None:
        raise ValueError("view has no depth map")
    keep = dm.valid if select is None else (dm.valid & select)
    vs, us = np.nonzero(keep)
    if us.size == 0:
        return np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64)
    uv = np.stack([us, vs], axis=1).astype(np.int64)
    pts = back_project(view, uv.astype(np.float64),
                       dm.values[vs, us].astype(np.float64),
                       pixel_center=pixel_center)
    return pts, uv
