"""Synthetic ground-truth scenes: analytic primitives, cameras, corruption.

Scenes are spheres and axis-aligned boxes (a box viewed from inside acts as
a room) rendered by exact ray intersection, so depths, masks, normals and
shaded colors are ground truth by construction. Depth corruption injects
the kind of per-view inconsistency monocular predictors produce, while
keeping the true per-pixel error as test ground truth.
"""

import math
import re
from dataclasses import dataclass

import numpy as np

from .camera import CameraView, DepthMap, Intrinsics, Pose, generate_rays

_T_EPS = 1e-6


@dataclass(frozen=True)
class Sphere:
    pid: int
    center: tuple
    radius: float
    color: tuple
    background: bool = False
    texture: float = 0.0     # modulation amplitude in [0, 1]
    freq: float = 9.0        # spatial frequency of the modulation


@dataclass(frozen=True)
class Box:
    pid: int
    lo: tuple
    hi: tuple
    color: tuple
    background: bool = False
    texture: float = 0.0
    freq: float = 9.0


@dataclass(frozen=True)
class CorruptionRegion:
    view_id: int
    rect: tuple          # (u0, v0, u1, v1), exclusive upper bounds
    bias: float = 0.0
    sigma: float = 0.0
    warp: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    cameras: tuple
    corruptions: tuple = ()
    affine: tuple | None = None       # (scale, shift) applied outside regions
    light_dir: tuple = (-0.4, 0.3, -0.85)
    ambient: float = 0.35

    def __post_init__(self):
        ids = [p.pid for p in self.primitives]
        if len(ids) != len(set(ids)):
            raise ValueError("primitive ids must be unique")
        if any(p.pid == 0 for p in self.primitives):
            raise ValueError("primitive id 0 is reserved for 'no hit'")
        if len(self.cameras) < 2:
            raise ValueError("a scene needs at least two cameras")
        w = self.cameras[0].intrinsics.width
        h = self.cameras[0].intrinsics.height
        for c in self.corruptions:
            u0, v0, u1, v1 = c.rect
            if not (0 <= u0 < u1 <= w and 0 <= v0 < v1 <= h):
                raise ValueError(f"corruption rect {c.rect} outside image bounds")

    @property
    def background_ids(self):
        return {p.pid for p in self.primitives if p.background}


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose looking from eye to target (x right, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up) / np.linalg.norm(up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def camera_ring(n_views, radius, height, target, intrinsics,
                start_deg=0.0, end_deg=360.0):
    """Cameras on a circular arc around ``target``, all looking at it."""
    target = np.asarray(target, dtype=np.float64)
    span = end_deg - start_deg
    full = abs(span % 360.0) < 1e-9
    views = []
    for i in range(n_views):
        frac = i / n_views if full else i / max(1, n_views - 1)
        ang = math.radians(start_deg + span * frac)
        eye = target + np.array([radius * math.cos(ang),
                                 radius * math.sin(ang), height])
        views.append(CameraView(i, intrinsics, look_at_pose(eye, target)))
    return views


def fov_intrinsics(width, height, fov_deg):
    """Square-pixel intrinsics with the given horizontal field of view."""
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return Intrinsics(f, f, width / 2.0, height / 2.0, width, height)


def _intersect_sphere(origin, dirs, sphere):
    oc = origin - np.asarray(sphere.center, dtype=np.float64)
    b = dirs @ oc
    c = oc @ oc - sphere.radius ** 2
    disc = b * b - c
    t = np.full(dirs.shape[0], np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    t = np.where(hit & (t_near > _T_EPS), t_near, t)
    t = np.where(hit & (t_near <= _T_EPS) & (t_far > _T_EPS), t_far, t)
    return t


def _intersect_box(origin, dirs, box):
    lo = np.asarray(box.lo, dtype=np.float64)
    hi = np.asarray(box.hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo - origin) * inv
    t1 = (hi - origin) * inv
    t_enter = np.minimum(t0, t1).max(axis=1)
    t_exit = np.maximum(t0, t1).min(axis=1)
    valid = t_exit >= np.maximum(t_enter, 0.0)
    t = np.where(valid & (t_enter > _T_EPS), t_enter, np.inf)
    # Origin inside the box: the exit face is the visible (interior) surface.
    t = np.where(valid & (t_enter <= _T_EPS) & (t_exit > _T_EPS), t_exit, t)
    return t


def _surface_normal(prim, pts, dirs):
    if isinstance(prim, Sphere):
        n = pts - np.asarray(prim.center, dtype=np.float64)
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
    else:
        lo = np.asarray(prim.lo, dtype=np.float64)
        hi = np.asarray(prim.hi, dtype=np.float64)
        d_lo = np.abs(pts - lo)
        d_hi = np.abs(pts - hi)
        n = np.zeros_like(pts)
        face = np.where(d_lo.min(axis=1) <= d_hi.min(axis=1),
                        d_lo.argmin(axis=1), d_hi.argmin(axis=1) + 3)
        for a in range(3):
            n[face == a, a] = -1.0
            n[face == a + 3, a] = 1.0
    # Flip to face the viewer (matters for room interiors).
    flip = (n * dirs).sum(axis=1) > 0
    n[flip] = -n[flip]
    return n


def render_ground_truth(spec):
    """Exact per-view render: (depth, mask, rgb, normal) for every camera.

    Returns a list of dicts keyed 'depth' (DepthMap, camera-z), 'mask'
    (uint16, primitive id, 0 = no hit), 'rgb' (h, w, 3 float in [0, 1]) and
    'normal' (h, w, 3 world-space unit vectors, zero where no hit).
    """
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    outputs = []
    for view in spec.cameras:
        intr = view.intrinsics
        h, w = intr.height, intr.width
        us, vs = np.meshgrid(np.arange(w), np.arange(h))
        pixels = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
        origin, dirs, z_scale = generate_rays(view, pixels)

        t_best = np.full(pixels.shape[0], np.inf)
        winner = np.zeros(pixels.shape[0], dtype=np.int64)
        for prim in spec.primitives:
            t = (_intersect_sphere(origin, dirs, prim)
                 if isinstance(prim, Sphere) else
                 _intersect_box(origin, dirs, prim))
            closer = t < t_best
            t_best = np.where(closer, t, t_best)
            winner = np.where(closer, prim.pid, winner)

        hit = np.isfinite(t_best)
        rgb = np.zeros((pixels.shape[0], 3))
        normal = np.zeros((pixels.shape[0], 3))
        for prim in spec.primitives:
            sel = hit & (winner == prim.pid)
            if not sel.any():
                continue
            pts = origin + t_best[sel, None] * dirs[sel]
            n = _surface_normal(prim, pts, dirs[sel])
            shade = spec.ambient + (1.0 - spec.ambient) * np.maximum(
                0.0, -(n @ light))
            if prim.texture > 0:
                # view-consistent 3D stripe pattern in [0, 1]
                pat = 0.5 + 0.5 * (np.sin(prim.freq * pts[:, 0])
                                   * np.sin(prim.freq * pts[:, 1])
                                   * np.sin(prim.freq * pts[:, 2]))
                shade = shade * (1.0 - prim.texture + prim.texture * pat)
            rgb[sel] = np.asarray(prim.color, dtype=np.float64) * shade[:, None]
            normal[sel] = n

        depth = np.where(hit, t_best * z_scale, np.nan).reshape(h, w)
        outputs.append({
            "depth": DepthMap.from_values(depth.astype(np.float32)),
            "mask": winner.reshape(h, w).astype(np.uint16),
            "rgb": np.clip(rgb, 0.0, 1.0).reshape(h, w, 3),
            "normal": normal.reshape(h, w, 3),
        })
    return outputs


def _warp_field(rect, amplitude, rng):
    """Smooth low-frequency modulation over a rectangular region."""
    u0, v0, u1, v1 = rect
    h = v1 - v0
    w = u1 - u0
    pu = max(w / 1.5, 2.0)
    pv = max(h / 1.5, 2.0)
    phase_u, phase_v = rng.uniform(0, 2 * math.pi, size=2)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    return amplitude * np.sin(2 * math.pi * uu / pu + phase_u) \
        * np.sin(2 * math.pi * vv / pv + phase_v)


def corrupt_depths(gt_depths, spec, seed=0):
    """Produce per-view 'monocular' depths plus true injected-error maps.

    Inside each view's corruption regions: depth + bias + N(0, sigma) +
    low-frequency warp. Elsewhere: the optional global affine distortion.
    The returned error maps hold |injected deviation| (zero outside
    regions), the generator-side ground truth for uncertainty checks.
    """
    rng = np.random.default_rng(seed)
    by_view = {}
    for c in spec.corruptions:
        by_view.setdefault(c.view_id, []).append(c)

    mono = []
    errors = []
    for vid, dm in enumerate(gt_depths):
        values = dm.values.astype(np.float64).copy()
        err = np.zeros_like(values)
        if spec.affine is not None:
            s, t = spec.affine
            distorted = s * values + t
        else:
            distorted = values.copy()
        for c in by_view.get(vid, []):
            u0, v0, u1, v1 = c.rect
            block = values[v0:v1, u0:u1]
            delta = (c.bias
                     + rng.normal(0.0, c.sigma, size=block.shape)
                     + _warp_field(c.rect, c.warp, rng))
            distorted[v0:v1, u0:u1] = block + delta
            err[v0:v1, u0:u1] = np.abs(delta)
        err[~dm.valid] = 0.0
        mono.append(DepthMap.from_values(distorted.astype(np.float32)))
        errors.append(err)
    return mono, errors


_RING_RE = re.compile(r"(\w+)=([^\s]+)")


def _parse_kv(rest):
    return {k: v for k, v in _RING_RE.findall(rest)}


def _vec(s):
    return tuple(float(x) for x in s.split(","))


def parse_scene(text):
    """Parse the scene description format (see README for the grammar)."""
    width = height = None
    fov = 60.0
    intr = None
    camera_lines = []
    primitives = []
    corruptions = []
    affine = None
    light_dir = (-0.4, 0.3, -0.85)
    ambient = 0.35

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, _, rest = line.partition(" ")
        kv = _parse_kv(rest)
        try:
            if word == "image":
                width, height = (int(x) for x in rest.split())
            elif word == "fov":
                fov = float(rest)
            elif word == "intrinsics":
                fx, fy, cx, cy = (float(x) for x in rest.split())
                intr = (fx, fy, cx, cy)
            elif word == "ring":
                camera_lines.append(kv)
            elif word == "sphere":
                primitives.append(Sphere(
                    int(kv["id"]), _vec(kv["center"]), float(kv["radius"]),
                    _vec(kv["color"]), background="background" in rest,
                    texture=float(kv.get("texture", 0.0)),
                    freq=float(kv.get("freq", 9.0))))
            elif word == "box":
                primitives.append(Box(
                    int(kv["id"]), _vec(kv["min"]), _vec(kv["max"]),
                    _vec(kv["color"]), background="background" in rest,
                    texture=float(kv.get("texture", 0.0)),
                    freq=float(kv.get("freq", 9.0))))
            elif word == "light":
                light_dir = _vec(kv["dir"])
                ambient = float(kv.get("ambient", ambient))
            elif word == "corrupt":
                corruptions.append(CorruptionRegion(
                    int(kv["view"]),
                    tuple(int(x) for x in kv["rect"].split(",")),
                    bias=float(kv.get("bias", 0.0)),
                    sigma=float(kv.get("sigma", 0.0)),
                    warp=float(kv.get("warp", 0.0))))
            elif word == "affine":
                affine = (float(kv["scale"]), float(kv["shift"]))
            else:
                raise ValueError(f"unknown directive {word!r}")
        except (KeyError, ValueError) as e:
            raise ValueError(f"scene line {lineno}: {e}") from e

    if width is None:
        raise ValueError("scene is missing an 'image <w> <h>' line")
    if intr is not None:
        intrinsics = Intrinsics(*intr, width, height)
    else:
        intrinsics = fov_intrinsics(width, height, fov)

    cameras = []
    for kv in camera_lines:
        cameras.extend(camera_ring(
            int(kv["views"]), float(kv["radius"]), float(kv["height"]),
            _vec(kv["target"]), intrinsics,
            start_deg=float(kv.get("start", 0.0)),
            end_deg=float(kv.get("end", 360.0))))
    cameras = [CameraView(i, c.intrinsics, c.pose)
               for i, c in enumerate(cameras)]

    return SceneSpec(tuple(primitives), tuple(cameras), tuple(corruptions),
                     affine=affine, light_dir=light_dir, ambient=ambient)


def load_scene(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_scene(f.read())
