"""Uncertainty-guided two-stage scene optimization.

Stage one fits the SDF grid with photometric + uniformly weighted depth
supervision. At the boundary, low-resolution depth renders align the
monocular depths per view, the per-instance uncertainty maps are computed,
and stage two continues with uncertainty-weighted priors, guided ray
sampling and the cross-view instance mask constraint.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import camera, kernels
from .alignment import ScaleShift, apply_scale_shift, fit_scale_shift
from .clustering import extract_view_instances
from .errors import InsufficientDataError, SingularSystemError, TrainingDivergenceError
from .rendering import (SdfGrid, extract_surface_points, render_depth_map,
                        render_rays, render_rays_backward, weight_backward,
                        sdf_to_density_grads)
from .uncertainty import UncertaintyMap, compute_uncertainty_maps

log = logging.getLogger(__name__)

SAMPLE_FLOOR = 0.05   # added to uncertainty so zero-U pixels keep being drawn
_NORM_EPS = 1e-9

ABLATIONS = ("base", "uncertainty", "sampling", "full")


@dataclass(frozen=True)
class LossWeights:
    eikonal: float = 0.1
    mask: float = 0.4
    depth: float = 0.5
    normal: float = 0.05

    def __post_init__(self):
        if min(self.eikonal, self.mask, self.depth, self.normal) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    resolution: int = 48
    stage1_steps: int = 2000
    stage2_steps: int = 3000
    batch_size: int = 512
    num_samples: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.1
    beta_lr_scale: float = 0.02   # beta gradients are large; damp its lr
    beta_init: float = 0.1
    beta_floor: float = 1e-3
    beta_cap: float = 2.0
    weights: LossWeights = field(default_factory=LossWeights)
    chamfer_threshold: float = 0.05
    radius_mode: str = "paper"
    downsample_target: int = 30000
    uncertainty_threshold: float = 0.5
    uncertainty_gate: bool = False
    align_factor: int = 4          # stage-boundary renders at 1/factor res
    eikonal_points: int = 256
    nearby_max_angle_deg: float = 45.0
    ablation: str = "full"
    init: str = "tsdf"            # tsdf | sphere
    log_every: int = 100

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.init not in ("tsdf", "sphere"):
            raise ValueError("init must be 'tsdf' or 'sphere'")

    @classmethod
    def from_mapping(cls, mapping):
        """Build a config from a flat key=value mapping (strings allowed)."""
        kwargs = {}
        weights = {}
        lam = {"lambda1": "eikonal", "lambda2": "mask",
               "lambda3": "depth", "lambda4": "normal"}
        for key, value in mapping.items():
            if key in lam:
                weights[lam[key]] = float(value)
                continue
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown config key {key!r}")
            target = cls.__dataclass_fields__[key].type
            if target in (bool, "bool"):
                value = str(value).lower() in ("1", "true", "yes", "on")
            elif target in (int, "int"):
                value = int(value)
            elif target in (float, "float"):
                value = float(value)
            elif target in (str, "str"):
                value = str(value)
            else:
                raise ValueError(f"config key {key!r} cannot be set from text")
            kwargs[key] = value
        if weights:
            kwargs["weights"] = LossWeights(**weights)
        return cls(**kwargs)


def sample_rays(uncertainty_maps, masks, batch_size, seed):
    """Draw (view, u, v) pixels: per-instance quotas by mask area, pixels
    within an instance by probability proportional to uncertainty + 0.05.

    uncertainty_maps / masks: map view_id -> UncertaintyMap / label array.
    Instances are each view's nonzero-label regions. Quotas use largest
    remainder, so exact area ratios yield exact quota ratios.
    """
    rng = np.random.default_rng(seed)
    regions = []
    for vid in sorted(masks):
        labels = np.unique(masks[vid])
        for label in labels[labels > 0]:
            vs, us = np.nonzero(masks[vid] == label)
            regions.append((vid, int(label), us, vs))
    if not regions:
        raise ValueError("no mask pixels to sample from")

    areas = np.array([r[2].size for r in regions], dtype=np.float64)
    share = batch_size * areas / areas.sum()
    quotas = np.floor(share).astype(np.int64)
    short = batch_size - int(quotas.sum())
    if short > 0:
        order = np.argsort(-(share - quotas), kind="stable")
        quotas[order[:short]] += 1

    out = np.empty((batch_size, 3), dtype=np.int64)
    row = 0
    for (vid, _, us, vs), quota in zip(regions, quotas):
        if quota == 0:
            continue
        umap = uncertainty_maps[vid]
        values = umap.values if isinstance(umap, UncertaintyMap) else umap
        prob = np.asarray(values, dtype=np.float64)[vs, us] + SAMPLE_FLOOR
        prob = prob / prob.sum()
        pick = rng.choice(us.size, size=quota, replace=True, p=prob)
        out[row:row + quota, 0] = vid
        out[row:row + quota, 1] = us[pick]
        out[row:row + quota, 2] = vs[pick]
        row += quota
    return out


def color_loss(rendered, target):
    """Mean per-ray L1 color error; returns (loss, d/d rendered)."""
    diff = rendered - target
    n = max(1, rendered.shape[0])
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def adaptive_depth_loss(rendered, target, u, valid=None):
    """(1 - U)-weighted L1 depth error, mean over valid pixels.

    Returns (loss, d/d rendered). ``gate=None``: pass weights directly via
    precomputed ``u``; fully uncertain pixels contribute nothing.
    """
    if valid is None:
        valid = np.ones(rendered.shape[0], dtype=bool)
    w = (1.0 - np.asarray(u, dtype=np.float64)) * valid
    n = max(1, int(valid.sum()))
    diff = rendered - target
    loss = float((w * np.abs(np.where(valid, diff, 0.0))).sum() / n)
    grad = w * np.sign(np.where(valid, diff, 0.0)) / n
    return loss, grad


def adaptive_normal_loss(rendered, target, u, valid=None):
    """(1 - U)-weighted L1 + angular normal error, mean over valid pixels.

    target rows are expected unit length; returns (loss, d/d rendered).
    """
    if valid is None:
        valid = np.ones(rendered.shape[0], dtype=bool)
    w = (1.0 - np.asarray(u, dtype=np.float64)) * valid
    n = max(1, int(valid.sum()))
    diff = np.where(valid[:, None], rendered - target, 0.0)
    cos = (rendered * target).sum(axis=1)
    loss = float((w * (np.abs(diff).sum(axis=1)
                       + np.where(valid, 1.0 - cos, 0.0))).sum() / n)
    grad = w[:, None] * (np.sign(diff) - np.where(valid[:, None], target, 0.0)) / n
    return loss, grad


def eikonal_loss(grid, pts):
    """mean (||grad SDF|| - 1)^2 at ``pts``; returns (loss, grad_sdf)."""
    pts = np.asarray(pts, dtype=np.float64)
    n = max(1, pts.shape[0])
    g = grid.sdf_gradient(pts)
    norm = np.sqrt((g * g).sum(axis=1) + _NORM_EPS ** 2)
    loss = float(((norm - 1.0) ** 2).mean())
    d_g = 2.0 * (norm - 1.0)[:, None] * g / norm[:, None] / n
    gpts = grid.world_to_grid(pts)
    h = grid.voxel_size
    grad_sdf = np.zeros_like(grid.sdf)
    for a in range(3):
        step = np.zeros(3)
        step[a] = 1.0
        coeff = d_g[:, a] / (2 * h[a])
        grad_sdf += kernels.trilerp_scatter(grid.sdf.shape, gpts + step, coeff)
        grad_sdf -= kernels.trilerp_scatter(grid.sdf.shape, gpts - step, coeff)
    return loss, grad_sdf


def bilinear_sample(image, uv):
    """Bilinear interpolation of an (h, w, c) image at float pixel coords."""
    h, w = image.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    return (image[v0, u0] * (1 - fu) * (1 - fv)
            + image[v0, u0 + 1] * fu * (1 - fv)
            + image[v0 + 1, u0] * (1 - fu) * fv
            + image[v0 + 1, u0 + 1] * fu * fv)


def mask_constraint_loss(grid, ref_view, nearby_view, nearby_mask, pixels,
                         num_samples=64, rng=None):
    """Cross-view silhouette term for rays from a high-uncertainty region.

    Ray samples are projected into ``nearby_view``; only samples landing
    inside that view's mask for the same instance contribute, with the
    nearby view's (bilinearly interpolated) colors composited by the ray's
    own opacities. The result is compared L1 against the reference view's
    ground-truth color. Rays with no sample in the mask are skipped.

    Returns (loss, grad_sdf, grad_beta, n_used, n_skipped).
    """
    pixels = np.asarray(pixels, dtype=np.int64)
    origin, dirs, _ = camera.generate_rays(ref_view, pixels.astype(np.float64))
    out = render_rays(grid, origin[None, :], dirs, num_samples=num_samples,
                      rng=rng, with_normals=False, keep_cache=True)
    cache = out.cache
    nr, m = cache["nr"], cache["m"]

    uv, _, in_front = camera.project(nearby_view, cache["pts"])
    w_img = nearby_view.intrinsics.width
    h_img = nearby_view.intrinsics.height
    px = np.round(np.where(in_front, uv[:, 0], -1.0)).astype(np.int64)
    py = np.round(np.where(in_front, uv[:, 1], -1.0)).astype(np.int64)
    in_img = in_front & (px >= 0) & (px < w_img) & (py >= 0) & (py < h_img)
    indicator = np.zeros(nr * m)
    sel = np.nonzero(in_img)[0]
    indicator[sel] = nearby_mask[py[sel], px[sel]].astype(np.float64)

    warped = np.zeros((nr * m, 3))
    warped[sel] = bilinear_sample(nearby_view.rgb, uv[sel])
    eff_color = (indicator[:, None] * warped).reshape(nr, m, 3)

    used = (indicator.reshape(nr, m).sum(axis=1) > 0) & out.hit
    n_used = int(used.sum())
    n_skipped = nr - n_used
    if n_used == 0:
        return 0.0, np.zeros_like(grid.sdf), 0.0, 0, n_skipped

    sil_color = (cache["weights"][..., None] * eff_color).sum(axis=1)
    gt = ref_view.rgb[pixels[:, 1], pixels[:, 0]]
    diff = sil_color - gt
    loss = float(np.abs(diff[used]).sum() / n_used)
    d_color = np.sign(diff) * used[:, None] / n_used

    d_w = (eff_color * d_color[:, None, :]).sum(axis=2)
    d_sigma = weight_backward(cache["alpha"], cache["trans"], cache["weights"],
                              d_w, cache["span_ok"], cache["delta"],
                              cache["sigma"])
    _, ds_dsdf, ds_dbeta = sdf_to_density_grads(cache["s"], grid.beta)
    gpts = grid.world_to_grid(cache["pts"])
    grad_sdf = kernels.trilerp_scatter(grid.sdf.shape, gpts,
                                       (d_sigma * ds_dsdf).reshape(-1))
    grad_beta = float((d_sigma * ds_dbeta).sum())
    return loss, grad_sdf, grad_beta, n_used, n_skipped


def total_loss(components, weights):
    """Weighted sum per the training objective; rejects non-finite parts.

    components: dict with keys color, eikonal, mask, depth, normal
    (missing keys count as zero).
    """
    lam = {"color": 1.0, "eikonal": weights.eikonal, "mask": weights.mask,
           "depth": weights.depth, "normal": weights.normal}
    total = 0.0
    for name, scale in lam.items():
        value = float(components.get(name, 0.0))
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"loss component {name!r} is {value}")
        total += scale * value
    return total


@dataclass
class TrainResult:
    grid: SdfGrid
    maps: dict                 # view_id -> UncertaintyMap
    alignment: dict            # view_id -> ScaleShift
    aligned_depths: dict       # view_id -> DepthMap
    metrics: list              # per-logged-step dicts
    uncertainty_info: dict
    surface_points: np.ndarray
    final_chamfer: float | None = None


class _Momentum:
    def __init__(self, lr, momentum):
        self.lr = lr
        self.momentum = momentum
        self.buffers = {}

    def step(self, name, param, grad):
        buf = self.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(grad) if isinstance(grad, np.ndarray) else 0.0
        buf = self.momentum * buf + grad
        self.buffers[name] = buf
        return param - self.lr * buf


def select_nearby_views(views, max_angle_deg):
    """For each view, the other view with the closest optical axis (within
    the angle budget); None when every other view is too far."""
    nearby = {}
    limit = math.cos(math.radians(max_angle_deg))
    for v in views:
        best = None
        best_cos = limit
        for other in views:
            if other.view_id == v.view_id:
                continue
            c = float(np.dot(v.optical_axis, other.optical_axis))
            if c > best_cos:
                best_cos = c
                best = other.view_id
        nearby[v.view_id] = best
    return nearby


def _zero_maps(views):
    return {v.view_id: UncertaintyMap(
        np.zeros((v.intrinsics.height, v.intrinsics.width), dtype=np.float32),
        np.zeros((v.intrinsics.height, v.intrinsics.width), dtype=bool))
        for v in views}


def tsdf_init(views, depths, resolution, lo, hi, beta, trunc_voxels=3.0):
    """SDF grid warm start by truncated signed-distance fusion of the depth
    maps. Unobserved nodes (behind every observed surface or outside all
    frusta) start solid; the optimization refines from there."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    trunc = trunc_voxels * float(np.min((hi - lo) / (resolution - 1)))

    acc = np.zeros(nodes.shape[0])
    weight = np.zeros(nodes.shape[0])
    for view in views:
        dm = depths[view.view_id]
        uv, z, in_front = camera.project(view, nodes)
        w_img, h_img = view.intrinsics.width, view.intrinsics.height
        px = np.floor(np.where(in_front, uv[:, 0], -1)).astype(np.int64)
        py = np.floor(np.where(in_front, uv[:, 1], -1)).astype(np.int64)
        ok = in_front & (px >= 0) & (px < w_img) & (py >= 0) & (py < h_img)
        ok[ok] &= dm.valid[py[ok], px[ok]]
        obs = np.zeros(nodes.shape[0])
        obs[ok] = dm.values[py[ok], px[ok]].astype(np.float64) - z[ok]
        # Free space and the near-surface band contribute; far-behind does not.
        use = ok & (obs > -trunc)
        acc[use] += np.clip(obs[use], -trunc, trunc)
        weight[use] += 1.0
    sdf = np.where(weight > 0, acc / np.maximum(weight, 1), -trunc)
    col = np.full((resolution,) * 3 + (3,), 0.5)
    return SdfGrid(sdf.reshape(resolution, resolution, resolution), col,
                   beta, lo, hi)


def scene_bounds_from_depths(views, depths, margin=0.08):
    """World AABB of the back-projected depths, padded by ``margin``."""
    pts = []
    for v in views:
        p, _ = camera.back_project_depth_map(v, depth=depths[v.view_id])
        if p.shape[0]:
            pts.append(p)
    if not pts:
        raise ValueError("no valid depth points to bound the scene")
    allp = np.concatenate(pts, axis=0)
    lo = allp.min(axis=0)
    hi = allp.max(axis=0)
    pad = (hi - lo) * margin + 1e-6
    return lo - pad, hi + pad


class Trainer:
    """Runs the two-stage optimization for one scene."""

    def __init__(self, views, mono_depths, membership, config, normals=None):
        """
        views: CameraViews carrying rgb + mask.
        mono_depths: view_id -> DepthMap (raw monocular depths).
        membership: iterable of (cluster_id, view_id, mask_label,
            is_background) rows from the clustering stage.
        normals: optional view_id -> (h, w, 3) target normal maps.
        """
        self.views = sorted(views, key=lambda v: v.view_id)
        self.by_id = {v.view_id: v for v in self.views}
        self.mono = dict(mono_depths)
        self.membership = [tuple(row) for row in membership]
        self.cfg = config
        self.normals = normals or {}
        self.rng = np.random.default_rng(config.seed)
        self.masks = {v.view_id: np.asarray(v.mask) for v in self.views}
        self.metrics = []
        self.sil_rng = np.random.default_rng(
            np.random.SeedSequence([abs(int(config.seed)) + 1, 77]))

        self.bg_labels = {}
        self.label_to_cluster = {}
        bg_clusters = {cid for cid, _, _, bg in self.membership if bg}
        for cid, vid, label, _ in self.membership:
            self.label_to_cluster[(vid, label)] = cid
            if cid in bg_clusters:
                self.bg_labels.setdefault(vid, set()).add(label)

        lo, hi = scene_bounds_from_depths(self.views, self.mono)
        if config.init == "tsdf":
            self.grid = tsdf_init(self.views, self.mono, config.resolution,
                                  lo, hi, config.beta_init)
        else:
            self.grid = SdfGrid.sphere_init(config.resolution, lo, hi,
                                            beta=config.beta_init)
        self.nearby = select_nearby_views(self.views, config.nearby_max_angle_deg)

    # ---------------- batch assembly ----------------

    def _gather_batch(self, maps, guided):
        cfg = self.cfg
        sample_maps = maps if guided else _zero_maps(self.views)
        seed = int(self.rng.integers(0, 2 ** 31))
        pix = sample_rays(sample_maps, self.masks, cfg.batch_size, seed)

        origins = np.empty((cfg.batch_size, 3))
        dirs = np.empty((cfg.batch_size, 3))
        z_scale = np.empty(cfg.batch_size)
        rgb = np.empty((cfg.batch_size, 3))
        depth_t = np.empty(cfg.batch_size)
        depth_ok = np.zeros(cfg.batch_size, dtype=bool)
        u_val = np.zeros(cfg.batch_size)
        nrm = np.zeros((cfg.batch_size, 3))
        nrm_ok = np.zeros(cfg.batch_size, dtype=bool)

        for vid in np.unique(pix[:, 0]):
            rows = np.nonzero(pix[:, 0] == vid)[0]
            view = self.by_id[vid]
            uv = pix[rows, 1:3].astype(np.float64)
            o, d, zs = camera.generate_rays(view, uv)
            origins[rows] = o
            dirs[rows] = d
            z_scale[rows] = zs
            us, vs = pix[rows, 1], pix[rows, 2]
            rgb[rows] = view.rgb[vs, us]
            dm = self.aligned.get(vid, self.mono[vid])
            depth_t[rows] = np.where(dm.valid[vs, us], dm.values[vs, us], 0.0)
            depth_ok[rows] = dm.valid[vs, us]
            umap = maps[vid]
            u_val[rows] = umap.values[vs, us]
            if vid in self.normals:
                nrm[rows] = self.normals[vid][vs, us]
                nrm_ok[rows] = np.linalg.norm(nrm[rows], axis=1) > 0.5
        return pix, origins, dirs, z_scale, rgb, depth_t, depth_ok, u_val, nrm, nrm_ok

    # ---------------- one optimization step ----------------

    def _step(self, opt, maps, stage, use_sil, guided):
        cfg = self.cfg
        grid = self.grid
        batch = self._gather_batch(maps, guided)
        (pix, origins, dirs, z_scale, rgb, depth_t,
         depth_ok, u_val, nrm, nrm_ok) = batch

        out = render_rays(grid, origins, dirs, num_samples=cfg.num_samples,
                          rng=self.rng, with_normals=True, keep_cache=True)

        l_color, d_color = color_loss(out.color, rgb)
        rendered_z = out.depth * z_scale
        u_eff = u_val if not cfg.uncertainty_gate else \
            1.0 - (u_val <= cfg.uncertainty_threshold).astype(np.float64)
        l_depth, d_z = adaptive_depth_loss(rendered_z, depth_t, u_eff, depth_ok)
        d_depth = d_z * z_scale * cfg.weights.depth
        if nrm_ok.any():
            l_norm, d_n = adaptive_normal_loss(out.normal, nrm, u_eff, nrm_ok)
            d_normal = d_n * cfg.weights.normal
        else:
            l_norm = 0.0
            d_normal = None

        g_sdf, g_col, g_beta = render_rays_backward(
            grid, out.cache, d_color=d_color,
            d_depth=d_depth, d_normal=d_normal)

        eik_pts = grid.lo + (grid.hi - grid.lo) * self.rng.uniform(
            0.04, 0.96, size=(cfg.eikonal_points, 3))
        l_eik, g_eik = eikonal_loss(grid, eik_pts)
        g_sdf += cfg.weights.eikonal * g_eik

        l_sil = 0.0
        sil_used = sil_skipped = 0
        if use_sil and cfg.weights.mask > 0:
            l_sil, sil_used, sil_skipped, sil_beta = self._sil_step(
                maps, g_sdf_out=g_sdf)
            g_beta += sil_beta

        components = {"color": l_color, "eikonal": l_eik, "mask": l_sil,
                      "depth": l_depth, "normal": l_norm}
        total = total_loss(components, cfg.weights)

        self.grid.sdf = opt.step("sdf", grid.sdf, g_sdf)
        self.grid.color = np.clip(
            opt.step("color", grid.color, g_col), 0.0, 1.0)
        self.grid.beta = min(cfg.beta_cap, max(
            cfg.beta_floor,
            opt.step("beta", grid.beta, cfg.beta_lr_scale * g_beta)))
        return components, total, (sil_used, sil_skipped)

    def _sil_step(self, maps, g_sdf_out):
        """One silhouette pool: rays from high-uncertainty pixels, grouped
        by (reference view, cluster); gradients accumulate into g_sdf_out."""
        cfg = self.cfg
        candidates = []
        for v in self.views:
            if self.nearby.get(v.view_id) is None:
                continue
            umap = maps[v.view_id].values
            high = umap > cfg.uncertainty_threshold
            mask = self.masks[v.view_id]
            bg = self.bg_labels.get(v.view_id, set())
            fg = (mask > 0) & ~np.isin(mask, sorted(bg))
            vs, us = np.nonzero(high & fg)
            if us.size:
                candidates.append((v.view_id,
                                   np.stack([us, vs], axis=1)))
        if not candidates:
            return 0.0, 0, 0, 0.0
        all_px = np.concatenate([np.concatenate(
            [np.full((p.shape[0], 1), vid), p], axis=1)
            for vid, p in candidates], axis=0)
        draw = self.sil_rng.choice(all_px.shape[0], size=cfg.batch_size,
                                   replace=True)
        pool = all_px[draw]

        loss_sum = 0.0
        used_total = skipped_total = 0
        beta_grad = 0.0
        groups = {}
        for vid, u, v in pool:
            label = self.masks[vid][v, u]
            cid = self.label_to_cluster.get((vid, int(label)))
            if cid is None:
                continue
            groups.setdefault((int(vid), cid), []).append((u, v))

        for (vid, cid), px in groups.items():
            ref = self.by_id[vid]
            nb_id = self.nearby[vid]
            nb = self.by_id[nb_id]
            nb_label = None
            for (v2, lab), c2 in self.label_to_cluster.items():
                if v2 == nb_id and c2 == cid:
                    nb_label = lab
                    break
            if nb_label is None:
                skipped_total += len(px)
                continue
            nb_mask = self.masks[nb_id] == nb_label
            loss, g_sdf, g_beta, used, skipped = mask_constraint_loss(
                self.grid, ref, nb, nb_mask, np.asarray(px),
                num_samples=cfg.num_samples, rng=self.rng)
            weight = len(px) / cfg.batch_size
            loss_sum += loss * weight
            g_sdf_out += cfg.weights.mask * weight * g_sdf
            beta_grad += cfg.weights.mask * weight * g_beta
            used_total += used
            skipped_total += skipped
        return loss_sum, used_total, skipped_total, beta_grad

    # ---------------- stage drivers ----------------

    def _run_stage(self, stage, steps, opt, maps, use_sil, guided):
        for i in range(steps):
            try:
                components, total, sil_counts = self._step(
                    opt, maps, stage, use_sil, guided)
            except TrainingDivergenceError as e:
                raise TrainingDivergenceError(
                    f"stage {stage}, step {i}: {e}") from e
            if i % self.cfg.log_every == 0 or i == steps - 1:
                row = {"stage": stage, "step": i, "total": total}
                row.update(components)
                row["sil_used"], row["sil_skipped"] = sil_counts
                row["beta"] = self.grid.beta
                self.metrics.append(row)
                log.debug("stage %d step %d total %.4f", stage, i, total)

    def align_and_estimate(self):
        """Stage boundary: align monocular depths against rendered low-res
        depths, rebuild instance clouds, estimate uncertainty maps."""
        cfg = self.cfg
        k = cfg.align_factor
        self.alignment = {}
        self.aligned = {}
        for v in self.views:
            rendered = render_depth_map(self.grid, v, scale=1.0 / k,
                                        num_samples=cfg.num_samples)
            mono = self.mono[v.view_id]
            h_lr, w_lr = rendered.values.shape
            mono_lr = mono.values[::k, ::k][:h_lr, :w_lr]
            mono_lr_ok = mono.valid[::k, ::k][:h_lr, :w_lr]
            try:
                ss = fit_scale_shift(
                    np.where(mono_lr_ok, mono_lr, np.nan),
                    np.where(rendered.valid, rendered.values, np.nan))
            except (InsufficientDataError, SingularSystemError) as e:
                log.warning("view %d alignment failed (%s), using identity",
                            v.view_id, e)
                ss = ScaleShift(1.0, 0.0)
            self.alignment[v.view_id] = ss
            self.aligned[v.view_id] = apply_scale_shift(mono, ss)

        if self.cfg.ablation == "base":
            self.maps = _zero_maps(self.views)
            self.uncertainty_info = {}
            return

        instances = extract_view_instances(
            self.views, self.aligned)
        clusters = _clusters_from_membership(instances, self.membership)
        self.maps, self.uncertainty_info = compute_uncertainty_maps(
            self.views, clusters, downsample_target=cfg.downsample_target,
            radius_mode=cfg.radius_mode, seed=cfg.seed)

    def run(self, gt_cloud=None):
        cfg = self.cfg
        opt = _Momentum(cfg.lr, cfg.momentum)
        self.aligned = {}
        zero = _zero_maps(self.views)
        self._run_stage(1, cfg.stage1_steps, opt, zero,
                        use_sil=False, guided=False)

        self.align_and_estimate()

        opt = _Momentum(cfg.lr * cfg.lr_decay, cfg.momentum)
        abl = cfg.ablation
        loss_maps = self.maps if abl != "base" else zero
        guided = abl in ("sampling", "full")
        use_sil = abl == "full"
        self._run_stage(2, cfg.stage2_steps, opt, loss_maps,
                        use_sil=use_sil, guided=guided)

        surface = extract_surface_points(self.grid)
        final_chamfer = None
        if gt_cloud is not None and surface.shape[0]:
            from .clustering import chamfer_distance
            final_chamfer = chamfer_distance(surface, gt_cloud)
            self.metrics.append({"stage": 2, "step": cfg.stage2_steps,
                                 "total": float("nan"),
                                 "chamfer": final_chamfer})
        return TrainResult(self.grid, self.maps, self.alignment, self.aligned,
                           self.metrics, self.uncertainty_info, surface,
                           final_chamfer)


def _clusters_from_membership(instances, membership):
    """Reattach freshly built ViewInstances to persisted cluster rows."""
    from .clustering import InstanceCluster

    by_key = {inst.key: inst for inst in instances}
    rows = {}
    bg = {}
    for cid, vid, label, is_bg in membership:
        rows.setdefault(cid, []).append((vid, label))
        bg[cid] = bool(is_bg) or bg.get(cid, False)
    clusters = []
    for cid in sorted(rows):
        members = tuple(by_key[key] for key in sorted(rows[cid])
                        if key in by_key)
        if members:
            clusters.append(InstanceCluster(cid, members, is_background=bg[cid]))
    return clusters


def two_stage_train(views, mono_depths, membership, config, normals=None,
                    gt_cloud=None):
    """Convenience wrapper: build a Trainer and run both stages."""
    trainer = Trainer(views, mono_depths, membership, config, normals=normals)
    return trainer.run(gt_cloud=gt_cloud)
