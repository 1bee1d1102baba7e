"""Command-line pipeline: gen, cluster, uncertainty, train, eval, export.

Every stage persists its outputs inside the dataset / run directory so
stages can be re-run and inspected independently; a missing upstream
artifact aborts with the stage to run first.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import dataio, scenes
from .alignment import apply_scale_shift, fit_scale_shift
from .camera import back_project_depth_map
from .clustering import (build_instance_graph, chamfer_distance, cluster_graph,
                         extract_view_instances, mark_background)
from .errors import MvduError
from .rendering import render_depth_map
from .training import TrainConfig, two_stage_train
from .uncertainty import compute_uncertainty_maps


def _fail(msg):
    raise SystemExit(f"error: {msg}")


def _require(path, stage):
    if not Path(path).exists():
        _fail(f"{path} not found; run '{stage}' first")


def _aligned_mono(ds):
    """Monocular depths aligned against the dataset's ground-truth depths
    (the stand-in reference when no rendered depths exist yet)."""
    aligned = {}
    for v in ds.views:
        mono = ds.mono[v.view_id]
        ref = ds.gt.get(v.view_id)
        if ref is None:
            aligned[v.view_id] = mono
            continue
        try:
            ss = fit_scale_shift(mono, ref)
            aligned[v.view_id] = apply_scale_shift(mono, ss)
        except MvduError:
            aligned[v.view_id] = mono
    return aligned


def cmd_gen(args):
    spec = scenes.load_scene(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rendered = scenes.render_ground_truth(spec)
    gt_depths = [r["depth"] for r in rendered]
    mono, _ = scenes.corrupt_depths(gt_depths, spec, seed=args.seed)

    dataio.write_cameras(out / "cameras.txt", spec.cameras)
    for vid, r in enumerate(rendered):
        dataio.write_ppm(out / f"rgb_{vid:04d}.ppm", r["rgb"])
        dataio.write_mask(out / f"mask_{vid:04d}.miim", r["mask"])
        dataio.write_depth(out / f"depth_{vid:04d}.midm", mono[vid])
        dataio.write_depth(out / f"gt_depth_{vid:04d}.midm", r["depth"])
    bg = ",".join(str(i) for i in sorted(spec.background_ids))
    dataio.write_config(out / "dataset.cfg", {
        "views": len(spec.cameras),
        "width": spec.cameras[0].intrinsics.width,
        "height": spec.cameras[0].intrinsics.height,
        "background_labels": bg,
        "seed": args.seed,
    })
    print(f"wrote {len(spec.cameras)} views to {out}")


def cmd_cluster(args):
    ds = dataio.load_dataset(args.data)
    aligned = _aligned_mono(ds)
    instances = extract_view_instances(ds.views, aligned)
    edges = build_instance_graph(instances, threshold=args.chamfer_threshold,
                                 seed=args.seed)
    clusters = cluster_graph(edges, instances)
    clusters = mark_background(clusters, ds.background_labels)
    root = Path(args.data)
    dataio.write_membership(root / "clusters.txt", instances, edges, clusters)
    for c in clusters:
        cloud = np.concatenate([m.cloud for m in c.members], axis=0) \
            if c.members else np.zeros((0, 3))
        dataio.write_cloud(root / f"cluster_{c.cluster_id:03d}.mipc", cloud)
    n_bg = sum(c.is_background for c in clusters)
    print(f"{len(instances)} instances -> {len(clusters)} clusters "
          f"({n_bg} background), {len(edges)} edges")


def cmd_uncertainty(args):
    root = Path(args.data)
    _require(root / "clusters.txt", "mvdu cluster")
    ds = dataio.load_dataset(args.data)
    membership, _ = dataio.read_membership(root / "clusters.txt")
    aligned = _aligned_mono(ds)
    instances = extract_view_instances(ds.views, aligned)
    from .training import _clusters_from_membership
    clusters = _clusters_from_membership(instances, membership)
    maps, info = compute_uncertainty_maps(
        ds.views, clusters, downsample_target=args.downsample_target,
        radius_mode=args.radius_mode, seed=args.seed)
    for vid, umap in sorted(maps.items()):
        dataio.write_uncertainty(root / f"uncertainty_{vid:04d}.mium", umap)
    for cid, stats in sorted(info.items()):
        print(f"cluster {cid}: {stats['fused_points']} pts, "
              f"obb volume {stats['obb_volume']:.4g}, radius {stats['radius']:.4g}")
    print(f"wrote {len(maps)} uncertainty maps to {root}")


def _train_config(args):
    mapping = {}
    if args.config:
        mapping.update(dataio.read_config(args.config))
    overrides = {
        "seed": args.seed, "stage1_steps": args.stage1_steps,
        "stage2_steps": args.stage2_steps, "resolution": args.resolution,
        "batch_size": args.batch_size, "radius_mode": args.radius_mode,
        "chamfer_threshold": args.chamfer_threshold,
        "downsample_target": args.downsample_target,
        "uncertainty_threshold": args.uncertainty_threshold,
        "ablation": args.ablation,
        "lambda1": args.lambda1, "lambda2": args.lambda2,
        "lambda3": args.lambda3, "lambda4": args.lambda4,
    }
    for key, value in overrides.items():
        if value is not None:
            mapping[key] = value
    return TrainConfig.from_mapping(mapping)


def _gt_cloud(ds, max_points=120_000, seed=0):
    pts = []
    for v in ds.views:
        gt = ds.gt.get(v.view_id)
        if gt is None:
            return None
        p, _ = back_project_depth_map(v, depth=gt)
        pts.append(p)
    cloud = np.concatenate(pts, axis=0)
    if cloud.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        cloud = cloud[np.sort(rng.choice(cloud.shape[0], max_points,
                                         replace=False))]
    return cloud


_METRIC_COLUMNS = ["stage", "step", "total", "color", "eikonal", "mask",
                   "depth", "normal", "sil_used", "sil_skipped", "beta",
                   "chamfer"]


def cmd_train(args):
    root = Path(args.data)
    _require(root / "clusters.txt", "mvdu cluster")
    ds = dataio.load_dataset(args.data)
    membership, _ = dataio.read_membership(root / "clusters.txt")
    cfg = _train_config(args)
    gt_cloud = _gt_cloud(ds, seed=cfg.seed)

    result = two_stage_train(ds.views, ds.mono, membership, cfg,
                             gt_cloud=gt_cloud)

    out = Path(args.out) if args.out else root / "run"
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_grid(out / "grid.misg", result.grid)
    dataio.write_cloud(out / "surface.mipc", result.surface_points)
    for vid, umap in sorted(result.maps.items()):
        dataio.write_uncertainty(out / f"uncertainty_{vid:04d}.mium", umap)
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_METRIC_COLUMNS,
                                extrasaction="ignore")
        writer.writeheader()
        for row in result.metrics:
            writer.writerow({k: row.get(k, "") for k in _METRIC_COLUMNS})
    dataio.write_config(out / "alignment.cfg", {
        f"view_{vid}": f"{ss.scale!r},{ss.shift!r}"
        for vid, ss in sorted(result.alignment.items())})
    if result.final_chamfer is not None:
        print(f"final chamfer to ground truth: {result.final_chamfer:.6f}")
    print(f"run artifacts written to {out}")


def _foreground_box(ds, margin):
    """AABB around the ground-truth foreground points, padded by margin."""
    pts = []
    for v in ds.views:
        gt = ds.gt.get(v.view_id)
        if gt is None or v.mask is None:
            continue
        fg = (v.mask > 0) & ~np.isin(v.mask, sorted(ds.background_labels))
        p, _ = back_project_depth_map(v, depth=gt, select=fg)
        if p.shape[0]:
            pts.append(p)
    if not pts:
        return None, None
    allp = np.concatenate(pts, axis=0)
    return allp, (allp.min(axis=0) - margin, allp.max(axis=0) + margin)


def cmd_eval(args):
    root = Path(args.data)
    run = Path(args.run) if args.run else root / "run"
    _require(run / "surface.mipc", "mvdu train")
    ds = dataio.load_dataset(args.data)
    surface = dataio.read_cloud(run / "surface.mipc")

    rows = []
    gt_cloud = _gt_cloud(ds, seed=args.seed)
    if gt_cloud is not None and surface.shape[0]:
        rows.append(("chamfer_full", "all",
                     chamfer_distance(surface, gt_cloud)))
        fg_pts, box = _foreground_box(ds, margin=args.fg_margin)
        if fg_pts is not None:
            lo, hi = box
            inside = ((surface >= lo) & (surface <= hi)).all(axis=1)
            if inside.any():
                rows.append(("chamfer_foreground", "all",
                             chamfer_distance(surface[inside], fg_pts)))

    # Uncertainty vs true (aligned) depth error, per view.
    from scipy.stats import spearmanr
    aligned = _aligned_mono(ds)
    for v in ds.views:
        mium = run / f"uncertainty_{v.view_id:04d}.mium"
        if not mium.exists():
            mium = root / f"uncertainty_{v.view_id:04d}.mium"
        if not mium.exists():
            continue
        umap = dataio.read_uncertainty(mium)
        gt = ds.gt.get(v.view_id)
        if gt is None:
            continue
        al = aligned[v.view_id]
        fg = (v.mask > 0) & ~np.isin(v.mask, sorted(ds.background_labels))
        ok = fg & gt.valid & al.valid
        if ok.sum() < 8:
            continue
        err = np.abs(al.values[ok] - gt.values[ok])
        rho = spearmanr(umap.values[ok], err).statistic
        rows.append(("uncertainty_error_spearman", f"view_{v.view_id}",
                     float(rho)))
        rows.append(("mean_uncertainty", f"view_{v.view_id}",
                     float(umap.values[fg].mean())))

    out_path = Path(args.out) if args.out else run / "eval.csv"
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "scope", "value"])
        for metric, scope, value in rows:
            writer.writerow([metric, scope, repr(float(value))])
    for metric, scope, value in rows:
        print(f"{metric:32s} {scope:10s} {value:.6f}")
    print(f"metrics written to {out_path}")


def cmd_export(args):
    root = Path(args.data)
    run = Path(args.run) if args.run else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataio.load_dataset(args.data)
    count = 0
    for v in ds.views:
        vid = v.view_id
        sources = []
        if run is not None:
            sources.append(run / f"uncertainty_{vid:04d}.mium")
        sources.append(root / f"uncertainty_{vid:04d}.mium")
        for src in sources:
            if src.exists():
                umap = dataio.read_uncertainty(src)
                dataio.export_png16(out / f"uncertainty_{vid:04d}.png",
                                    umap.values)
                count += 1
                break
        mono = ds.mono.get(vid)
        if mono is not None:
            finite = mono.values[mono.valid]
            top = float(finite.max()) if finite.size else 1.0
            dataio.export_png16(out / f"depth_{vid:04d}.png",
                                np.where(mono.valid, mono.values / top, 0.0))
            count += 1
    print(f"exported {count} images to {out}")


def build_parser():
    p = argparse.ArgumentParser(
        prog="mvdu",
        description="Multi-view depth uncertainty pipeline on synthetic scenes")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic scene into a dataset")
    g.add_argument("--spec", required=True, help="scene description file")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("cluster", help="cross-view instance clustering")
    c.add_argument("--data", required=True)
    c.add_argument("--chamfer-threshold", type=float, default=0.05)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cluster)

    u = sub.add_parser("uncertainty", help="per-view uncertainty maps")
    u.add_argument("--data", required=True)
    u.add_argument("--radius-mode", choices=["paper", "cbrt"], default="paper")
    u.add_argument("--downsample-target", type=int, default=30000)
    u.add_argument("--seed", type=int, default=0)
    u.set_defaults(func=cmd_uncertainty)

    t = sub.add_parser("train", help="two-stage guided optimization")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default=None, help="run directory (default data/run)")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--stage1-steps", type=int, default=None)
    t.add_argument("--stage2-steps", type=int, default=None)
    t.add_argument("--resolution", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--radius-mode", choices=["paper", "cbrt"], default=None)
    t.add_argument("--chamfer-threshold", type=float, default=None)
    t.add_argument("--downsample-target", type=int, default=None)
    t.add_argument("--uncertainty-threshold", type=float, default=None)
    t.add_argument("--ablation", default=None,
                   choices=["base", "uncertainty", "sampling", "full"])
    t.add_argument("--lambda1", type=float, default=None, help="eikonal weight")
    t.add_argument("--lambda2", type=float, default=None, help="mask weight")
    t.add_argument("--lambda3", type=float, default=None, help="depth weight")
    t.add_argument("--lambda4", type=float, default=None, help="normal weight")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="chamfer + uncertainty correlation metrics")
    e.add_argument("--data", required=True)
    e.add_argument("--run", default=None)
    e.add_argument("--out", default=None, help="CSV path (default run/eval.csv)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--fg-margin", type=float, default=0.1)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="PNG visualizations")
    x.add_argument("--data", required=True)
    x.add_argument("--run", default=None)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except MvduError as e:
        _fail(str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
