"""Dataset and artifact IO.

All binary formats are little-endian with a 4-byte magic:
  MIDM depth (f32, NaN = invalid), MIIM mask (u16, 0 = unsegmented),
  MIUM uncertainty (f32), MIPC point cloud (f32 xyz), MISG sdf grid (f64).
RGB images are binary PPM (P6), cameras and configs are plain text. Readers
are strict: magic mismatch, truncation or dimension mismatch fail with the
offending filename.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraView, DepthMap, Intrinsics, Pose
from .errors import DatasetError

_HEADER = struct.Struct("<4sII")


def _read_exact(f, n, path, what):
    data = f.read(n)
    if len(data) != n:
        raise DatasetError(f"{path}: truncated {what} "
                           f"(wanted {n} bytes, got {len(data)})")
    return data


def _check_trailing(f, path):
    if f.read(1):
        raise DatasetError(f"{path}: trailing bytes after payload")


def _read_header(f, path, magic):
    raw = _read_exact(f, _HEADER.size, path, "header")
    got, w, h = _HEADER.unpack(raw)
    if got != magic:
        raise DatasetError(f"{path}: bad magic {got!r}, expected {magic!r}")
    return w, h


def write_depth(path, depth):
    values = np.where(depth.valid, depth.values, np.float32(np.nan))
    with open(path, "wb") as f:
        f.write(_HEADER.pack(b"MIDM", depth.width, depth.height))
        f.write(values.astype("<f4").tobytes())


def read_depth(path):
    with open(path, "rb") as f:
        w, h = _read_header(f, path, b"MIDM")
        raw = _read_exact(f, 4 * w * h, path, "depth payload")
        _check_trailing(f, path)
    values = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    return DepthMap.from_values(values)


def write_mask(path, mask):
    mask = np.asarray(mask, dtype=np.uint16)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(b"MIIM", mask.shape[1], mask.shape[0]))
        f.write(mask.astype("<u2").tobytes())


def read_mask(path):
    with open(path, "rb") as f:
        w, h = _read_header(f, path, b"MIIM")
        raw = _read_exact(f, 2 * w * h, path, "mask payload")
        _check_trailing(f, path)
    return np.frombuffer(raw, dtype="<u2").reshape(h, w).astype(np.uint16)


def write_uncertainty(path, umap):
    values = np.asarray(umap.values, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(b"MIUM", values.shape[1], values.shape[0]))
        f.write(values.astype("<f4").tobytes())


def read_uncertainty(path):
    from .uncertainty import UncertaintyMap

    with open(path, "rb") as f:
        w, h = _read_header(f, path, b"MIUM")
        raw = _read_exact(f, 4 * w * h, path, "uncertainty payload")
        _check_trailing(f, path)
    values = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    return UncertaintyMap(values.copy(), values > 0)


def write_cloud(path, points):
    points = np.asarray(points, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(b"MIPC")
        f.write(struct.pack("<I", points.shape[0]))
        f.write(points.astype("<f4").tobytes())


def read_cloud(path):
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != b"MIPC":
            raise DatasetError(f"{path}: bad magic {magic!r}, expected b'MIPC'")
        (count,) = struct.unpack("<I", _read_exact(f, 4, path, "count"))
        raw = _read_exact(f, 12 * count, path, "cloud payload")
        _check_trailing(f, path)
    return np.frombuffer(raw, dtype="<f4").reshape(count, 3).astype(np.float64)


def write_ppm(path, rgb):
    """rgb: (h, w, 3) float in [0, 1] or uint8."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    # Exactly one whitespace byte separates maxval from the payload, which
    # may itself start with whitespace-valued bytes.
    pos = 0
    fields = []
    while len(fields) < 4 and pos < len(data):
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if pos > start:
            fields.append(data[start:pos])
    if len(fields) < 4 or fields[0] != b"P6":
        raise DatasetError(f"{path}: not a binary P6 PPM")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise DatasetError(f"{path}: malformed PPM header") from e
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    payload = data[pos + 1:]
    if len(payload) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data "
                           f"({len(payload)} of {w * h * 3} bytes)")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def write_grid(path, grid):
    n = grid.resolution
    with open(path, "wb") as f:
        f.write(b"MISG")
        f.write(struct.pack("<I", n))
        f.write(np.asarray(grid.lo, dtype="<f8").tobytes())
        f.write(np.asarray(grid.hi, dtype="<f8").tobytes())
        f.write(struct.pack("<d", grid.beta))
        f.write(grid.sdf.astype("<f8").tobytes())
        f.write(grid.color.astype("<f8").tobytes())


def read_grid(path):
    from .rendering import SdfGrid

    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != b"MISG":
            raise DatasetError(f"{path}: bad magic {magic!r}, expected b'MISG'")
        (n,) = struct.unpack("<I", _read_exact(f, 4, path, "resolution"))
        lo = np.frombuffer(_read_exact(f, 24, path, "bounds"), dtype="<f8")
        hi = np.frombuffer(_read_exact(f, 24, path, "bounds"), dtype="<f8")
        (beta,) = struct.unpack("<d", _read_exact(f, 8, path, "beta"))
        sdf = np.frombuffer(_read_exact(f, 8 * n ** 3, path, "sdf"),
                            dtype="<f8").reshape(n, n, n)
        color = np.frombuffer(_read_exact(f, 24 * n ** 3, path, "color"),
                              dtype="<f8").reshape(n, n, n, 3)
        _check_trailing(f, path)
    return SdfGrid(sdf.copy(), color.copy(), beta, lo.copy(), hi.copy())


def write_cameras(path, views):
    lines = []
    for v in sorted(views, key=lambda v: v.view_id):
        k = v.intrinsics
        lines.append(f"view {v.view_id}")
        lines.append(f"K {float(k.fx)!r} {float(k.fy)!r} {float(k.cx)!r} "
                     f"{float(k.cy)!r} {k.width} {k.height}")
        mat = np.eye(4)
        mat[:3, :3] = v.pose.rotation
        mat[:3, 3] = v.pose.translation
        for row in mat:
            lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cameras(path):
    text = Path(path).read_text(encoding="utf-8")
    tokens = [ln.split() for ln in text.splitlines()
              if ln.strip() and not ln.startswith("#")]
    views = []
    i = 0
    try:
        while i < len(tokens):
            if tokens[i][0] != "view":
                raise DatasetError(f"{path}: expected 'view', got {tokens[i][0]!r}")
            vid = int(tokens[i][1])
            if tokens[i + 1][0] != "K":
                raise DatasetError(f"{path}: view {vid} is missing its K line")
            fx, fy, cx, cy = (float(x) for x in tokens[i + 1][1:5])
            w, h = int(tokens[i + 1][5]), int(tokens[i + 1][6])
            mat = np.array([[float(x) for x in tokens[i + 2 + r]]
                            for r in range(4)])
            if not np.allclose(mat[3], [0, 0, 0, 1], atol=1e-9):
                raise DatasetError(f"{path}: view {vid} last matrix row "
                                   "must be 0 0 0 1")
            pose = Pose(mat[:3, :3], mat[:3, 3])
            views.append(CameraView(vid, Intrinsics(fx, fy, cx, cy, w, h), pose))
            i += 6
    except (IndexError, ValueError) as e:
        raise DatasetError(f"{path}: malformed camera file ({e})") from e
    if not views:
        raise DatasetError(f"{path}: no views")
    return views


def write_config(path, mapping):
    lines = [f"{k} = {v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path):
    out = {}
    for lineno, raw in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_membership(path, instances, edges, clusters):
    """Persist the clustering stage: instance list, adjacency, membership."""
    lines = []
    index = {inst.key: i for i, inst in enumerate(instances)}
    for i, inst in enumerate(instances):
        lines.append(f"instance {i} {inst.view_id} {inst.mask_label}")
    for i, j in edges:
        lines.append(f"edge {i} {j}")
    for c in clusters:
        ids = " ".join(str(index[m.key]) for m in c.members)
        lines.append(f"cluster {c.cluster_id} {int(c.is_background)} {ids}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_membership(path):
    """Returns (rows, edges): rows are (cluster_id, view_id, label, is_bg)."""
    instances = {}
    edges = []
    rows = []
    for lineno, raw in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = raw.split()
        if not parts:
            continue
        try:
            if parts[0] == "instance":
                instances[int(parts[1])] = (int(parts[2]), int(parts[3]))
            elif parts[0] == "edge":
                edges.append((int(parts[1]), int(parts[2])))
            elif parts[0] == "cluster":
                cid, bg = int(parts[1]), bool(int(parts[2]))
                for idx in parts[3:]:
                    vid, label = instances[int(idx)]
                    rows.append((cid, vid, label, bg))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except (ValueError, KeyError, IndexError) as e:
            raise DatasetError(f"{path}:{lineno}: {e}") from e
    if not rows:
        raise DatasetError(f"{path}: no clusters")
    return rows, edges


@dataclass
class Dataset:
    root: Path
    views: list            # CameraView with rgb + mask attached
    mono: dict             # view_id -> DepthMap (monocular depths)
    gt: dict               # view_id -> DepthMap (ground truth, may be empty)
    background_labels: set
    config: dict


def _expect(path, diagnostics):
    if not path.exists():
        diagnostics.append(f"{path}: missing")
        return False
    return True


def load_dataset(root):
    """Strictly load a dataset directory; collects all diagnostics before
    failing so a broken dataset reports every problem at once."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    cam_path = root / "cameras.txt"
    if not cam_path.exists():
        raise DatasetError(f"{root}: no views (missing cameras.txt)")
    cameras = read_cameras(cam_path)

    config = {}
    cfg_path = root / "dataset.cfg"
    if cfg_path.exists():
        config = read_config(cfg_path)
    bg = set()
    if "background_labels" in config and config["background_labels"]:
        bg = {int(x) for x in str(config["background_labels"]).split(",")}

    diagnostics = []
    views = []
    mono = {}
    gt = {}
    for cam in cameras:
        vid = cam.view_id
        h, w = cam.intrinsics.height, cam.intrinsics.width
        rgb = mask = None
        p_rgb = root / f"rgb_{vid:04d}.ppm"
        p_depth = root / f"depth_{vid:04d}.midm"
        p_mask = root / f"mask_{vid:04d}.miim"
        p_gt = root / f"gt_depth_{vid:04d}.midm"
        try:
            if _expect(p_rgb, diagnostics):
                rgb = read_ppm(p_rgb)
                if rgb.shape[:2] != (h, w):
                    diagnostics.append(
                        f"{p_rgb}: dimensions {rgb.shape[1]}x{rgb.shape[0]} "
                        f"do not match camera {w}x{h}")
            if _expect(p_depth, diagnostics):
                dm = read_depth(p_depth)
                if (dm.height, dm.width) != (h, w):
                    diagnostics.append(f"{p_depth}: dimension mismatch")
                else:
                    mono[vid] = dm
            if _expect(p_mask, diagnostics):
                m = read_mask(p_mask)
                if m.shape != (h, w):
                    diagnostics.append(f"{p_mask}: dimension mismatch")
                else:
                    mask = m
            if p_gt.exists():
                gdm = read_depth(p_gt)
                if (gdm.height, gdm.width) != (h, w):
                    diagnostics.append(f"{p_gt}: dimension mismatch")
                else:
                    gt[vid] = gdm
        except DatasetError as e:
            diagnostics.append(str(e))
            continue
        if rgb is not None and mask is not None:
            views.append(CameraView(vid, cam.intrinsics, cam.pose,
                                    mask=mask, rgb=rgb))
    if diagnostics:
        raise DatasetError(f"{root}: dataset validation failed:\n  "
                           + "\n  ".join(diagnostics))
    return Dataset(root, views, mono, gt, bg, config)


def export_png16(path, values):
    """Write values in [0, 1] as a 16-bit grayscale PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    img = (arr * 65535.0).round().astype(np.uint16)
    Image.fromarray(img, mode="I;16").save(path)
