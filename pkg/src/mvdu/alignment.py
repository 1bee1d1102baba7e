"""Scale-shift alignment of relative depth maps onto reference depths.

Solves min over (s, t) of sum((s * mono + t - reference)^2) on jointly valid
pixels via the closed-form 2x2 normal equations. An optional trim refit
drops the worst residual fraction once (default keeps plain L2).
"""

from dataclasses import dataclass

import numpy as np

from .camera import DepthMap
from .errors import InsufficientDataError, SingularSystemError

MIN_VALID_PIXELS = 32


@dataclass(frozen=True)
class ScaleShift:
    scale: float
    shift: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and np.isfinite(self.shift)):
            raise ValueError("scale/shift must be finite")


def _solve(mono, ref):
    a00 = float(np.dot(mono, mono))
    a01 = float(mono.sum())
    a11 = float(mono.size)
    b0 = float(np.dot(mono, ref))
    b1 = float(ref.sum())
    det = a00 * a11 - a01 * a01
    # det == n^2 * var(mono); vanishes for constant mono depth.
    if det <= 1e-12 * max(a00 * a11, 1.0):
        raise SingularSystemError("mono depth is (numerically) constant")
    s = (a11 * b0 - a01 * b1) / det
    t = (-a01 * b0 + a00 * b1) / det
    return s, t


def fit_scale_shift(mono, reference, valid_mask=None, trim_fraction=0.0):
    """Least-squares (s, t) mapping mono depths onto the reference.

    mono, reference: DepthMap or (h, w) arrays. Pixels participate when valid
    in both maps and in ``valid_mask`` (if given). Raises
    InsufficientDataError below 32 joint pixels and SingularSystemError for
    constant mono input; a fitted scale must come out positive.
    """
    if not 0.0 <= trim_fraction < 1.0:
        raise ValueError("trim_fraction must be in [0, 1)")
    mono_v, mono_ok = _as_depth(mono)
    ref_v, ref_ok = _as_depth(reference)
    joint = mono_ok & ref_ok
    if valid_mask is not None:
        joint = joint & np.asarray(valid_mask, dtype=bool)
    m = mono_v[joint].astype(np.float64)
    r = ref_v[joint].astype(np.float64)
    if m.size < MIN_VALID_PIXELS:
        raise InsufficientDataError(
            f"need >= {MIN_VALID_PIXELS} jointly valid pixels, got {m.size}")
    s, t = _solve(m, r)
    if trim_fraction > 0.0:
        residual = np.abs(s * m + t - r)
        keep = residual <= np.quantile(residual, 1.0 - trim_fraction)
        if keep.sum() < MIN_VALID_PIXELS:
            raise InsufficientDataError("trimming left too few pixels")
        s, t = _solve(m[keep], r[keep])
    if s <= 0:
        raise SingularSystemError(f"fit produced non-positive scale {s:.3g}")
    return ScaleShift(s, t)


def apply_scale_shift(mono, params):
    """Per-pixel s * d + t; non-positive results are marked invalid."""
    mono_v, mono_ok = _as_depth(mono)
    out = params.scale * mono_v.astype(np.float64) + params.shift
    valid = mono_ok & (out > 0)
    return DepthMap(np.where(valid, out, np.nan).astype(np.float32), valid)


def _as_depth(d):
    if isinstance(d, DepthMap):
        return np.asarray(d.values, dtype=np.float64), np.asarray(d.valid)
    arr = np.asarray(d, dtype=np.float64)
    return arr, np.isfinite(arr) & (arr > 0)
