"""Kernel backend selection.

The compiled extension (``_native``) is used when present; otherwise the
numpy fallback (``_fallback``) is selected. Set ``MVDU_KERNELS=python`` to
force the fallback, ``MVDU_KERNELS=native`` to require the extension.
"""

import logging
import os

log = logging.getLogger(__name__)

_requested = os.environ.get("MVDU_KERNELS", "auto")

if _requested not in ("auto", "native", "python"):
    raise RuntimeError(f"MVDU_KERNELS must be auto|native|python, got {_requested!r}")

if _requested == "python":
    from . import _fallback as _impl
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "native":
            raise
        log.info("compiled kernels unavailable, using numpy fallback")
        from . import _fallback as _impl  # type: ignore[no-redef]

BACKEND = _impl.BACKEND_NAME

trilerp = _impl.trilerp
trilerp_scatter = _impl.trilerp_scatter
ball_counts = _impl.ball_counts
nn_dist = _impl.nn_dist


def get_backend() -> str:
    """Name of the kernel backend selected at import: 'native' or 'python'."""
    return BACKEND
