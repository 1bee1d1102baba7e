"""Multi-view depth uncertainty toolkit.

Estimates per-pixel uncertainty of monocular depth maps from the density of
multi-view fused instance point clouds, and uses the maps to guide a small
SDF-grid reconstruction: adaptive prior losses, uncertainty-guided ray
sampling and a cross-view instance mask constraint.
"""

from .kernels import get_backend

__version__ = "0.1.0"

__all__ = ["get_backend", "__version__"]
