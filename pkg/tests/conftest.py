import numpy as np
import pytest

from mvdu.camera import CameraView, Intrinsics, Pose


def random_pose(rng):
    # QR of a random matrix gives a uniform-ish rotation
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return Pose(q, rng.normal(scale=2.0, size=3))


def random_intrinsics(rng, width=64, height=48):
    return Intrinsics(
        fx=rng.uniform(40, 120), fy=rng.uniform(40, 120),
        cx=rng.uniform(0.3, 0.7) * width, cy=rng.uniform(0.3, 0.7) * height,
        width=width, height=height)


def random_view(rng, width=64, height=48, view_id=0):
    return CameraView(view_id, random_intrinsics(rng, width, height),
                      random_pose(rng))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
