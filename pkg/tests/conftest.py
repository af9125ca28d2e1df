"""Shared fixtures and small builders for the test suite."""

import numpy as np
import pytest

from probpnp.geometry import CameraIntrinsics, CorrespondenceSet, Pose, project_points


def default_camera():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_pose(rng, depth=(0.8, 2.5), lateral=0.15):
    """Uniform random rotation, translation in a frustum-friendly box."""
    q = rng.normal(size=4)
    t = np.array(
        [
            rng.uniform(-lateral, lateral),
            rng.uniform(-lateral, lateral),
            rng.uniform(*depth),
        ]
    )
    return Pose(q, t)


def random_points(rng, n, scale=0.08):
    """A well-spread, non-degenerate cloud of model points."""
    return rng.uniform(-scale, scale, size=(n, 3))


def noiseless_instance(rng, n=12, k=None, weights=None):
    """Generate (set, gt_pose, k) whose pixels match the pose exactly."""
    k = k or default_camera()
    while True:
        pose = random_pose(rng)
        x3d = random_points(rng, n)
        cam = pose.apply(x3d)
        if np.all(cam[:, 2] > 0.2):
            break
    x2d = project_points(pose, k, x3d)
    if weights is None:
        w2d = np.ones((n, 2))
    else:
        w2d = np.asarray(weights, dtype=float)
    return CorrespondenceSet(x3d, x2d, w2d), pose, k


def noisy_instance(rng, n=24, pixel_sigma=1.0, k=None):
    cs, pose, k = noiseless_instance(rng, n=n, k=k)
    x2d = cs.x2d + rng.normal(scale=pixel_sigma, size=cs.x2d.shape)
    return CorrespondenceSet(cs.x3d, x2d, cs.w2d), pose, k


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)
