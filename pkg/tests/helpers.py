"""Shared random-fixture helpers for the test suite."""

import numpy as np

from submap_slam.liegroups import Pose3, Rotation3, Sim3Transform


def random_rotation(rng, max_angle=np.pi - 0.1):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Rotation3.exp(axis * angle)


def random_pose(rng, max_angle=np.pi - 0.1, t_scale=1.0):
    return Pose3(random_rotation(rng, max_angle), rng.normal(size=3) * t_scale)


def random_sim3(rng, max_angle=np.pi - 0.1, log_scale_range=(-1.0, 1.0), t_scale=1.0):
    return Sim3Transform(
        float(np.exp(rng.uniform(*log_scale_range))),
        random_rotation(rng, max_angle),
        rng.normal(size=3) * t_scale,
    )


def sim3_algebra_matrix(v):
    """4x4 matrix-algebra form of a (trans, rot, log-scale) tangent vector."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = np.array(
        [
            [v[6], -v[5], v[4]],
            [v[5], v[6], -v[3]],
            [-v[4], v[3], v[6]],
        ]
    )
    out[:3, 3] = v[:3]
    return out
