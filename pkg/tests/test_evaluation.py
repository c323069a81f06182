import numpy as np
import pytest

from submap_slam.errors import EmptyCloud, TooFewAssociations
from submap_slam.evaluation import (
    CloudMetricConfig,
    Trajectory,
    associate,
    ate_rmse,
    cloud_metrics,
)
from submap_slam.fileio import (
    load_ply,
    load_trajectory_tum,
    save_ply,
    save_trajectory_tum,
)
from submap_slam.liegroups import Pose3, Rotation3, Sim3Transform

from helpers import random_pose, random_sim3


def _traj_from_positions(positions, rng=None, t0=0.0):
    poses = []
    rng = rng or np.random.default_rng(0)
    for p in positions:
        poses.append(Pose3(Rotation3.exp(rng.normal(size=3) * 0.1), np.asarray(p, float)))
    ts = t0 + np.arange(len(poses), dtype=float)
    return Trajectory(ts, tuple(poses))


def test_associate_identical_timestamps():
    rng = np.random.default_rng(80)
    a = _traj_from_positions(rng.normal(size=(20, 3)))
    b = _traj_from_positions(rng.normal(size=(20, 3)))
    pairs = associate(a, b, max_dt=0.25)
    assert pairs == [(i, i) for i in range(20)]


def test_associate_disjoint_ranges():
    rng = np.random.default_rng(81)
    a = _traj_from_positions(rng.normal(size=(5, 3)), t0=0.0)
    b = _traj_from_positions(rng.normal(size=(5, 3)), t0=100.0)
    assert associate(a, b, max_dt=0.5) == []


def test_associate_half_offset():
    rng = np.random.default_rng(82)
    a = _traj_from_positions(rng.normal(size=(10, 3)), t0=0.25)
    b = _traj_from_positions(rng.normal(size=(10, 3)), t0=0.0)
    pairs = associate(a, b, max_dt=0.5)
    assert len(pairs) == 10


def test_ate_identical_is_zero():
    rng = np.random.default_rng(83)
    traj = _traj_from_positions(rng.normal(size=(30, 3)))
    assert ate_rmse(traj, traj) < 1e-12


def test_ate_sim3_alignment_invariance():
    rng = np.random.default_rng(84)
    gt = _traj_from_positions(rng.normal(size=(50, 3)) * 2.0)
    g = random_sim3(rng)
    est = Trajectory(
        gt.timestamps,
        tuple(
            Pose3(g.rotation.compose(p.rotation), g.apply(p.translation)) for p in gt.poses
        ),
    )
    assert ate_rmse(est, gt, align="sim3") < 1e-9
    assert ate_rmse(est, gt, align="se3") > 0.01  # scale not removed by se3


def test_ate_gaussian_noise_chi_band():
    rng = np.random.default_rng(85)
    sigma = 0.05
    gt = _traj_from_positions(rng.normal(size=(1000, 3)) * 3.0)
    est = Trajectory(
        gt.timestamps,
        tuple(
            Pose3(p.rotation, p.translation + rng.normal(scale=sigma, size=3))
            for p in gt.poses
        ),
    )
    val = ate_rmse(est, gt, align="sim3")
    # RMSE of 3D gaussian displacements concentrates at sigma * sqrt(3)
    assert 0.8 * sigma * np.sqrt(3) <= val <= 1.2 * sigma * np.sqrt(3)


def test_ate_too_few_associations():
    rng = np.random.default_rng(86)
    a = _traj_from_positions(rng.normal(size=(2, 3)))
    b = _traj_from_positions(rng.normal(size=(2, 3)))
    with pytest.raises(TooFewAssociations):
        ate_rmse(a, b)


def _box_cloud(rng, n=4000):
    """Points on an asymmetric box arrangement (unambiguous alignment)."""
    pts = []
    # three slabs of different extents
    for lo, hi, m in [
        ((-4, -3, -1), (4, -2.8, 1), n // 2),
        ((3.6, -3, -1), (4, 3, 1), n // 4),
        ((-4, -0.2, 0.8), (1, 3, 1.0), n // 4),
    ]:
        pts.append(rng.uniform(lo, hi, size=(m, 3)))
    return np.concatenate(pts)


def test_cloud_metrics_identical_zero():
    rng = np.random.default_rng(87)
    cloud = _box_cloud(rng)
    rep = cloud_metrics(cloud, cloud.copy())
    assert rep.accuracy < 1e-12
    assert rep.completeness < 1e-12
    assert rep.chamfer < 1e-12


def test_cloud_metrics_sim3_gauge_removed():
    rng = np.random.default_rng(88)
    cloud = _box_cloud(rng)
    g = Sim3Transform(1.4, Rotation3.exp(np.array([0.4, -0.7, 1.1])), np.array([3.0, -2.0, 1.0]))
    rep = cloud_metrics(g.apply(cloud), cloud)
    assert rep.accuracy < 1e-6
    assert rep.completeness < 1e-6
    assert rep.chamfer < 1e-6


def test_cloud_metrics_asymmetry_semantics():
    rng = np.random.default_rng(89)
    cloud = _box_cloud(rng, n=4000)
    half = cloud[: len(cloud) // 2]
    rep = cloud_metrics(half, cloud)
    assert rep.accuracy < 1e-9  # recon is a subset of gt
    assert rep.completeness > 0.01  # gt has regions recon lacks
    assert rep.chamfer == pytest.approx(0.5 * (rep.accuracy + rep.completeness))


def test_cloud_metrics_empty_raises():
    with pytest.raises(EmptyCloud):
        cloud_metrics(np.zeros((0, 3)), np.ones((5, 3)))


def test_cloud_metrics_monotone_in_coverage():
    rng = np.random.default_rng(90)
    cloud = _box_cloud(rng, n=4000)
    quarter = cloud[: len(cloud) // 4]
    half = cloud[: len(cloud) // 2]
    rep_q = cloud_metrics(quarter, cloud)
    rep_h = cloud_metrics(half, cloud)
    assert rep_h.completeness <= rep_q.completeness + 1e-12


def test_tum_roundtrip(tmp_path):
    rng = np.random.default_rng(91)
    traj = _traj_from_positions(rng.normal(size=(25, 3)), rng)
    path = tmp_path / "traj.txt"
    save_trajectory_tum(traj, path)
    loaded = load_trajectory_tum(path)
    np.testing.assert_array_equal(loaded.timestamps, traj.timestamps)
    for a, b in zip(loaded.poses, traj.poses):
        np.testing.assert_array_equal(a.translation, b.translation)
        assert a.rotation.approx_equal(b.rotation, tol=1e-15)
    text = path.read_text()
    assert text.endswith("\n")
    assert text.startswith("#")


def test_tum_parse_error_has_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# header\n1.0 0 0 0 0 0 0\n")
    with pytest.raises(ValueError, match="bad.txt:2"):
        load_trajectory_tum(path)


def test_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(92)
    pts = rng.normal(size=(100, 3))
    conf = rng.uniform(size=100)
    path = tmp_path / "cloud.ply"
    save_ply(pts, path, conf)
    loaded = load_ply(path)
    np.testing.assert_array_equal(loaded, pts)
