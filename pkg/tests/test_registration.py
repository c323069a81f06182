import numpy as np
import pytest

from submap_slam.errors import AllZeroConfidence, DegenerateConfiguration, TooFewCorrespondences
from submap_slam.liegroups import Sim3Transform, sim3_distance, sim3_exp, sim3_log
from submap_slam.registration import (
    Correspondence3D3D,
    align_point_sets,
    normalize_confidences,
    weighted_umeyama,
)

from helpers import random_sim3


def _objective(s, r, t, p, q, w):
    resid = s * (p @ r.T) + t - q
    return float(w @ np.sum(resid * resid, axis=1))


def test_normalize_uniform():
    np.testing.assert_allclose(normalize_confidences([1, 1, 1, 1]), [0.25] * 4)


def test_normalize_with_zeros():
    np.testing.assert_allclose(normalize_confidences([0, 2, 0, 2]), [0, 0.5, 0, 0.5])


def test_normalize_all_zero_raises():
    with pytest.raises(AllZeroConfidence):
        normalize_confidences([0.0, 0.0, 0.0])


def test_recovers_known_transform_exactly():
    rng = np.random.default_rng(20)
    gt = Sim3Transform(1.7, random_sim3(rng).rotation, rng.normal(size=3))
    p = rng.normal(size=(10, 3))
    q = gt.apply(p)
    est, rms = align_point_sets(p, q)
    assert sim3_distance(est, gt) < 1e-10
    assert rms < 1e-12


def test_identity_on_identical_sets():
    rng = np.random.default_rng(21)
    p = rng.normal(size=(8, 3))
    est, rms = align_point_sets(p, p.copy())
    assert sim3_distance(est, Sim3Transform.identity()) < 1e-12
    assert rms < 1e-13


def test_zero_weight_outlier_has_no_effect():
    rng = np.random.default_rng(22)
    gt = random_sim3(rng)
    p = rng.normal(size=(50, 3))
    q = gt.apply(p) + rng.normal(size=(50, 3)) * 0.01
    w = np.ones(50)

    p_out = np.concatenate([p, [[100.0, -100.0, 100.0]]])
    q_out = np.concatenate([q, [[-100.0, 100.0, -100.0]]])
    w_out = np.concatenate([w, [0.0]])

    est_clean, rms_clean = align_point_sets(p, q, w)
    est_out, rms_out = align_point_sets(p_out, q_out, w_out)

    assert sim3_distance(est_clean, gt) < 5 * 0.01 * np.sqrt(3)
    # bit-identical to the run without the zero-weight point
    assert est_out.scale == est_clean.scale
    np.testing.assert_array_equal(est_out.translation, est_clean.translation)
    np.testing.assert_array_equal(est_out.rotation.q, est_clean.rotation.q)
    assert rms_out == rms_clean


def test_collinear_raises():
    p = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(DegenerateConfiguration):
        align_point_sets(p, p + 1.0)


def test_too_few_raises():
    p = np.zeros((2, 3))
    with pytest.raises(TooFewCorrespondences):
        align_point_sets(p, p)
    with pytest.raises(TooFewCorrespondences):
        weighted_umeyama([Correspondence3D3D(np.zeros(3), np.zeros(3))] * 2)


def test_minimizer_property_under_tangent_perturbations():
    rng = np.random.default_rng(23)
    for _ in range(200):
        gt = random_sim3(rng)
        n = rng.integers(4, 30)
        p = rng.normal(size=(n, 3))
        w = rng.uniform(0.1, 2.0, size=n)
        q = gt.apply(p) + rng.normal(size=(n, 3)) * 0.05
        est, _ = align_point_sets(p, q, w)
        wn = w / w.sum()
        base = _objective(est.scale, est.rotation.matrix(), est.translation, p, q, wn)
        for _ in range(50):
            step = rng.normal(size=7)
            step *= 1e-3 / np.linalg.norm(step)
            pert = est.compose(sim3_exp(step))
            val = _objective(pert.scale, pert.rotation.matrix(), pert.translation, p, q, wn)
            assert val >= base - 1e-15


def test_equivariance_under_target_transform():
    rng = np.random.default_rng(24)
    for _ in range(20):
        p = rng.normal(size=(12, 3))
        q = rng.normal(size=(12, 3))
        w = rng.uniform(0.1, 1.0, size=12)
        g = random_sim3(rng)
        base, _ = align_point_sets(p, q, w)
        moved, _ = align_point_sets(p, g.apply(q), w)
        assert sim3_distance(moved, g.compose(base)) < 1e-9


def test_weight_scaling_invariance():
    rng = np.random.default_rng(25)
    p = rng.normal(size=(15, 3))
    q = rng.normal(size=(15, 3))
    w = rng.uniform(0.0, 1.0, size=15)
    w[0] = 0.7
    a, rms_a = align_point_sets(p, q, w)
    b, rms_b = align_point_sets(p, q, w * 137.5)
    assert abs(a.scale - b.scale) < 1e-12
    np.testing.assert_allclose(a.translation, b.translation, atol=1e-12)
    np.testing.assert_allclose(a.rotation.q, b.rotation.q, atol=1e-12)
    assert abs(rms_a - rms_b) < 1e-12


def test_reflection_guard_on_near_planar_sets():
    rng = np.random.default_rng(26)
    for _ in range(200):
        n = rng.integers(4, 20)
        p = rng.normal(size=(n, 3))
        p[:, 2] *= 1e-8  # nearly planar
        q = rng.normal(size=(n, 3))
        q[:, 2] *= 1e-8
        est, _ = align_point_sets(p, q)
        assert np.linalg.det(est.rotation.matrix()) > 0.999999


def test_weighted_umeyama_wrapper_matches_core():
    rng = np.random.default_rng(27)
    p = rng.normal(size=(9, 3))
    q = rng.normal(size=(9, 3))
    w = rng.uniform(0.1, 1.0, size=9)
    corrs = [Correspondence3D3D(p[i], q[i], w[i]) for i in range(9)]
    a, rms_a = weighted_umeyama(corrs)
    b, rms_b = align_point_sets(p, q, w)
    assert sim3_distance(a, b) < 1e-14
    assert abs(rms_a - rms_b) < 1e-15
