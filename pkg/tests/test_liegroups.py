import numpy as np
import pytest
import scipy.linalg

from submap_slam.errors import LogDomainError
from submap_slam.liegroups import (
    Pose3,
    Rotation3,
    Sim3Transform,
    se3_exp,
    se3_log,
    sim3_adjoint,
    sim3_compose,
    sim3_dexpinv_right,
    sim3_distance,
    sim3_exp,
    sim3_log,
)

from helpers import random_sim3, sim3_algebra_matrix


def test_rotation_unit_norm_after_long_composition_chain():
    rng = np.random.default_rng(0)
    r = Rotation3.identity()
    for _ in range(2000):
        axis = rng.normal(size=3)
        r = r.compose(Rotation3.exp(axis / np.linalg.norm(axis) * 0.3))
    assert abs(np.linalg.norm(r.q) - 1.0) < 1e-12


def test_rotation_sign_equivalence():
    r = Rotation3.exp(np.array([0.4, -0.2, 0.9]))
    flipped = Rotation3(-r.q)
    assert r.approx_equal(flipped, tol=1e-12)


def test_pose_inverse_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = Pose3(Rotation3.exp(rng.normal(size=3)), rng.normal(size=3))
        d = sim3_distance(p.inverse().compose(p).to_sim3(), Sim3Transform.identity())
        assert d < 1e-10


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(2)
    t = random_sim3(rng)
    ident = Sim3Transform.identity()
    assert sim3_distance(sim3_compose(ident, t), t) < 1e-12
    assert sim3_distance(sim3_compose(t, t.inverse()), ident) < 1e-10


def test_compose_example_scale2_rot90_about_z():
    t = Sim3Transform(2.0, Rotation3.exp(np.array([0.0, 0.0, np.pi / 2])), np.array([1.0, 0.0, 0.0]))
    out = t.apply(np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(out, [1.0, 2.0, 0.0], atol=1e-12)


def test_compose_matches_matrix_product_oracle():
    rng = np.random.default_rng(3)
    pts_h = np.concatenate([rng.normal(size=(20, 3)), np.ones((20, 1))], axis=1)
    for _ in range(30):
        a, b = random_sim3(rng), random_sim3(rng)
        via_group = sim3_compose(a, b).apply(pts_h[:, :3])
        via_matrix = (a.matrix() @ b.matrix() @ pts_h.T).T[:, :3]
        np.testing.assert_allclose(via_group, via_matrix, atol=1e-10)


def test_action_scales_pairwise_distances():
    rng = np.random.default_rng(4)
    t = random_sim3(rng, log_scale_range=(0.3, 0.7))
    pts = rng.normal(size=(15, 3))
    out = t.apply(pts)
    d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None, :], axis=-1)
    np.testing.assert_allclose(d_out, t.scale * d_in, rtol=1e-12, atol=1e-12)


def test_log_identity_is_zero():
    np.testing.assert_allclose(sim3_log(Sim3Transform.identity()), np.zeros(7), atol=1e-15)


def test_log_pure_scale():
    t = Sim3Transform(np.e, Rotation3.identity(), np.zeros(3))
    v = sim3_log(t)
    np.testing.assert_allclose(v, [0, 0, 0, 0, 0, 0, 1.0], atol=1e-12)


def test_log_raises_at_pi():
    t = Sim3Transform(1.0, Rotation3.exp(np.array([np.pi, 0.0, 0.0])), np.zeros(3))
    with pytest.raises(LogDomainError):
        sim3_log(t)


def test_exp_zero_is_identity():
    assert sim3_distance(sim3_exp(np.zeros(7)), Sim3Transform.identity()) < 1e-15


def test_exp_pure_rotation_about_z():
    theta = 0.77
    t = sim3_exp(np.array([0, 0, 0, 0, 0, theta, 0.0]))
    expected = Rotation3.exp(np.array([0.0, 0.0, theta]))
    assert t.rotation.approx_equal(expected, tol=1e-14)
    assert abs(t.scale - 1.0) < 1e-15
    np.testing.assert_allclose(t.translation, np.zeros(3), atol=1e-15)


def test_exp_matches_matrix_exponential_oracle():
    # scaling-and-squaring matrix exponential as the independent reference
    rng = np.random.default_rng(5)
    for _ in range(100):
        v = np.concatenate(
            [
                rng.normal(size=3),
                rng.normal(size=3) * (rng.uniform(0.05, 0.9) * np.pi / 3),
                [rng.uniform(-1, 1)],
            ]
        )
        m = scipy.linalg.expm(sim3_algebra_matrix(v))
        np.testing.assert_allclose(sim3_exp(v).matrix(), m, atol=1e-9)


def test_exp_near_small_angle_branch_boundary():
    rng = np.random.default_rng(6)
    for scale_mag in (1e-7, 9e-6, 1.1e-5, 1e-4):
        for ang_mag in (1e-7, 9e-6, 1.1e-5, 1e-4):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            v = np.concatenate([rng.normal(size=3), axis * ang_mag, [scale_mag]])
            m = scipy.linalg.expm(sim3_algebra_matrix(v))
            np.testing.assert_allclose(sim3_exp(v).matrix(), m, atol=1e-11)


def test_exp_first_order_consistency():
    # |exp(v) p - (p + J v)| = O(|v|^2) against central finite differences
    rng = np.random.default_rng(7)
    p = rng.normal(size=3)
    v = rng.normal(size=7)
    v /= np.linalg.norm(v)
    h = 1e-6
    jac_fd = np.zeros((3, 7))
    for k in range(7):
        dv = np.zeros(7)
        dv[k] = h
        jac_fd[:, k] = (sim3_exp(dv).apply(p) - sim3_exp(-dv).apply(p)) / (2 * h)
    for eps in (1e-3, 1e-4):
        lhs = sim3_exp(eps * v).apply(p)
        rhs = p + jac_fd @ (eps * v)
        assert np.linalg.norm(lhs - rhs) < 10.0 * eps**2


def test_roundtrip_exp_log_1000_random():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        t = random_sim3(rng)
        back = sim3_exp(sim3_log(t))
        assert sim3_distance(t, back) < 1e-9


def test_associativity():
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b, c = (random_sim3(rng) for _ in range(3))
        lhs = sim3_compose(sim3_compose(a, b), c)
        rhs = sim3_compose(a, sim3_compose(b, c))
        assert sim3_distance(lhs, rhs) < 1e-10


def test_matrix_action_consistency():
    rng = np.random.default_rng(10)
    t = random_sim3(rng)
    pts = rng.normal(size=(40, 3))
    pts_h = np.concatenate([pts, np.ones((40, 1))], axis=1)
    via_matrix = (t.matrix() @ pts_h.T).T[:, :3]
    np.testing.assert_allclose(t.apply(pts), via_matrix, atol=1e-12)


def test_se3_is_scale_one_restriction():
    rng = np.random.default_rng(11)
    for _ in range(200):
        v6 = rng.normal(size=6) * 0.8
        p = se3_exp(v6)
        s = sim3_exp(np.concatenate([v6, [0.0]]))
        assert abs(s.scale - 1.0) < 1e-15
        np.testing.assert_allclose(p.matrix(), s.matrix()[:4], atol=1e-12)
        np.testing.assert_allclose(se3_log(p), sim3_log(s)[:6], atol=1e-12)


def test_so3_is_translation_free_restriction():
    rng = np.random.default_rng(12)
    for _ in range(200):
        w = rng.normal(size=3)
        w *= rng.uniform(0, np.pi - 0.1) / np.linalg.norm(w)
        r = Rotation3.exp(w)
        s = sim3_exp(np.concatenate([np.zeros(3), w, [0.0]]))
        np.testing.assert_allclose(r.matrix(), s.matrix()[:3, :3], atol=1e-12)
        np.testing.assert_allclose(r.log(), sim3_log(s)[3:6], atol=1e-12)


def test_from_matrix_roundtrip():
    rng = np.random.default_rng(13)
    for _ in range(100):
        t = random_sim3(rng)
        t2 = Sim3Transform.from_matrix(t.matrix())
        assert sim3_distance(t, t2) < 1e-12


def test_adjoint_conjugation_identity():
    rng = np.random.default_rng(14)
    for _ in range(50):
        t = random_sim3(rng)
        x = rng.normal(size=7) * 0.3
        lhs = t.compose(sim3_exp(x)).compose(t.inverse())
        rhs = sim3_exp(sim3_adjoint(t) @ x)
        assert sim3_distance(lhs, rhs) < 1e-9


def test_dexpinv_right_matches_finite_differences():
    rng = np.random.default_rng(15)
    h = 1e-7
    for _ in range(50):
        x = sim3_log(random_sim3(rng, max_angle=np.pi - 0.2))
        base = sim3_exp(x)
        jac = sim3_dexpinv_right(x)
        jac_fd = np.zeros((7, 7))
        for k in range(7):
            d = np.zeros(7)
            d[k] = h
            plus = sim3_log(base.compose(sim3_exp(d)))
            minus = sim3_log(base.compose(sim3_exp(-d)))
            jac_fd[:, k] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(jac, jac_fd, rtol=2e-5, atol=2e-6)
