"""Camera model, perspective projection, robust PnP, triangulation and
robust homography estimation.

Pose convention: every pose handled here maps world points into the camera
frame (cam_from_world); projecting a world point X means
pixel = K be applied to R X + t. RANSAC draws are deterministic for a fixed
``RansacConfig.seed``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import NoConsensus, TooFewCorrespondences
from .liegroups import Pose3, se3_exp
from .registration import align_point_sets

# Cheirality test: points closer than this along the optical axis are invisible.
Z_MIN = 1e-6


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, pix: np.ndarray) -> bool:
        return bool(
            0.0 <= pix[0] <= self.width - 1 and 0.0 <= pix[1] <= self.height - 1
        )


@dataclass(frozen=True, eq=False)
class Correspondence2D3D:
    pixel: np.ndarray
    point: np.ndarray
    point_id: int = -1


@dataclass(frozen=True, eq=False)
class RansacConfig:
    pixel_threshold: float = 2.0
    confidence: float = 0.999
    max_iterations: int = 1000
    min_inliers: int = 10
    min_parallax_deg: float = 1.0
    seed: int = 0


@dataclass
class RansacResult:
    model: Union[Pose3, np.ndarray]
    inlier_mask: np.ndarray
    inlier_ratio: float


def project(pose: Pose3, k: CameraIntrinsics, point: np.ndarray) -> Optional[np.ndarray]:
    """Project a world point; None when behind the camera or out of bounds."""
    pc = pose.apply(np.asarray(point, dtype=float))
    if pc[2] <= Z_MIN:
        return None
    pix = np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])
    if not k.contains(pix):
        return None
    return pix


def project_points(
    pose: Pose3, k: CameraIntrinsics, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns (pixels (N,2), depths (N,), visible (N,) bool); pixels of
    invisible points are left in place but flagged.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pc = pts @ pose.rotation.matrix().T + pose.translation
    z = pc[:, 2]
    safe_z = np.where(np.abs(z) > Z_MIN, z, 1.0)
    u = k.fx * pc[:, 0] / safe_z + k.cx
    v = k.fy * pc[:, 1] / safe_z + k.cy
    pix = np.stack([u, v], axis=1)
    visible = (
        (z > Z_MIN)
        & (u >= 0.0)
        & (u <= k.width - 1)
        & (v >= 0.0)
        & (v <= k.height - 1)
    )
    return pix, z, visible


def back_project(pose: Pose3, k: CameraIntrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """World point of a pixel at a given camera-frame depth (inverse of project)."""
    ray = np.array([(pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0])
    return pose.inverse().apply(ray * depth)


def _reprojection_errors(pose: Pose3, k: CameraIntrinsics, pts: np.ndarray, pix: np.ndarray) -> np.ndarray:
    pc = pts @ pose.rotation.matrix().T + pose.translation
    z = pc[:, 2]
    err = np.full(len(pts), np.inf)
    ok = z > Z_MIN
    if np.any(ok):
        u = k.fx * pc[ok, 0] / z[ok] + k.cx
        v = k.fy * pc[ok, 1] / z[ok] + k.cy
        err[ok] = np.hypot(u - pix[ok, 0], v - pix[ok, 1])
    return err


# ---------------------------------------------------------------------------
# EPnP minimal solver


def _epnp(world: np.ndarray, norm_pix: np.ndarray) -> Optional[Pose3]:
    """EPnP pose from n >= 4 points given normalized image coordinates.

    Control points are the centroid plus the principal axes (3 axes for a
    spatial sample, 2 for a planar one); camera-frame control points come
    from the null space of the projection constraints, trying the standard
    beta cases refined by Gauss-Newton on inter-control-point distances.
    """
    n = len(world)
    centroid = world.mean(axis=0)
    centered = world - centroid
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] <= 1e-12 or evals[1] < 1e-10 * evals[2]:
        return None  # collinear / coincident sample
    planar = evals[0] < 1e-8 * evals[2]

    if planar:
        axes = evecs[:, 1:]  # two dominant axes, ascending eigenvalues
        scales = np.sqrt(evals[1:])
        nc = 3
    else:
        axes = evecs
        scales = np.sqrt(evals)
        nc = 4
    ctrl_w = np.concatenate([centroid[None, :], centroid + scales[:, None] * axes.T], axis=0)

    # Barycentric coordinates of each point in the control-point basis.
    basis = (ctrl_w[1:] - ctrl_w[0]).T  # 3 x (nc-1)
    if planar:
        # in-plane coordinates via the orthonormal axis basis
        alpha_rest = (centered @ axes) / scales[None, :]
    else:
        alpha_rest = np.linalg.solve(basis, centered.T).T
    alphas = np.concatenate([1.0 - alpha_rest.sum(axis=1, keepdims=True), alpha_rest], axis=1)

    m = np.zeros((2 * n, 3 * nc))
    cols = np.arange(nc) * 3
    m[0::2, cols] = alphas
    m[0::2, cols + 2] = -alphas * norm_pix[:, 0:1]
    m[1::2, cols + 1] = alphas
    m[1::2, cols + 2] = -alphas * norm_pix[:, 1:2]

    _, _, vt = np.linalg.svd(m, full_matrices=True)
    nk = 4 if nc == 4 else 3
    kernel = vt[::-1][:nk]  # rows: singular vectors for the smallest values

    pairs = [(a, b) for a in range(nc) for b in range(a + 1, nc)]
    d_w = np.array([np.sum((ctrl_w[a] - ctrl_w[b]) ** 2) for a, b in pairs])
    ctrl_k = kernel.reshape(nk, nc, 3)
    diffs = np.stack([ctrl_k[:, a] - ctrl_k[:, b] for a, b in pairs], axis=0)

    best_rt = None
    best_err = np.inf
    max_case = 3 if nc == 4 else 2
    for case in range(1, max_case + 1):
        betas = _solve_betas(diffs, d_w, case, nk)
        if betas is None:
            continue
        betas = _refine_betas(diffs, d_w, betas)
        ctrl_c = np.einsum("k,kcd->cd", betas, ctrl_k)
        pts_c = alphas @ ctrl_c
        if np.sum(pts_c[:, 2] < 0) > n / 2:
            pts_c = -pts_c
        rt = _rigid_fit(world, pts_c)
        if rt is None:
            continue
        err = _reprojection_norm_err_rt(rt[0], rt[1], world, norm_pix)
        if err < best_err:
            best_err = err
            best_rt = rt
    if best_rt is None:
        return None
    from .liegroups import Rotation3

    return Pose3(Rotation3.from_matrix(best_rt[0]), best_rt[1])


def _rigid_fit(src: np.ndarray, dst: np.ndarray) -> Optional[tuple]:
    """Least-squares rigid (R, t) with dst ~ R src + t."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (dst - cd).T @ (src - cs)
    try:
        u, _, vt = np.linalg.svd(h)
    except np.linalg.LinAlgError:
        return None
    sign = 1.0 if np.linalg.det(u @ vt) >= 0 else -1.0
    r = (u * np.array([1.0, 1.0, sign])) @ vt
    return r, cd - r @ cs


def _reprojection_norm_err_rt(r, t, world, norm_pix) -> float:
    pc = world @ r.T + t
    z = pc[:, 2]
    bad = z <= Z_MIN
    z = np.where(bad, 1.0, z)
    proj = pc[:, :2] / z[:, None]
    err = np.sqrt(np.sum((proj - norm_pix) ** 2, axis=1))
    err[bad] = np.inf
    return float(np.mean(err))


def _lsq_small(a: np.ndarray, b: np.ndarray) -> Optional[np.ndarray]:
    """Least squares via normal equations (tiny, well-scaled systems)."""
    h = a.T @ a
    h.flat[:: h.shape[0] + 1] += 1e-12
    try:
        return np.linalg.solve(h, a.T @ b)
    except np.linalg.LinAlgError:
        return None


def _solve_betas(diffs: np.ndarray, d_w: np.ndarray, case: int, nk: int) -> Optional[np.ndarray]:
    if case == 1:
        v = diffs[:, 0]
        num = float(np.sum(np.sqrt(np.sum(v * v, axis=1) * d_w)))
        den = float(np.sum(v * v))
        if den <= 0:
            return None
        out = np.zeros(nk)
        out[0] = num / den
        return out
    if case == 2:
        # unknowns: b11, b12, b22
        v1, v2 = diffs[:, 0], diffs[:, 1]
        l = np.stack(
            [np.sum(v1 * v1, axis=1), 2 * np.sum(v1 * v2, axis=1), np.sum(v2 * v2, axis=1)],
            axis=1,
        )
        sol = _lsq_small(l, d_w)
        if sol is None:
            return None
        b11, b12, b22 = sol
        if b11 < 0:
            b1 = math.sqrt(-b11)
            b2 = math.sqrt(-b22) if b22 < 0 else 0.0
        else:
            b1 = math.sqrt(b11)
            b2 = math.sqrt(b22) if b22 > 0 else 0.0
        if b12 < 0:
            b1 = -b1
        out = np.zeros(nk)
        out[0], out[1] = b1, b2
        return out
    if case == 3:
        # unknowns: b11, b12, b22, b13, b23 (classic 6x5 system)
        v1, v2, v3 = diffs[:, 0], diffs[:, 1], diffs[:, 2]
        l = np.stack(
            [
                np.sum(v1 * v1, axis=1),
                2 * np.sum(v1 * v2, axis=1),
                np.sum(v2 * v2, axis=1),
                2 * np.sum(v1 * v3, axis=1),
                2 * np.sum(v2 * v3, axis=1),
            ],
            axis=1,
        )
        sol = _lsq_small(l, d_w)
        if sol is None:
            return None
        b11, b12, b22, b13, _ = sol
        if b11 < 0:
            b1 = math.sqrt(-b11)
            b2 = math.sqrt(-b22) if b22 < 0 else 0.0
        else:
            b1 = math.sqrt(b11)
            b2 = math.sqrt(b22) if b22 > 0 else 0.0
        if b12 < 0:
            b1 = -b1
        b3 = b13 / b1 if abs(b1) > 1e-12 else 0.0
        out = np.zeros(nk)
        out[0], out[1], out[2] = b1, b2, b3
        return out
    return None


def _refine_betas(diffs: np.ndarray, d_w: np.ndarray, betas: np.ndarray, iters: int = 6) -> np.ndarray:
    betas = betas.copy()
    for _ in range(iters):
        v = np.einsum("k,rkd->rd", betas, diffs)  # (pairs, 3)
        resid = np.sum(v * v, axis=1) - d_w
        jac = 2.0 * np.einsum("rd,rkd->rk", v, diffs)  # (pairs, nk)
        step = _lsq_small(jac, -resid)
        if step is None:
            break
        betas = betas + step
        if float(step @ step) < 1e-20:
            break
    return betas


def _reprojection_norm_err(pose: Pose3, world: np.ndarray, norm_pix: np.ndarray) -> float:
    pc = world @ pose.rotation.matrix().T + pose.translation
    z = pc[:, 2]
    bad = z <= Z_MIN
    z = np.where(bad, 1.0, z)
    proj = pc[:, :2] / z[:, None]
    err = np.linalg.norm(proj - norm_pix, axis=1)
    err[bad] = np.inf
    return float(np.mean(err))


def refine_pose_gauss_newton(
    pose: Pose3,
    k: CameraIntrinsics,
    pts: np.ndarray,
    pix: np.ndarray,
    iters: int = 20,
) -> Pose3:
    """Minimize the reprojection objective by Gauss-Newton with step halving.

    The returned pose never has a larger objective than the input pose.
    """
    r_mat = pose.rotation.matrix()
    t = pose.translation

    def objective(rm, tv):
        pc = pts @ rm.T + tv
        z = np.maximum(pc[:, 2], Z_MIN)
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
        return float(np.sum((u - pix[:, 0]) ** 2 + (v - pix[:, 1]) ** 2))

    cur = Pose3(pose.rotation, pose.translation)
    cur_obj = objective(r_mat, t)
    for _ in range(iters):
        rm = cur.rotation.matrix()
        pc = pts @ rm.T + cur.translation
        z = np.maximum(pc[:, 2], Z_MIN)
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
        res = np.stack([u - pix[:, 0], v - pix[:, 1]], axis=1)  # (n, 2)

        # d(pixel)/d(camera point) then chain through the right perturbation
        n = len(pts)
        jproj = np.zeros((n, 2, 3))
        jproj[:, 0, 0] = k.fx / z
        jproj[:, 0, 2] = -k.fx * pc[:, 0] / z**2
        jproj[:, 1, 1] = k.fy / z
        jproj[:, 1, 2] = -k.fy * pc[:, 1] / z**2

        jpoint = np.zeros((n, 3, 6))
        jpoint[:, :, :3] = rm[None, :, :]
        # -R [X]x for the rotational part
        sk = np.zeros((n, 3, 3))
        sk[:, 0, 1] = -pts[:, 2]
        sk[:, 0, 2] = pts[:, 1]
        sk[:, 1, 0] = pts[:, 2]
        sk[:, 1, 2] = -pts[:, 0]
        sk[:, 2, 0] = -pts[:, 1]
        sk[:, 2, 1] = pts[:, 0]
        jpoint[:, :, 3:] = -np.einsum("ab,nbc->nac", rm, sk)

        jac = np.einsum("nab,nbc->nac", jproj, jpoint).reshape(-1, 6)
        rvec = res.reshape(-1)
        h = jac.T @ jac
        g = jac.T @ rvec
        try:
            step = np.linalg.solve(h + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            break

        improved = False
        for _ in range(12):
            cand = cur.compose(se3_exp(step))
            cand_obj = objective(cand.rotation.matrix(), cand.translation)
            if cand_obj < cur_obj:
                if cur_obj - cand_obj < 1e-14 * max(cur_obj, 1.0):
                    cur, cur_obj = cand, cand_obj
                    return cur
                cur, cur_obj = cand, cand_obj
                improved = True
                break
            step = step * 0.5
        if not improved:
            break
    return cur


def solve_pnp_ransac(
    corrs: Sequence[Correspondence2D3D], k: CameraIntrinsics, cfg: RansacConfig
) -> RansacResult:
    """RANSAC + EPnP + Gauss-Newton refinement over the inlier set."""
    n = len(corrs)
    if n < 4:
        raise TooFewCorrespondences(f"PnP needs >= 4 correspondences, got {n}")
    pts = np.array([c.point for c in corrs], dtype=float)
    pix = np.array([c.pixel for c in corrs], dtype=float)
    norm_pix = np.stack(
        [(pix[:, 0] - k.cx) / k.fx, (pix[:, 1] - k.cy) / k.fy], axis=1
    )

    rng = np.random.default_rng(cfg.seed)
    best_mask = None
    best_count = 0
    best_err = np.inf
    best_pose = None
    max_iters = cfg.max_iterations
    it = 0
    while it < max_iters:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        pose = _epnp(pts[sample], norm_pix[sample])
        if pose is None:
            continue
        err = _reprojection_errors(pose, k, pts, pix)
        mask = err < cfg.pixel_threshold
        count = int(mask.sum())
        mean_err = float(err[mask].mean()) if count else np.inf
        if count > best_count or (count == best_count and mean_err < best_err):
            best_count = count
            best_mask = mask
            best_err = mean_err
            best_pose = pose
            if count > 4:
                w = count / n
                denom = math.log(max(1e-12, 1.0 - w**4))
                if denom < 0:
                    needed = math.log(max(1e-300, 1.0 - cfg.confidence)) / denom
                    max_iters = min(cfg.max_iterations, max(it, int(math.ceil(needed))))

    if best_pose is None or best_count < max(cfg.min_inliers, 4):
        raise NoConsensus(
            f"best consensus {best_count} below min_inliers {cfg.min_inliers}"
        )

    # final model: EPnP on all inliers (falling back to the best minimal
    # hypothesis when that refit degenerates), then Gauss-Newton refinement
    idx = np.flatnonzero(best_mask)
    pose = _epnp(pts[idx], norm_pix[idx]) or best_pose
    pose = refine_pose_gauss_newton(pose, k, pts[idx], pix[idx])
    err = _reprojection_errors(pose, k, pts, pix)
    mask = err < cfg.pixel_threshold
    if int(mask.sum()) >= max(cfg.min_inliers, 4):
        refined = refine_pose_gauss_newton(pose, k, pts[mask], pix[mask])
        err2 = _reprojection_errors(refined, k, pts, pix)
        mask2 = err2 < cfg.pixel_threshold
        if mask2.sum() >= mask.sum():
            pose, mask = refined, mask2
    return RansacResult(pose, mask, float(mask.sum()) / n)


# ---------------------------------------------------------------------------
# Triangulation


def triangulate(
    pose_a: Pose3,
    pose_b: Pose3,
    k: CameraIntrinsics,
    pix_a: np.ndarray,
    pix_b: np.ndarray,
    cfg: RansacConfig = RansacConfig(),
) -> Optional[np.ndarray]:
    """DLT two-view triangulation with parallax/cheirality/reprojection gates."""
    km = k.matrix()
    pa = km @ pose_a.matrix()[:3]
    pb = km @ pose_b.matrix()[:3]
    a = np.stack(
        [
            pix_a[0] * pa[2] - pa[0],
            pix_a[1] * pa[2] - pa[1],
            pix_b[0] * pb[2] - pb[0],
            pix_b[1] * pb[2] - pb[1],
        ]
    )
    _, _, vt = np.linalg.svd(a)
    xh = vt[-1]
    if abs(xh[3]) < 1e-12:
        return None
    x = xh[:3] / xh[3]

    # parallax between the two viewing rays
    ca = pose_a.inverse().translation
    cb = pose_b.inverse().translation
    ra = x - ca
    rb = x - cb
    na, nb = np.linalg.norm(ra), np.linalg.norm(rb)
    if na < 1e-12 or nb < 1e-12:
        return None
    cosang = np.clip(ra @ rb / (na * nb), -1.0, 1.0)
    if math.degrees(math.acos(cosang)) < cfg.min_parallax_deg:
        return None

    for pose, pix in ((pose_a, pix_a), (pose_b, pix_b)):
        pc = pose.apply(x)
        if pc[2] <= Z_MIN:
            return None
        u = k.fx * pc[0] / pc[2] + k.cx
        v = k.fy * pc[1] / pc[2] + k.cy
        if math.hypot(u - pix[0], v - pix[1]) > cfg.pixel_threshold:
            return None
    return x


# ---------------------------------------------------------------------------
# Homography


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if d < 1e-12:
        d = 1.0
    s = math.sqrt(2.0) / d
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    return (ph @ t.T)[:, :2], t


def _dlt_homography(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    """Normalized DLT homography mapping src -> dst (both (N>=4, 2))."""
    sn, ts = _hartley_normalize(src)
    dn, td = _hartley_normalize(dst)
    n = len(src)
    a = np.zeros((2 * n, 9))
    for i in range(n):
        x, y = sn[i]
        u, v = dn[i]
        a[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        a[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, sv, vt = np.linalg.svd(a)
    if n > 4 and sv[-2] < 1e-12:
        return None
    h = vt[-1].reshape(3, 3)
    if abs(np.linalg.det(h)) < 1e-12:
        return None
    h = np.linalg.inv(td) @ h @ ts
    return h / h[2, 2] if abs(h[2, 2]) > 1e-12 else None


def _symmetric_transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    hinv = np.linalg.inv(h)

    def transfer(mat, pts):
        ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ mat.T
        w = ph[:, 2]
        bad = np.abs(w) < 1e-12
        w = np.where(bad, 1.0, w)
        out = ph[:, :2] / w[:, None]
        out[bad] = 1e9
        return out

    d1 = np.sum((transfer(h, src) - dst) ** 2, axis=1)
    d2 = np.sum((transfer(hinv, dst) - src) ** 2, axis=1)
    return np.sqrt(0.5 * (d1 + d2))


def _sample_degenerate(pts: np.ndarray) -> bool:
    # any 3 of the 4 sampled points collinear
    for drop in range(4):
        tri = np.delete(pts, drop, axis=0)
        d1 = tri[1] - tri[0]
        d2 = tri[2] - tri[0]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) < 1e-9:
            return True
    return False


def estimate_homography_ransac(
    matches: Sequence[tuple[np.ndarray, np.ndarray]], cfg: RansacConfig
) -> RansacResult:
    """Robust homography from pixel pairs; model maps first -> second."""
    n = len(matches)
    if n < 4:
        raise TooFewCorrespondences(f"homography needs >= 4 pairs, got {n}")
    src = np.array([m[0] for m in matches], dtype=float)
    dst = np.array([m[1] for m in matches], dtype=float)

    rng = np.random.default_rng(cfg.seed)
    best_mask = None
    best_count = 0
    best_h = None
    max_iters = cfg.max_iterations
    it = 0
    while it < max_iters:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        if _sample_degenerate(src[sample]) or _sample_degenerate(dst[sample]):
            continue
        h = _dlt_homography(src[sample], dst[sample])
        if h is None:
            continue
        err = _symmetric_transfer_errors(h, src, dst)
        mask = err < cfg.pixel_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_h = count, mask, h
            if count > 4:
                w = count / n
                denom = math.log(max(1e-12, 1.0 - w**4))
                if denom < 0:
                    needed = math.log(max(1e-300, 1.0 - cfg.confidence)) / denom
                    max_iters = min(cfg.max_iterations, max(it, int(math.ceil(needed))))

    if best_h is None:
        return RansacResult(np.eye(3), np.zeros(n, dtype=bool), 0.0)

    if best_count >= 4:
        h = _dlt_homography(src[best_mask], dst[best_mask])
        if h is not None:
            err = _symmetric_transfer_errors(h, src, dst)
            mask = err < cfg.pixel_threshold
            if mask.sum() >= best_count:
                best_h, best_mask, best_count = h, mask, int(mask.sum())
    return RansacResult(best_h, best_mask, best_count / n)
