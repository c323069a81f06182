"""Trajectory and reconstruction metrics: ATE RMSE after similarity
alignment, plus cloud accuracy / completeness / Chamfer with Umeyama + ICP
fine alignment.

Nearest-neighbor searches use uniform grid hashing at a cell size of about
twice the expected point spacing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._kernels import nn_dists, nn_query
from .errors import EmptyCloud, TooFewAssociations
from .liegroups import Pose3, Sim3Transform
from .registration import align_point_sets


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray  # strictly increasing
    poses: tuple  # Pose3 per timestamp, world_from_cam

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if len(ts) != len(self.poses):
            raise ValueError("timestamp count must match pose count")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def __len__(self):
        return len(self.poses)


@dataclass
class MetricReport:
    ate_rmse: float = float("nan")
    accuracy: float = float("nan")
    completeness: float = float("nan")
    chamfer: float = float("nan")
    pose_pairs: int = 0
    recon_points: int = 0
    gt_points: int = 0

    def as_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "accuracy": self.accuracy,
            "completeness": self.completeness,
            "chamfer": self.chamfer,
            "pose_pairs": self.pose_pairs,
            "recon_points": self.recon_points,
            "gt_points": self.gt_points,
        }


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.5) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairing; each gt pose used at most once."""
    cands = []
    for i, t in enumerate(est.timestamps):
        j = int(np.argmin(np.abs(gt.timestamps - t)))
        dt = abs(gt.timestamps[j] - t)
        if dt <= max_dt:
            cands.append((dt, i, j))
    cands.sort()
    used_i = set()
    used_j = set()
    pairs = []
    for _, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def ate_rmse(
    est: Trajectory, gt: Trajectory, align: str = "sim3", max_dt: float = 0.5
) -> float:
    """RMSE of position residuals after best-fit alignment of est onto gt."""
    if align not in ("sim3", "se3"):
        raise ValueError("align must be 'sim3' or 'se3'")
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 3:
        raise TooFewAssociations(f"only {len(pairs)} associated pose pairs")
    p = np.array([est.poses[i].translation for i, _ in pairs])
    q = np.array([gt.poses[j].translation for _, j in pairs])
    transform, _ = align_point_sets(p, q, with_scale=(align == "sim3"))
    resid = transform.apply(p) - q
    return float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))


# ---------------------------------------------------------------------------
# Cloud metrics


@dataclass(frozen=True, eq=False)
class CloudMetricConfig:
    max_points: int = 20000
    icp_max_iters: int = 50
    icp_rel_tol: float = 1e-8
    cell_size: Optional[float] = None  # auto: ~2x expected spacing
    coarse_sample: int = 1500


def _subsample(pts: np.ndarray, n: int) -> np.ndarray:
    if len(pts) <= n:
        return pts
    idx = np.linspace(0, len(pts) - 1, n).astype(np.int64)
    return pts[idx]


def _auto_cell(pts: np.ndarray) -> float:
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    vol = float(np.prod(np.maximum(hi - lo, 1e-9)))
    spacing = (vol / max(len(pts), 1)) ** (1.0 / 3.0)
    return max(2.0 * spacing, 1e-9)


def _mean_nn(query, ref, cell) -> float:
    return float(np.mean(nn_dists(query, ref, cell)))


def _pca_candidates(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    cov = (pts - c).T @ (pts - c) / len(pts)
    _, vecs = np.linalg.eigh(cov)
    if np.linalg.det(vecs) < 0:
        vecs = vecs.copy()
        vecs[:, 0] = -vecs[:, 0]
    return vecs  # columns, ascending eigenvalue, det +1


def _coarse_align(recon: np.ndarray, gt: np.ndarray, cell: float) -> Sim3Transform:
    """Centroid + RMS-radius + PCA-axis alignment, signs picked by NN cost."""
    c_r = recon.mean(axis=0)
    c_g = gt.mean(axis=0)
    r_r = float(np.sqrt(np.mean(np.sum((recon - c_r) ** 2, axis=1))))
    r_g = float(np.sqrt(np.mean(np.sum((gt - c_g) ** 2, axis=1))))
    s = r_g / max(r_r, 1e-12)

    from .liegroups import Rotation3

    v_r = _pca_candidates(recon)
    v_g = _pca_candidates(gt)
    sub_r = _subsample(recon, 600)
    sub_g = _subsample(gt, 4000)

    # identity and centroid-shift candidates cover partially overlapping
    # clouds, where centroid/PCA matching would break an existing alignment
    candidates = [
        Sim3Transform.identity(),
        Sim3Transform(1.0, Rotation3.identity(), c_g - c_r),
    ]
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            flip = np.diag([sx, sy, sx * sy])  # keeps det = +1
            rot = v_g @ flip @ v_r.T
            t = c_g - s * rot @ c_r
            candidates.append(Sim3Transform(s, Rotation3.from_matrix(rot), t))

    best = candidates[0]
    best_cost = np.inf
    for cand in candidates:
        cost = _mean_nn(cand.apply(sub_r), sub_g, cell)
        if cost < best_cost:
            best_cost = cost
            best = cand
    return best


def icp_refine(
    recon: np.ndarray,
    gt: np.ndarray,
    init: Sim3Transform,
    cell: float,
    max_iters: int = 50,
    rel_tol: float = 1e-8,
) -> Sim3Transform:
    """Point-to-point ICP with per-iteration similarity refit.

    The iteration never increases the correspondence MSE: a step that would
    is rejected and iteration stops.
    """
    current = init
    moved = current.apply(recon)
    dists, idx = nn_query(moved, gt, cell)
    mse = float(np.mean(dists * dists))
    for _ in range(max_iters):
        try:
            step, _ = align_point_sets(moved, gt[idx])
        except Exception:
            break
        cand = step.compose(current)
        moved_c = cand.apply(recon)
        d2, idx2 = nn_query(moved_c, gt, cell)
        mse2 = float(np.mean(d2 * d2))
        if mse2 > mse:
            break
        current, moved, idx = cand, moved_c, idx2
        if mse - mse2 <= rel_tol * max(mse, 1e-300):
            mse = mse2
            break
        mse = mse2
    return current


def cloud_metrics(
    recon: np.ndarray, gt: np.ndarray, cfg: CloudMetricConfig = CloudMetricConfig()
) -> MetricReport:
    """Accuracy (recon->gt), completeness (gt->recon) and their mean, after
    Umeyama + ICP alignment of the reconstruction onto the reference."""
    recon = np.asarray(recon, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(recon) == 0 or len(gt) == 0:
        raise EmptyCloud("cloud metrics need non-empty point sets")

    recon_s = _subsample(recon, cfg.max_points)
    gt_s = _subsample(gt, cfg.max_points)
    cell = cfg.cell_size if cfg.cell_size is not None else _auto_cell(gt_s)

    coarse = _coarse_align(recon_s, gt_s, cell)

    # Umeyama on subsampled nearest pairs, then ICP fine registration
    sub = _subsample(recon_s, cfg.coarse_sample)
    moved = coarse.apply(sub)
    _, idx = nn_query(moved, gt_s, cell)
    try:
        step, _ = align_point_sets(moved, gt_s[idx])
        init = step.compose(coarse)
    except Exception:
        init = coarse
    final = icp_refine(recon_s, gt_s, init, cell, cfg.icp_max_iters, cfg.icp_rel_tol)

    aligned = final.apply(recon_s)
    acc = _mean_nn(aligned, gt_s, cell)
    comp = _mean_nn(gt_s, aligned, cell)
    return MetricReport(
        accuracy=acc,
        completeness=comp,
        chamfer=0.5 * (acc + comp),
        recon_points=len(recon_s),
        gt_points=len(gt_s),
    )
