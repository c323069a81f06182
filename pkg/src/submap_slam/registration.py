"""Closed-form weighted Sim(3) alignment of 3D-3D correspondences.

Solves  min_{s,R,t} sum_i w_i || s R p_i + t - q_i ||^2  exactly via the
weighted extension of the SVD-based similarity alignment. The scale uses
the source-side (p) variance, matching the direction of the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AllZeroConfidence, DegenerateConfiguration, TooFewCorrespondences
from .liegroups import Rotation3, Sim3Transform


@dataclass(frozen=True, eq=False)
class Correspondence3D3D:
    """Weighted pair: p in the source frame, q in the target frame."""

    p: np.ndarray
    q: np.ndarray
    weight: float = 1.0


def normalize_confidences(confidences: Sequence[float]) -> np.ndarray:
    """Scale non-negative confidences so they sum to one."""
    c = np.asarray(confidences, dtype=float)
    if c.size == 0 or not np.any(c > 0):
        raise AllZeroConfidence("need at least one strictly positive confidence")
    if np.any(c < 0):
        raise ValueError("confidences must be non-negative")
    return c / c.sum()


def align_point_sets(
    p: np.ndarray,
    q: np.ndarray,
    weights: Optional[np.ndarray] = None,
    with_scale: bool = True,
) -> tuple[Sim3Transform, float]:
    """Weighted Umeyama alignment of q ~ s R p + t.

    Args:
        p: (N, 3) source points.
        q: (N, 3) target points.
        weights: optional (N,) non-negative weights; uniform when omitted.
        with_scale: solve for scale; otherwise the result has scale 1.

    Returns:
        (transform, residual_rms) where residual_rms is the weighted RMS
        of ``s R p + t - q``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = p.shape[0]
    if n < 3:
        raise TooFewCorrespondences(f"need >= 3 correspondences, got {n}")
    if q.shape != p.shape:
        raise ValueError("point sets must have matching shapes")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        wsum = w.sum()
        if wsum <= 0:
            raise AllZeroConfidence("total weight must be positive")
        w = w / wsum

    p_bar = w @ p
    q_bar = w @ q
    dp = p - p_bar
    dq = q - q_bar

    cov = (dq * w[:, None]).T @ dp
    u, d, vt = np.linalg.svd(cov)

    # Rank of the weighted centered source: collinear sets cannot pin a rotation.
    src_sv = np.linalg.svd((dp * np.sqrt(w)[:, None]), compute_uv=False)
    if src_sv[1] <= max(1e-12 * src_sv[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear or coincident")

    sign = 1.0 if np.linalg.det(u @ vt) >= 0 else -1.0
    flip = np.array([1.0, 1.0, sign])
    r = u @ np.diag(flip) @ vt

    if with_scale:
        var_p = float(w @ np.sum(dp * dp, axis=1))
        s = float((d * flip).sum() / var_p)
        if s <= 0:
            raise DegenerateConfiguration("non-positive scale from degenerate input")
    else:
        s = 1.0

    t = q_bar - s * (r @ p_bar)
    transform = Sim3Transform(s, Rotation3.from_matrix(r), t)

    resid = s * (p @ r.T) + t - q
    rms = float(np.sqrt(w @ np.sum(resid * resid, axis=1)))
    return transform, rms


def weighted_umeyama(corrs: Sequence[Correspondence3D3D]) -> tuple[Sim3Transform, float]:
    """Alignment over correspondence records (see align_point_sets)."""
    if len(corrs) < 3:
        raise TooFewCorrespondences(f"need >= 3 correspondences, got {len(corrs)}")
    p = np.array([c.p for c in corrs], dtype=float)
    q = np.array([c.q for c in corrs], dtype=float)
    w = np.array([c.weight for c in corrs], dtype=float)
    return align_point_sets(p, q, w)
