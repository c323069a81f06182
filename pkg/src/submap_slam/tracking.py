"""Per-frame tracking against the local sparse map.

Matching is mutual-nearest-neighbor in descriptor space with a Lowe ratio
test; pose estimation is RANSAC PnP; a frame whose inlier ratio drops below
the promotion threshold (or whose PnP fails) becomes a keyframe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NoConsensus, TooFewCorrespondences
from .geometry import (
    CameraIntrinsics,
    Correspondence2D3D,
    RansacConfig,
    solve_pnp_ransac,
    triangulate,
)
from .liegroups import Pose3


@dataclass(frozen=True, eq=False)
class FrameObservation:
    frame_id: int
    keypoints: np.ndarray  # (N, 2) pixels
    descriptors: np.ndarray  # (N, D) unit rows
    # synthetic-backend ground-truth labels (-1 = spurious); not used by the
    # pipeline itself, only by oracles in tests
    landmark_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoint count must equal descriptor row count")


@dataclass
class SparseMapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    confidence: float
    source_keyframe: int
    source_pixel: tuple = (0, 0)  # pixel in the source keyframe (u, v)


class LocalSparseMap:
    """Small landmark set the tracker localizes against.

    The generation counter increments once per mutating operation
    (triangulation insert batch, correction batch, rebuild).
    """

    def __init__(self):
        self._points: dict[int, SparseMapPoint] = {}
        self.generation = 0
        self._next_id = 0

    def __len__(self):
        return len(self._points)

    def __contains__(self, pid):
        return pid in self._points

    def get(self, pid: int) -> SparseMapPoint:
        return self._points[pid]

    def points(self) -> list[SparseMapPoint]:
        return list(self._points.values())

    def ids(self) -> list[int]:
        return list(self._points)

    def allocate_id(self) -> int:
        pid = self._next_id
        self._next_id += 1
        return pid

    def insert_batch(self, points: Sequence[SparseMapPoint]) -> None:
        for p in points:
            if p.id in self._points:
                raise ValueError(f"duplicate landmark id {p.id}")
            self._points[p.id] = p
        self.generation += 1

    def positions(self) -> np.ndarray:
        if not self._points:
            return np.zeros((0, 3))
        return np.array([p.position for p in self._points.values()])

    def descriptor_matrix(self) -> np.ndarray:
        if not self._points:
            return np.zeros((0, 0))
        return np.array([p.descriptor for p in self._points.values()])

    def rebuild(self, keep: Sequence[SparseMapPoint]) -> None:
        """Replace the map contents (keyframe-promotion scoping)."""
        self._points = {p.id: p for p in keep}
        self.generation += 1

    def apply_corrections(self, corrections: Sequence[tuple]) -> tuple[int, int]:
        """Overwrite positions for (point_id, new_position) pairs.

        Returns (updated, skipped); bumps the generation once when anything
        was updated.
        """
        updated = 0
        skipped = 0
        for pid, pos in corrections:
            p = self._points.get(pid)
            if p is None:
                skipped += 1
                continue
            p.position = np.asarray(pos, dtype=float).copy()
            updated += 1
        if updated:
            self.generation += 1
        return updated, skipped


@dataclass(frozen=True, eq=False)
class TrackingConfig:
    ratio: float = 0.8  # Lowe ratio on descriptor distances
    promote_threshold: float = 0.4  # tau_1
    new_point_confidence: float = 0.5
    ransac: RansacConfig = field(default_factory=RansacConfig)


@dataclass
class TrackingOutcome:
    pose: Optional[Pose3]
    inlier_ratio: float
    correspondences: list
    decision: str  # "Tracked" | "PromoteKeyframe"
    matched_obs_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    matched_point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    inlier_point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def match_descriptors(
    desc_a: np.ndarray, desc_b: np.ndarray, ratio: float
) -> list[tuple[int, int]]:
    """Mutual-NN matches (a_idx, b_idx) passing the ratio test on both sides.

    Descriptors are assumed unit-norm; distances are Euclidean.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    sim = desc_a @ desc_b.T
    d2 = np.maximum(2.0 - 2.0 * sim, 0.0)  # squared distances

    best_b = np.argmin(d2, axis=1)
    best_a = np.argmin(d2, axis=0)
    matches = []
    ratio2 = ratio * ratio
    for ia in range(len(desc_a)):
        ib = best_b[ia]
        if best_a[ib] != ia:
            continue
        row = d2[ia]
        d_first = row[ib]
        if len(row) > 1:
            second = np.partition(row, 1)[1]
            if d_first > ratio2 * second:
                continue
        matches.append((ia, int(ib)))
    return matches


def match_to_map(
    obs: FrameObservation, sparse_map: LocalSparseMap, cfg: TrackingConfig
) -> tuple[list[Correspondence2D3D], np.ndarray, np.ndarray]:
    """Match frame keypoints to map landmarks.

    Returns (correspondences, obs_indices, point_ids); each map point is
    matched at most once (mutual NN is injective on the map side).
    """
    pts = sparse_map.points()
    if not pts or len(obs.keypoints) == 0:
        return [], np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    desc_map = np.array([p.descriptor for p in pts])
    pairs = match_descriptors(obs.descriptors, desc_map, cfg.ratio)
    corrs = []
    obs_idx = []
    point_ids = []
    for ia, ib in pairs:
        p = pts[ib]
        corrs.append(Correspondence2D3D(obs.keypoints[ia], p.position, p.id))
        obs_idx.append(ia)
        point_ids.append(p.id)
    return corrs, np.array(obs_idx, dtype=int), np.array(point_ids, dtype=int)


def track_frame(
    obs: FrameObservation,
    sparse_map: LocalSparseMap,
    k: CameraIntrinsics,
    cfg: TrackingConfig,
) -> TrackingOutcome:
    """Track one frame; never mutates the map."""
    corrs, obs_idx, point_ids = match_to_map(obs, sparse_map, cfg)
    if len(corrs) < 4:
        return TrackingOutcome(None, 0.0, corrs, "PromoteKeyframe", obs_idx, point_ids)
    try:
        res = solve_pnp_ransac(corrs, k, cfg.ransac)
    except (NoConsensus, TooFewCorrespondences):
        return TrackingOutcome(None, 0.0, corrs, "PromoteKeyframe", obs_idx, point_ids)
    decision = "Tracked" if res.inlier_ratio >= cfg.promote_threshold else "PromoteKeyframe"
    return TrackingOutcome(
        res.model,
        res.inlier_ratio,
        corrs,
        decision,
        obs_idx,
        point_ids,
        inlier_point_ids=point_ids[res.inlier_mask],
    )


def triangulate_new_points(
    obs_new: FrameObservation,
    obs_ref: FrameObservation,
    pose_new: Pose3,
    pose_ref: Pose3,
    k: CameraIntrinsics,
    sparse_map: LocalSparseMap,
    cfg: TrackingConfig,
) -> int:
    """Triangulate keypoints co-observed by two keyframes into the map.

    Keypoints of the new frame that already match an existing landmark are
    skipped; survivors of the parallax/cheirality/reprojection gates are
    inserted with the configured initial confidence. Returns the insert
    count; the map generation is bumped once when anything was added.
    """
    _, matched_new, _ = match_to_map(obs_new, sparse_map, cfg)
    already = set(matched_new.tolist())
    pairs = match_descriptors(obs_new.descriptors, obs_ref.descriptors, cfg.ratio)

    added = []
    for ia, ib in pairs:
        if ia in already:
            continue
        x = triangulate(
            pose_new, pose_ref, k, obs_new.keypoints[ia], obs_ref.keypoints[ib], cfg.ransac
        )
        if x is None:
            continue
        pid = sparse_map.allocate_id()
        pix = obs_new.keypoints[ia]
        added.append(
            SparseMapPoint(
                id=pid,
                position=x,
                descriptor=obs_new.descriptors[ia].copy(),
                confidence=cfg.new_point_confidence,
                source_keyframe=obs_new.frame_id,
                source_pixel=(float(pix[0]), float(pix[1])),
            )
        )
    if added:
        sparse_map.insert_batch(added)
    return len(added)


def apply_point_corrections(
    sparse_map: LocalSparseMap, corrections: Sequence[tuple]
) -> tuple[int, int]:
    """Overwrite landmark positions; see LocalSparseMap.apply_corrections."""
    return sparse_map.apply_corrections(corrections)
