"""Local (mid-term) and global (long-term) loop closure machinery.

Local loops: project the live sparse map onto a window of past keyframes,
verify candidates by homography inlier ratio, and manage the keyframe
buffer whose flushes drive dense mapping.

Global loops: retrieve similar keyframes by pooled-embedding cosine over a
strided similarity matrix, refine around hits, and confirm by homography.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .database import KeyframeDatabase
from .errors import TooFewCorrespondences
from .geometry import CameraIntrinsics, RansacConfig, estimate_homography_ransac, project_points
from .liegroups import Pose3
from .tracking import FrameObservation, LocalSparseMap, match_descriptors

REJECT = "Reject"
APPEND = "AppendToBuffer"
REPLACE = "ReplaceCurrent"


@dataclass(frozen=True, eq=False)
class LoopConfig:
    tau1: float = 0.4  # highly-similar threshold (shared with keyframe selection)
    tau2: float = 0.3  # dissimilar threshold
    tau_p: float = 0.7  # fraction of map points that must project into a candidate
    tau_global: float = 0.93
    tau_local: float = 0.96
    buffer_capacity: int = 5  # N
    r_local: int = 3
    match_ratio: float = 0.8
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def exclusion_zone(self) -> int:
        # adjacent keyframes trivially match; paper leaves the zone unstated
        return 3 * self.buffer_capacity


@dataclass(frozen=True, eq=False)
class LoopCandidate:
    query_kf: int
    candidate_kf: int
    inlier_ratio: float
    kind: str  # "Local" | "Global"


@dataclass(frozen=True, eq=False)
class LoopVerdict:
    verdict: str  # REJECT | APPEND | REPLACE
    inlier_ratio: float


@dataclass(frozen=True, eq=False)
class FlushBatch:
    new_ids: tuple
    old_ids: tuple

    def ordered(self) -> tuple:
        return self.new_ids + self.old_ids

    def __len__(self):
        return len(self.new_ids) + len(self.old_ids)


class KeyframeBuffer:
    """New + old keyframe lists; flushes when the total count exceeds N."""

    def __init__(self, capacity: int = 5):
        if capacity < 2:
            raise ValueError("buffer capacity must be >= 2")
        self.capacity = capacity
        self.new_frames: list[int] = []
        self.old_frames: list[int] = []
        self._latest: Optional[int] = None

    def __len__(self):
        return len(self.new_frames) + len(self.old_frames)

    def contains(self, kf_id: int) -> bool:
        return kf_id in self.new_frames or kf_id in self.old_frames

    def push(self, kf_id: int, kind: str = "New") -> Optional[FlushBatch]:
        """Append a keyframe; returns the flush batch when the buffer spills.

        Duplicate ids are stored once. After a flush the buffer is left
        holding exactly the latest keyframe (as an old frame: it was already
        part of the flushed batch).
        """
        if kind not in ("New", "Old"):
            raise ValueError(f"kind must be New or Old, got {kind!r}")
        if not self.contains(kf_id):
            (self.new_frames if kind == "New" else self.old_frames).append(kf_id)
        if kind == "New":
            self._latest = kf_id
        elif self._latest is None:
            self._latest = kf_id

        if len(self) > self.capacity:
            batch = FlushBatch(tuple(self.new_frames), tuple(self.old_frames))
            latest = self._latest if self._latest is not None else kf_id
            self.new_frames = []
            self.old_frames = [latest]
            return batch
        return None


def detect_local_candidates(
    sparse_map: LocalSparseMap,
    window: Sequence[tuple[int, Pose3]],
    k: CameraIntrinsics,
    cfg: LoopConfig,
) -> list[int]:
    """Keyframes seeing more than tau_p of the live map.

    ``window`` holds (keyframe_id, world_from_cam) pairs; the caller selects
    the temporal span (ending 2N keyframes before the current one).
    """
    positions = sparse_map.positions()
    if len(positions) == 0:
        return []
    out = []
    for kf_id, world_from_cam in window:
        _, _, vis = project_points(world_from_cam.inverse(), k, positions)
        if vis.sum() / len(positions) > cfg.tau_p:
            out.append(kf_id)
    return out


def verify_candidate(
    query_obs: FrameObservation, candidate_obs: FrameObservation, cfg: LoopConfig
) -> LoopVerdict:
    """Homography verification with the tau_2 / tau_1 decision bands."""
    pairs = match_descriptors(query_obs.descriptors, candidate_obs.descriptors, cfg.match_ratio)
    if len(pairs) < 4:
        return LoopVerdict(REJECT, 0.0)
    matches = [(query_obs.keypoints[a], candidate_obs.keypoints[b]) for a, b in pairs]
    try:
        res = estimate_homography_ransac(matches, cfg.ransac)
    except TooFewCorrespondences:
        return LoopVerdict(REJECT, 0.0)
    r = res.inlier_ratio
    if r <= cfg.tau2:
        return LoopVerdict(REJECT, r)
    if r <= cfg.tau1:
        return LoopVerdict(APPEND, r)
    return LoopVerdict(REPLACE, r)


class SimilarityMatrix:
    """Sparse symmetric keyframe-pair similarity store."""

    def __init__(self):
        self._scores: dict[tuple[int, int], float] = {}

    @staticmethod
    def _key(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a <= b else (b, a)

    def set(self, a: int, b: int, score: float) -> None:
        self._scores[self._key(a, b)] = score

    def get(self, a: int, b: int) -> Optional[float]:
        return self._scores.get(self._key(a, b))

    def __len__(self):
        return len(self._scores)

    def items(self):
        return self._scores.items()


def _pooled(db: KeyframeDatabase, kf_id: int) -> Optional[np.ndarray]:
    rec = db.get(kf_id)
    return rec.pooled


def update_similarity(
    matrix: SimilarityMatrix,
    database: KeyframeDatabase,
    stride: int,
    cfg: LoopConfig,
) -> list[tuple[tuple[int, int], float]]:
    """Extend the similarity matrix; returns pairs newly over tau_local.

    Coarse pass: every stride-th keyframe against every other, outside the
    temporal exclusion zone. Hits above tau_global pull in +-(stride-1)
    neighbors on both sides; a pair is admitted when its score exceeds
    tau_local and it was not already admitted.
    """
    order = [kf for kf in database.ids_in_order() if database.get(kf).pooled is not None]
    index = {kf: i for i, kf in enumerate(order)}
    exclusion = cfg.exclusion_zone()

    def score(a: int, b: int) -> Optional[float]:
        cached = matrix.get(a, b)
        if cached is not None:
            return cached
        pa, pb = _pooled(database, a), _pooled(database, b)
        if pa is None or pb is None:
            return None
        s = float(pa @ pb)
        matrix.set(a, b, s)
        return s

    admitted = []
    seen_admitted = getattr(matrix, "_admitted", None)
    if seen_admitted is None:
        seen_admitted = set()
        matrix._admitted = seen_admitted

    coarse = [kf for i, kf in enumerate(order) if i % stride == 0]
    for ai in range(len(coarse)):
        for bi in range(ai + 1, len(coarse)):
            a, b = coarse[ai], coarse[bi]
            if abs(index[a] - index[b]) < exclusion:
                continue
            s = score(a, b)
            if s is None or s <= cfg.tau_global:
                continue
            # refine around the coarse hit
            for da in range(-(stride - 1), stride):
                for db_ in range(-(stride - 1), stride):
                    ia, ib = index[a] + da, index[b] + db_
                    if not (0 <= ia < len(order) and 0 <= ib < len(order)):
                        continue
                    na, nb = order[ia], order[ib]
                    if abs(ia - ib) < exclusion:
                        continue
                    sn = score(na, nb)
                    if sn is None:
                        continue
                    key = SimilarityMatrix._key(na, nb)
                    if sn > cfg.tau_local and key not in seen_admitted:
                        seen_admitted.add(key)
                        admitted.append((key, sn))
    return admitted


def confirm_global_loop(
    pair: tuple[int, int], database: KeyframeDatabase, cfg: LoopConfig
) -> Optional[LoopCandidate]:
    """Homography confirmation of an admitted retrieval pair."""
    a, b = pair
    obs_a = database.get(a).observation
    obs_b = database.get(b).observation
    if obs_a is None or obs_b is None:
        return None
    verdict = verify_candidate(obs_a, obs_b, cfg)
    if verdict.verdict == REJECT:
        return None
    return LoopCandidate(a, b, verdict.inlier_ratio, "Global")
