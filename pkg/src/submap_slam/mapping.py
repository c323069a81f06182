"""Dense mapping: submap creation from keyframe-buffer flushes, Sim(3)
registration into the global frame, point corrections back to the tracker,
and loop mapping for confirmed global candidates.

Correspondences between overlapping submaps come from pixel identity on
shared keyframes: the same pixel of the same keyframe, decoded in two
batches, is the same surface point. Edges always point from the existing
submap (i) to the newly registered one (j) with measurement
T_ij = T_i^-1 T_j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backend import ReconBackend, SubmapCloud, inverse_project
from .database import KeyframeDatabase
from .errors import MissingEmbedding, NoSharedKeyframes
from .geometry import CameraIntrinsics
from .liegroups import Pose3, Sim3Transform
from .loops import FlushBatch, LoopCandidate, SimilarityMatrix
from .posegraph import LmConfig, OptimizationReport, PoseGraph
from .registration import align_point_sets
from .tracking import LocalSparseMap


@dataclass
class Submap:
    id: int
    keyframe_ids: tuple  # ordered; first is the anchor
    cloud: SubmapCloud  # in the anchor camera frame
    local_poses: dict  # keyframe id -> Pose3 in the anchor frame
    intrinsics: CameraIntrinsics
    global_pose: Sim3Transform
    decode_call_index: int = -1
    _pixel_rows: dict = field(default_factory=dict, repr=False)

    def pixel_rows(self, kf_id: int) -> Optional[np.ndarray]:
        """(H, W) grid of cloud row indices for one member keyframe (-1 empty)."""
        grid = self._pixel_rows.get(kf_id)
        if grid is None:
            if kf_id not in self.keyframe_ids:
                return None
            h, w = self.intrinsics.height, self.intrinsics.width
            grid = np.full((h, w), -1, dtype=np.int64)
            rows = np.flatnonzero(self.cloud.frame_ids == kf_id)
            us = self.cloud.pixels[rows, 0]
            vs = self.cloud.pixels[rows, 1]
            grid[vs, us] = rows
            self._pixel_rows[kf_id] = grid
        return grid

    def world_points(self) -> np.ndarray:
        return self.global_pose.apply(self.cloud.points)

    def keyframe_world_pose(self, kf_id: int) -> Pose3:
        """world_from_cam of a member keyframe under the current global pose."""
        sim = self.global_pose.compose(self.local_poses[kf_id].to_sim3())
        return Pose3(sim.rotation, sim.translation)


@dataclass(frozen=True, eq=False)
class MappingConfig:
    confidence_floor_frac: float = 0.1  # drop correspondences below frac * max
    min_correspondences: int = 10
    optimize_every_flushes: int = 5
    loop_top_n: int = 5  # matches the keyframe buffer size
    lm: LmConfig = field(default_factory=LmConfig)


@dataclass
class RegistrationSummary:
    edges_added: int
    strongest_partner: Optional[int]
    correspondence_counts: dict


class Mapping:
    """Owns the keyframe database, the submaps and the pose graph."""

    def __init__(self, backend: ReconBackend, config: MappingConfig = MappingConfig()):
        self.backend = backend
        self.config = config
        self.database = KeyframeDatabase()
        self.graph = PoseGraph()
        self.submaps: dict[int, Submap] = {}
        self._next_submap_id = 0
        self.flush_count = 0

    # -- embeddings --------------------------------------------------------

    def embeddings_for(self, kf_ids: Sequence[int], allow_encode: bool = True):
        """Fetch embeddings, encoding (and storing) only absent keyframes."""
        out = []
        for kf in kf_ids:
            if self.database.has_embedding(kf):
                rec = self.database.get(kf)
                from .backend import KeyframeEmbedding

                out.append(KeyframeEmbedding(kf, rec.embedding))
            elif allow_encode:
                emb = self.backend.encode(kf)
                self.database.store_embedding(kf, emb.tokens)
                out.append(emb)
            else:
                raise MissingEmbedding(f"keyframe {kf} has no stored embedding")
        return out

    # -- submap construction ------------------------------------------------

    def build_submap(self, batch: FlushBatch) -> Submap:
        """Decode a flush batch into a submap (not yet registered)."""
        ids = batch.ordered()
        if len(ids) < 2:
            raise ValueError("flush batch needs at least 2 keyframes")
        for kf in batch.old_ids:
            if not self.database.has_embedding(kf):
                raise MissingEmbedding(f"old keyframe {kf} missing from the database")
        embeddings = self.embeddings_for(ids)
        output = self.backend.decode(embeddings)
        cloud = inverse_project(output)
        local_poses = {fid: output.poses[k] for k, fid in enumerate(output.frame_ids)}
        sm = Submap(
            id=self._next_submap_id,
            keyframe_ids=tuple(ids),
            cloud=cloud,
            local_poses=local_poses,
            intrinsics=output.intrinsics,
            global_pose=Sim3Transform.identity(),
            decode_call_index=output.call_index,
        )
        self._next_submap_id += 1
        return sm

    def _shared_correspondences(self, sm: Submap, other: Submap):
        """Pixel-identity 3D-3D correspondences between two submaps.

        Returns (p, q, w_raw): points of ``sm``, their counterparts in
        ``other``, and the per-pair confidence (elementwise min of the two
        sides).
        """
        shared = [kf for kf in sm.keyframe_ids if kf in other.keyframe_ids]
        ps, qs, ws = [], [], []
        for kf in shared:
            rows_a = sm.pixel_rows(kf)
            rows_b = other.pixel_rows(kf)
            if rows_a is None or rows_b is None:
                continue
            both = (rows_a >= 0) & (rows_b >= 0)
            ia = rows_a[both]
            ib = rows_b[both]
            ps.append(sm.cloud.points[ia])
            qs.append(other.cloud.points[ib])
            ws.append(np.minimum(sm.cloud.confidences[ia], other.cloud.confidences[ib]))
        if not ps:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        return np.concatenate(ps), np.concatenate(qs), np.concatenate(ws)

    def _registration_edges(self, sm: Submap):
        """Measurements to every overlapping submap (no graph mutation)."""
        partners: dict[int, None] = {}
        for kf in sm.keyframe_ids:
            if kf in self.database:
                for sid in self.database.get(kf).submap_ids:
                    if sid != sm.id:
                        partners[sid] = None
        edges = []
        for sid in partners:
            other = self.submaps[sid]
            p, q, w = self._shared_correspondences(sm, other)
            if len(p) < self.config.min_correspondences:
                continue
            floor = self.config.confidence_floor_frac * float(w.max())
            keep = w >= floor
            if keep.sum() < self.config.min_correspondences:
                continue
            transform, rms = align_point_sets(p[keep], q[keep], w[keep])
            count = int(keep.sum())
            info = np.eye(7) * (count / (1.0 + rms * rms))
            edges.append((sid, transform, info, count, rms))
        if not edges:
            raise NoSharedKeyframes(
                f"submap {sm.id} shares no usable keyframes with existing submaps"
            )
        return edges

    def register_submap(self, sm: Submap) -> RegistrationSummary:
        """Insert a submap: pose-graph node plus one edge per overlap.

        The first submap becomes the fixed gauge node with identity pose.
        """
        if not self.submaps:
            sm.global_pose = Sim3Transform.identity()
            self._commit(sm, fixed=True)
            return RegistrationSummary(0, None, {})

        edges = self._registration_edges(sm)
        # strongest partner (most correspondences) sets the initial pose
        best = max(edges, key=lambda e: e[3])
        sid, transform, _, count, _ = best
        sm.global_pose = self.submaps[sid].global_pose.compose(transform)

        self._commit(sm, fixed=False)
        for sid, transform, info, _, _ in edges:
            self.graph.add_edge(sid, sm.id, transform, info)
        return RegistrationSummary(
            len(edges), best[0], {e[0]: e[3] for e in edges}
        )

    def _commit(self, sm: Submap, fixed: bool) -> None:
        self.submaps[sm.id] = sm
        self.graph.add_node(sm.id, sm.global_pose, fixed=fixed)
        for kf in sm.keyframe_ids:
            rec = self.database.ensure(kf)
            if sm.id not in rec.submap_ids:
                rec.submap_ids.append(sm.id)
            rec.pose = sm.keyframe_world_pose(kf)

    # -- corrections ---------------------------------------------------------

    def emit_corrections(self, sm: Submap, sparse_map: LocalSparseMap) -> list:
        """Global-frame replacement positions for landmarks born in ``sm``."""
        members = set(sm.keyframe_ids)
        out = []
        for p in sparse_map.points():
            if p.source_keyframe not in members:
                continue
            grid = sm.pixel_rows(p.source_keyframe)
            if grid is None:
                continue
            u = int(round(p.source_pixel[0]))
            v = int(round(p.source_pixel[1]))
            if not (0 <= v < grid.shape[0] and 0 <= u < grid.shape[1]):
                continue
            row = grid[v, u]
            if row < 0:
                continue
            out.append((p.id, sm.global_pose.apply(sm.cloud.points[row])))
        return out

    def mini_flush(self, batch: FlushBatch, sparse_map: LocalSparseMap):
        """Two-frame corrective mapping pass.

        Builds a transient submap, registers it read-only (no node, no edge,
        no membership beyond embedding storage) and returns
        (corrections, transient_submap); corrections cover landmarks sourced
        from the current (new) keyframe.
        """
        if len(batch) != 2:
            raise ValueError("mini flush needs exactly 2 keyframes")
        sm = self.build_submap(batch)
        self._next_submap_id -= 1  # transient: do not consume an id
        edges = self._registration_edges(sm)
        best = max(edges, key=lambda e: e[3])
        sm.global_pose = self.submaps[best[0]].global_pose.compose(best[1])
        current = batch.new_ids[-1] if batch.new_ids else batch.ordered()[-1]
        members = set(sm.keyframe_ids)
        out = []
        for p in sparse_map.points():
            if p.source_keyframe != current or p.source_keyframe not in members:
                continue
            grid = sm.pixel_rows(p.source_keyframe)
            u = int(round(p.source_pixel[0]))
            v = int(round(p.source_pixel[1]))
            if not (0 <= v < grid.shape[0] and 0 <= u < grid.shape[1]):
                continue
            row = grid[v, u]
            if row < 0:
                continue
            out.append((p.id, sm.global_pose.apply(sm.cloud.points[row])))
        # the transient pose is the best current estimate for the new keyframe
        for kf in batch.new_ids:
            rec = self.database.ensure(kf)
            rec.pose = sm.keyframe_world_pose(kf)
        return out, sm

    # -- loop mapping ----------------------------------------------------------

    def loop_mapping(self, candidate: LoopCandidate, matrix: SimilarityMatrix) -> int:
        """Decode a loop submap around a confirmed candidate and insert it.

        Member keyframes: the pair plus the most similar keyframes from the
        similarity matrix (top-N total). A failed registration leaves the
        graph untouched.
        """
        members = [candidate.query_kf, candidate.candidate_kf]
        scored = []
        for (a, b), s in matrix.items():
            if a in members[:2] or b in members[:2]:
                other = b if a in members[:2] else a
                if other not in members and self.database.has_embedding(other):
                    scored.append((-s, other))
        scored.sort()
        for _, kf in scored:
            if len(members) >= self.config.loop_top_n:
                break
            if kf not in members:
                members.append(kf)

        members = [kf for kf in members if self.database.has_embedding(kf)]
        if len(members) < 2:
            return 0
        batch = FlushBatch(new_ids=(), old_ids=tuple(members))
        sm = self.build_submap(batch)
        try:
            edges = self._registration_edges(sm)
        except NoSharedKeyframes:
            self._next_submap_id -= 1
            return 0
        best = max(edges, key=lambda e: e[3])
        sm.global_pose = self.submaps[best[0]].global_pose.compose(best[1])
        self._commit(sm, fixed=False)
        for sid, transform, info, _, _ in edges:
            self.graph.add_edge(sid, sm.id, transform, info)
        return len(edges)

    # -- optimization -----------------------------------------------------------

    def optimize(self) -> OptimizationReport:
        """Run pose-graph LM and refresh submap/keyframe poses lazily."""
        report = self.graph.optimize(self.config.lm)
        for sid, node in self.graph.nodes.items():
            self.submaps[sid].global_pose = node.pose
        for sm in self.submaps.values():
            for kf in sm.keyframe_ids:
                self.database.get(kf).pose = sm.keyframe_world_pose(kf)
        return report

    def fused_cloud(self) -> tuple[np.ndarray, np.ndarray]:
        """All submap points in the world frame, with confidences."""
        pts = [sm.world_points() for sm in self.submaps.values()]
        conf = [sm.cloud.confidences for sm in self.submaps.values()]
        if not pts:
            return np.zeros((0, 3)), np.zeros(0)
        return np.concatenate(pts), np.concatenate(conf)
