"""Live pipeline: per-frame tracking, keyframe promotion, local loop
closure, buffered dense mapping with corrections, global loop retrieval and
pose-graph optimization.

The three logical contexts (tracking, mapping, global loop) communicate
through bounded in-order channels carrying sequence numbers. They are
scheduled cooperatively at frame boundaries, which makes a run a
deterministic function of (input, seed) while preserving the message-flow
structure: corrections are applied only between frames, mapping consumes
whole flush batches, and the global-loop context reads an append-only view
of the database.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backend import ReconBackend
from .config import PipelineConfig
from .errors import (
    DegenerateConfiguration,
    MissingEmbedding,
    NoSharedKeyframes,
    SingularSystem,
    SubmapSlamError,
    TooFewCorrespondences,
)
from .evaluation import Trajectory
from .liegroups import Pose3
from .loops import (
    APPEND,
    REPLACE,
    FlushBatch,
    KeyframeBuffer,
    SimilarityMatrix,
    confirm_global_loop,
    detect_local_candidates,
    update_similarity,
    verify_candidate,
)
from .mapping import Mapping
from .tracking import (
    LocalSparseMap,
    SparseMapPoint,
    apply_point_corrections,
    track_frame,
    triangulate_new_points,
)


class Channel:
    """Bounded in-order message channel with sequence numbers."""

    def __init__(self, name: str, capacity: int):
        self.name = name
        self.capacity = capacity
        self._q: deque = deque()
        self._next_seq = 0

    def put(self, payload) -> int:
        if len(self._q) >= self.capacity:
            raise RuntimeError(f"channel {self.name} overflow (capacity {self.capacity})")
        seq = self._next_seq
        self._next_seq += 1
        self._q.append((seq, payload))
        return seq

    def drain(self) -> list:
        out = [payload for _, payload in sorted(self._q)]
        self._q.clear()
        return out

    def __len__(self):
        return len(self._q)


@dataclass
class RunArtifacts:
    trajectory: Trajectory  # final (loop-corrected) world_from_cam per frame
    live_trajectory: Trajectory  # as tracked, before post-run refinement
    cloud_points: np.ndarray
    cloud_confidences: np.ndarray
    events: list
    keyframe_count: int
    submap_count: int
    aborted: bool
    mapping: Mapping = field(repr=False, default=None)


class Pipeline:
    def __init__(self, cfg: PipelineConfig, backend: ReconBackend):
        self.cfg = cfg
        self.backend = backend
        self.tracking_cfg = cfg.tracking_config()
        self.loop_cfg = cfg.loop_config()
        self.mapping = Mapping(backend, cfg.mapping_config())
        self.sparse_map = LocalSparseMap()
        self.buffer = KeyframeBuffer(cfg.buffer_size)
        self.matrix = SimilarityMatrix()
        self.k = None  # intrinsics come from the decoder at initialization

        self.corrections_chan = Channel("corrections", capacity=64)
        self.flush_chan = Channel("flush", capacity=2)
        self.candidate_chan = Channel("global-candidates", capacity=16)

        self.events: list[str] = []
        self.live_poses: dict[int, Pose3] = {}  # frame -> world_from_cam as tracked
        self.ref_keyframe: dict[int, int] = {}  # frame -> reference keyframe id
        self.kf_promotion_frame: dict[int, int] = {}
        self.aborted = False
        self._prev_kf: Optional[tuple] = None  # (obs, world_from_cam)
        self._last_promotion = -1
        self._loop_pairs_done: set = set()
        self._flush_count = 0
        self._pose_failed: set = set()

    # -- logging ------------------------------------------------------------

    def _log(self, frame: int, event: str, **kv) -> None:
        parts = [f"{frame:06d}", event]
        parts += [f"{k}={v}" for k, v in kv.items()]
        self.events.append(" ".join(parts))

    def _abort(self, frame: int, stage: str, exc: Exception) -> None:
        self.aborted = True
        self._log(frame, "ABORT", stage=stage, error=type(exc).__name__)

    # -- initialization -------------------------------------------------------

    def initialize(self) -> None:
        """Decode the first N frames into the initial submap and sparse map."""
        n = self.cfg.buffer_size
        if self.backend.frame_count() < n:
            raise SubmapSlamError(
                f"sequence has {self.backend.frame_count()} frames, need >= {n}"
            )
        init_ids = tuple(range(n))
        sm = self.mapping.build_submap(FlushBatch(new_ids=init_ids, old_ids=()))
        self.mapping.register_submap(sm)
        self.k = sm.intrinsics

        # per-keyframe records: observation, pose, promotion event
        for fid in init_ids:
            obs = self.backend.extract_features(fid)
            rec = self.mapping.database.get(fid)
            rec.observation = obs
            pose = sm.keyframe_world_pose(fid)
            rec.pose = pose
            self.live_poses[fid] = pose
            self.ref_keyframe[fid] = fid
            self.kf_promotion_frame[fid] = fid
            self._log(fid, "PROMOTE", kf=fid, source="init")

        # seed the sparse map from the last initialization frame
        seed_id = n - 1
        obs = self.mapping.database.get(seed_id).observation
        grid = sm.pixel_rows(seed_id)
        seeds = []
        for i in range(len(obs.keypoints)):
            u = int(round(obs.keypoints[i][0]))
            v = int(round(obs.keypoints[i][1]))
            if not (0 <= v < grid.shape[0] and 0 <= u < grid.shape[1]):
                continue
            row = grid[v, u]
            if row < 0:
                continue
            pid = self.sparse_map.allocate_id()
            seeds.append(
                SparseMapPoint(
                    id=pid,
                    position=sm.global_pose.apply(sm.cloud.points[row]),
                    descriptor=obs.descriptors[i].copy(),
                    confidence=float(sm.cloud.confidences[row]),
                    source_keyframe=seed_id,
                    source_pixel=(float(obs.keypoints[i][0]), float(obs.keypoints[i][1])),
                )
            )
        self.sparse_map.insert_batch(seeds)
        self.mapping.database.get(seed_id).landmark_ids = [p.id for p in seeds]
        self._prev_kf = (obs, self.live_poses[seed_id])
        self._last_promotion = seed_id
        # buffer continuity: the latest initialization keyframe is the old
        # frame shared with the next flush batch
        self.buffer.push(seed_id, "Old")
        self._log(seed_id, "INIT", submap=sm.id, map_points=len(seeds))

    # -- the frame loop --------------------------------------------------------

    def run(self) -> RunArtifacts:
        self.initialize()
        total = self.backend.frame_count()
        for frame in range(self.cfg.buffer_size, total):
            self._apply_pending_corrections(frame)
            self._track_one(frame)
        self._final_pass(total - 1)
        return self._artifacts(total)

    def _apply_pending_corrections(self, frame: int) -> None:
        messages = self.corrections_chan.drain()
        total_updated = 0
        total_skipped = 0
        total_seeded = 0
        for msg in messages:
            kind = msg[0]
            if kind == "corrections":
                updated, skipped = apply_point_corrections(self.sparse_map, msg[1])
                total_updated += updated
                total_skipped += skipped
            elif kind == "reseed":
                total_seeded += self._apply_reseed(msg[1], msg[2])
        if messages:
            self._log(
                frame,
                "CORRECTIONS",
                updated=total_updated,
                skipped=total_skipped,
                seeded=total_seeded,
            )

    def _apply_reseed(self, sm, kf_id: int) -> int:
        """Seed map landmarks for the keyframe's unmatched keypoints from the
        decoded submap (the map tracks the current keyframe's points)."""
        rec = self.mapping.database.get(kf_id)
        obs = rec.observation
        if obs is None:
            return 0
        grid = sm.pixel_rows(kf_id)
        if grid is None:
            return 0
        from .tracking import match_to_map

        _, matched_idx, _ = match_to_map(obs, self.sparse_map, self.tracking_cfg)
        matched = set(matched_idx.tolist())
        new_points = []
        for i in range(len(obs.keypoints)):
            if i in matched:
                continue
            u = int(round(obs.keypoints[i][0]))
            v = int(round(obs.keypoints[i][1]))
            if not (0 <= v < grid.shape[0] and 0 <= u < grid.shape[1]):
                continue
            row = grid[v, u]
            if row < 0:
                continue
            pid = self.sparse_map.allocate_id()
            new_points.append(
                SparseMapPoint(
                    id=pid,
                    position=sm.global_pose.apply(sm.cloud.points[row]),
                    descriptor=obs.descriptors[i].copy(),
                    confidence=float(sm.cloud.confidences[row]),
                    source_keyframe=kf_id,
                    source_pixel=(float(obs.keypoints[i][0]), float(obs.keypoints[i][1])),
                )
            )
        if new_points:
            self.sparse_map.insert_batch(new_points)
            rec.landmark_ids = sorted(set(rec.landmark_ids) | {p.id for p in new_points})
        # a keyframe whose PnP failed inherits the mapping pose estimate
        promo = self.kf_promotion_frame.get(kf_id)
        if promo is not None and promo in self._pose_failed and rec.pose is not None:
            self.live_poses[promo] = rec.pose
        return len(new_points)

    def _track_one(self, frame: int) -> None:
        obs = self.backend.extract_features(frame)
        outcome = track_frame(obs, self.sparse_map, self.k, self.tracking_cfg)
        if outcome.pose is not None:
            live = outcome.pose.inverse()  # tracker estimates cam_from_world
        else:
            live = self.live_poses[frame - 1]
            self._pose_failed.add(frame)
        self.live_poses[frame] = live
        self.ref_keyframe[frame] = self._last_promotion_kf()

        force = frame - self._last_promotion >= self.cfg.max_gap
        if outcome.decision == "PromoteKeyframe" or force:
            self._promote(frame, obs, outcome, live, forced=force)

    def _last_promotion_kf(self) -> int:
        return self.ref_keyframe.get(self._last_promotion, self._last_promotion)

    def _promote(self, frame, obs, outcome, live, forced) -> None:
        replaced_by = None
        if self.cfg.local_loop:
            replaced_by = self._local_loop(frame, obs)

        if replaced_by is None:
            kf_id = frame
            rec = self.mapping.database.ensure(kf_id)
            rec.observation = obs
            rec.pose = live
            self.kf_promotion_frame[kf_id] = frame
            added = 0
            if outcome.pose is not None and self._prev_kf is not None:
                prev_obs, prev_pose = self._prev_kf
                added = triangulate_new_points(
                    obs,
                    prev_obs,
                    outcome.pose,
                    prev_pose.inverse(),
                    self.k,
                    self.sparse_map,
                    self.tracking_cfg,
                )
            self._rebuild_map(kf_id, obs, outcome)
            rec.landmark_ids = [
                p.id for p in self.sparse_map.points() if p.source_keyframe == kf_id
            ]
            self._prev_kf = (obs, live)
            push_kind = "New"
            self._log(
                frame,
                "PROMOTE",
                kf=kf_id,
                inlier_ratio=round(outcome.inlier_ratio, 4),
                forced=int(forced),
                triangulated=added,
            )
        else:
            kf_id = replaced_by
            rec = self.mapping.database.get(kf_id)
            self._rebuild_map_from_keyframe(kf_id, outcome)
            if rec.observation is not None and rec.pose is not None:
                self._prev_kf = (rec.observation, rec.pose)
            push_kind = "Old"
            self._log(frame, "PROMOTE", kf=kf_id, replaced=1)

        self.ref_keyframe[frame] = kf_id
        self._last_promotion = frame
        self.ref_keyframe[self._last_promotion] = kf_id

        batch = self.buffer.push(kf_id, push_kind)
        if batch is not None:
            self.flush_chan.put(batch)
            self._run_mapping_context(frame)
        elif (
            self.cfg.mini_flush
            and push_kind == "New"
            and len(self.buffer) == 2
            and len(self.buffer.old_frames) == 1
        ):
            self._run_mini_flush(frame, kf_id)

    def _local_loop(self, frame: int, obs) -> Optional[int]:
        """Detect + verify local candidates; returns a ReplaceCurrent id."""
        order = self.mapping.database.ids_in_order()
        n = len(order)
        end = n - 2 * self.cfg.buffer_size
        start = end - 2 * self.cfg.r_local
        if end < 0:
            return None
        window = []
        for idx in range(max(start, 0), end + 1):
            kf = order[idx]
            rec = self.mapping.database.get(kf)
            if rec.pose is not None:
                window.append((kf, rec.pose))
        if not window:
            return None
        candidates = detect_local_candidates(self.sparse_map, window, self.k, self.loop_cfg)
        for cand in candidates:
            cand_obs = self.mapping.database.get(cand).observation
            if cand_obs is None:
                continue
            verdict = verify_candidate(obs, cand_obs, self.loop_cfg)
            if verdict.verdict == APPEND:
                self._log(frame, "LOCAL_LOOP", kf=cand, verdict="append",
                          r=round(verdict.inlier_ratio, 4))
                self.buffer.push(cand, "Old")
            elif verdict.verdict == REPLACE:
                self._log(frame, "LOCAL_LOOP", kf=cand, verdict="replace",
                          r=round(verdict.inlier_ratio, 4))
                return cand
        return None

    def _rebuild_map(self, kf_id, obs, outcome) -> None:
        """Scope the map to the new keyframe: its landmarks + those it observes."""
        keep_ids = set(p.id for p in self.sparse_map.points() if p.source_keyframe == kf_id)
        if len(outcome.inlier_point_ids):
            keep_ids.update(outcome.inlier_point_ids.tolist())
        elif len(outcome.matched_point_ids):
            keep_ids.update(outcome.matched_point_ids.tolist())
        if len(keep_ids) < 8:
            return  # too little to localize against: wait for mapping reseed
        self._retire_and_rebuild(keep_ids)

    def _rebuild_map_from_keyframe(self, kf_id, outcome) -> None:
        store = self.mapping.database.landmark_store
        keep_ids = set(self.mapping.database.get(kf_id).landmark_ids)
        if len(outcome.inlier_point_ids):
            keep_ids.update(outcome.inlier_point_ids.tolist())
        current = {p.id for p in self.sparse_map.points()}
        available = {pid for pid in keep_ids if pid in store or pid in current}
        if not available:
            return  # keep the current map rather than emptying it
        self._retire_and_rebuild(available)

    def _retire_and_rebuild(self, keep_ids) -> None:
        store = self.mapping.database.landmark_store
        current = {p.id: p for p in self.sparse_map.points()}
        store.update(current)  # retire everything; survivors come back below
        keep = []
        for pid in sorted(keep_ids):
            p = current.get(pid) or store.get(pid)
            if p is not None:
                keep.append(p)
        self.sparse_map.rebuild(keep)

    # -- mapping context ---------------------------------------------------------

    def _run_mapping_context(self, frame: int) -> None:
        for batch in self.flush_chan.drain():
            try:
                sm = self.mapping.build_submap(batch)
                summary = self.mapping.register_submap(sm)
            except (NoSharedKeyframes, DegenerateConfiguration, MissingEmbedding,
                    TooFewCorrespondences) as exc:
                self._abort(frame, "mapping", exc)
                continue
            self._flush_count += 1
            self._log(
                frame,
                "FLUSH",
                submap=sm.id,
                keyframes=len(batch),
                edges=summary.edges_added,
            )
            corrections = self.mapping.emit_corrections(sm, self.sparse_map)
            if corrections:
                self.corrections_chan.put(("corrections", corrections))
            if batch.new_ids:
                self.corrections_chan.put(("reseed", sm, batch.new_ids[-1]))
            if (
                self.cfg.optimize_every > 0
                and self._flush_count % self.cfg.optimize_every == 0
                and len(self.mapping.graph.edges) > 0
            ):
                self._optimize(frame, reason="cadence")
        if self.cfg.global_loop:
            self._run_global_context(frame)

    def _run_mini_flush(self, frame: int, kf_id: int) -> None:
        old = self.buffer.old_frames[0]
        batch = FlushBatch(new_ids=(kf_id,), old_ids=(old,))
        try:
            corrections, sm = self.mapping.mini_flush(batch, self.sparse_map)
        except (NoSharedKeyframes, DegenerateConfiguration, MissingEmbedding,
                TooFewCorrespondences) as exc:
            self._abort(frame, "mini-flush", exc)
            return
        self._log(frame, "MINIFLUSH", kf=kf_id, corrections=len(corrections))
        if corrections:
            self.corrections_chan.put(("corrections", corrections))
        self.corrections_chan.put(("reseed", sm, kf_id))

    def _run_global_context(self, frame: int) -> None:
        admitted = update_similarity(
            self.matrix, self.mapping.database, self.cfg.buffer_size, self.loop_cfg
        )
        for pair, score in admitted:
            self.candidate_chan.put((pair, score))
        for pair, score in self.candidate_chan.drain():
            if pair in self._loop_pairs_done:
                continue
            self._loop_pairs_done.add(pair)
            cand = confirm_global_loop(pair, self.mapping.database, self.loop_cfg)
            if cand is None:
                continue
            try:
                edges = self.mapping.loop_mapping(cand, self.matrix)
            except (DegenerateConfiguration, MissingEmbedding, TooFewCorrespondences) as exc:
                self._abort(frame, "loop-mapping", exc)
                continue
            self._log(
                frame,
                "GLOBAL_LOOP",
                query=cand.query_kf,
                candidate=cand.candidate_kf,
                score=round(score, 4),
                edges=edges,
            )
            if edges > 0:
                self._optimize(frame, reason="loop")

    def _optimize(self, frame: int, reason: str) -> None:
        try:
            report = self.mapping.optimize()
        except SingularSystem as exc:
            self._abort(frame, "optimize", exc)
            return
        self._log(
            frame,
            "OPTIMIZE",
            reason=reason,
            iters=report.iterations,
            initial=f"{report.initial_energy:.6e}",
            final=f"{report.final_energy:.6e}",
        )
        # corrections are re-emitted after optimization from the newest submap
        if self.mapping.submaps:
            newest = self.mapping.submaps[max(self.mapping.submaps)]
            corrections = self.mapping.emit_corrections(newest, self.sparse_map)
            if corrections:
                self.corrections_chan.put(("corrections", corrections))

    # -- finalization ---------------------------------------------------------------

    def _final_pass(self, frame: int) -> None:
        if len(self.mapping.graph.edges) > 0:
            self._optimize(frame, reason="final")
        self._log(
            frame,
            "FINAL",
            keyframes=len(self.mapping.database),
            submaps=len(self.mapping.submaps),
        )

    def _final_pose(self, frame: int) -> Pose3:
        """Live pose carried by the optimized pose of its reference keyframe."""
        live = self.live_poses[frame]
        kf = self.ref_keyframe.get(frame)
        if kf is None or kf not in self.mapping.database:
            return live
        rec = self.mapping.database.get(kf)
        kf_live = self.live_poses.get(kf)
        if rec.pose is None or kf_live is None:
            return live
        return rec.pose.compose(kf_live.inverse().compose(live))

    def _artifacts(self, total: int) -> RunArtifacts:
        ts = np.arange(total, dtype=float)
        final_poses = tuple(self._final_pose(f) for f in range(total))
        live_poses = tuple(self.live_poses[f] for f in range(total))
        pts, conf = self.mapping.fused_cloud()
        return RunArtifacts(
            trajectory=Trajectory(ts, final_poses),
            live_trajectory=Trajectory(ts, live_poses),
            cloud_points=pts,
            cloud_confidences=conf,
            events=list(self.events),
            keyframe_count=len(self.mapping.database),
            submap_count=len(self.mapping.submaps),
            aborted=self.aborted,
            mapping=self.mapping,
        )


def run_pipeline(cfg: PipelineConfig, backend: ReconBackend) -> RunArtifacts:
    return Pipeline(cfg, backend).run()
