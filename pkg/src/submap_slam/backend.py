"""Reconstruction backends: the pluggable stand-in for the feed-forward
model and the learned feature extractor.

Contracts:

* ``encode`` is deterministic per frame and is expected to be called at most
  once per keyframe (the backend counts calls so tests can assert this).
* ``decode`` expresses its output in the first listed keyframe's camera
  frame; the first reported pose is always the identity.
* The synthetic backend injects a per-call scale gauge so that submaps
  reproduce the scale ambiguity of monocular reconstruction; the injected
  gauges are recorded for test oracles.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BatchTooLarge, BatchTooSmall, UnknownFrame
from .geometry import CameraIntrinsics
from .liegroups import Pose3, Rotation3, Sim3Transform
from .scenesim import SyntheticWorld, landmark_visibility, render_depth
from .tracking import FrameObservation

_ENCODE_SALT = 101
_FEATURE_SALT = 202
_DECODE_SALT = 303
_BASIS_SALT = 404


@dataclass(frozen=True, eq=False)
class BackendDescriptor:
    name: str
    embedding_dim: int
    token_count: int
    depth_resolution: tuple


@dataclass(frozen=True, eq=False)
class KeyframeEmbedding:
    keyframe_id: int
    tokens: np.ndarray  # (token_count, embedding_dim)


@dataclass(frozen=True, eq=False)
class ReconstructionOutput:
    frame_ids: tuple
    depths: np.ndarray  # (F, H, W), 0 where no surface
    confidences: np.ndarray  # (F, H, W) in [0, 1]
    poses: tuple  # Pose3 per frame, in the first frame's camera frame
    intrinsics: CameraIntrinsics
    call_index: int = -1


@dataclass(frozen=True, eq=False)
class SubmapCloud:
    """Inverse-projected reconstruction: one point per positive-depth pixel."""

    points: np.ndarray  # (N, 3) in the submap (anchor camera) frame
    confidences: np.ndarray  # (N,)
    frame_ids: np.ndarray  # (N,)
    pixels: np.ndarray  # (N, 2) integer (u, v)


def pooled_embedding(emb: KeyframeEmbedding) -> np.ndarray:
    """Mean over tokens, unit-normalized (global-loop retrieval feature)."""
    v = emb.tokens.mean(axis=0)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def inverse_project(output: ReconstructionOutput) -> SubmapCloud:
    """One 3D point per positive-depth pixel, in the submap frame."""
    k = output.intrinsics
    pts = []
    confs = []
    fids = []
    pixels = []
    for f, fid in enumerate(output.frame_ids):
        depth = output.depths[f]
        vs, us = np.nonzero(depth > 0)
        z = depth[vs, us]
        rays = np.stack([(us - k.cx) / k.fx * z, (vs - k.cy) / k.fy * z, z], axis=1)
        pts.append(output.poses[f].apply(rays))
        confs.append(output.confidences[f][vs, us])
        fids.append(np.full(len(us), fid, dtype=np.int64))
        pixels.append(np.stack([us, vs], axis=1).astype(np.int64))
    if pts:
        return SubmapCloud(
            np.concatenate(pts),
            np.concatenate(confs),
            np.concatenate(fids),
            np.concatenate(pixels),
        )
    return SubmapCloud(np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64), np.zeros((0, 2), np.int64))


class ReconBackend(ABC):
    """Interface every reconstruction backend satisfies."""

    def __init__(self):
        self.encode_counts: Counter = Counter()

    @abstractmethod
    def descriptor(self) -> BackendDescriptor: ...

    @abstractmethod
    def frame_count(self) -> int: ...

    @abstractmethod
    def encode(self, frame_id: int) -> KeyframeEmbedding: ...

    @abstractmethod
    def decode(self, embeddings: Sequence[KeyframeEmbedding]) -> ReconstructionOutput: ...

    @abstractmethod
    def extract_features(self, frame_id: int) -> FrameObservation: ...


@dataclass(frozen=True, eq=False)
class SyntheticBackendConfig:
    depth_resolution: tuple = (64, 64)
    focal: float = 60.0
    depth_noise_sigma: float = 0.01  # log-normal multiplicative depth noise
    gauge_scale_range: tuple = (0.8, 1.25)
    pixel_noise_sigma: float = 0.5
    descriptor_noise_sigma: float = 0.05
    spurious_fraction: float = 0.2
    embedding_noise_sigma: float = 0.02
    token_count: int = 16
    embedding_dim: int = 64
    max_batch: int = 32
    position_length_scale: float = 2.0
    direction_length_scale: float = 1.0

    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.depth_resolution
        return CameraIntrinsics(
            fx=self.focal,
            fy=self.focal,
            cx=(w - 1) / 2.0,
            cy=(h - 1) / 2.0,
            width=w,
            height=h,
        )


@dataclass(frozen=True, eq=False)
class InjectedGauge:
    call_index: int
    frame_ids: tuple
    anchor_id: int
    scale: float
    true_global_pose: Sim3Transform  # submap frame -> world


class SyntheticBackend(ReconBackend):
    """Simulator-driven backend with controllable noise and gauge injection."""

    name = "synthetic"

    def __init__(
        self,
        world: SyntheticWorld,
        trajectory: Sequence[Pose3],
        config: SyntheticBackendConfig = SyntheticBackendConfig(),
        seed: int = 0,
    ):
        super().__init__()
        self.world = world
        self.trajectory = list(trajectory)
        self.config = config
        self.seed = seed
        self.intrinsics = config.intrinsics()
        self.injected_gauges: list[InjectedGauge] = []
        self._decode_calls = 0

        basis_rng = np.random.default_rng([seed, _BASIS_SALT])
        self._w = basis_rng.normal(size=(config.embedding_dim, 6))
        self._b = basis_rng.uniform(0.0, 2.0 * math.pi, size=config.embedding_dim)

    # -- helpers ----------------------------------------------------------

    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(
            self.name,
            self.config.embedding_dim,
            self.config.token_count,
            self.config.depth_resolution,
        )

    def frame_count(self) -> int:
        return len(self.trajectory)

    def _check_frame(self, frame_id: int) -> None:
        if not 0 <= frame_id < len(self.trajectory):
            raise UnknownFrame(f"frame {frame_id} outside sequence of {len(self.trajectory)}")

    def _pose_feature(self, pose: Pose3) -> np.ndarray:
        z_dir = pose.rotation.matrix()[:, 2]
        return np.concatenate(
            [
                pose.translation / self.config.position_length_scale,
                z_dir / self.config.direction_length_scale,
            ]
        )

    # -- interface --------------------------------------------------------

    def encode(self, frame_id: int) -> KeyframeEmbedding:
        self._check_frame(frame_id)
        self.encode_counts[frame_id] += 1
        cfg = self.config
        base = math.sqrt(2.0) * np.cos(
            self._w @ self._pose_feature(self.trajectory[frame_id]) + self._b
        )
        rng = np.random.default_rng([self.seed, _ENCODE_SALT, frame_id])
        noise = rng.normal(size=(cfg.token_count, cfg.embedding_dim))
        tokens = base[None, :] + cfg.embedding_noise_sigma * noise
        return KeyframeEmbedding(frame_id, tokens)

    def decode(self, embeddings: Sequence[KeyframeEmbedding]) -> ReconstructionOutput:
        if len(embeddings) < 2:
            raise BatchTooSmall(f"decoder needs >= 2 embeddings, got {len(embeddings)}")
        if len(embeddings) > self.config.max_batch:
            raise BatchTooLarge(
                f"decoder batch {len(embeddings)} exceeds max {self.config.max_batch}"
            )
        frame_ids = tuple(int(e.keyframe_id) for e in embeddings)
        for fid in frame_ids:
            self._check_frame(fid)

        call_index = self._decode_calls
        self._decode_calls += 1
        rng = np.random.default_rng([self.seed, _DECODE_SALT, call_index])

        lo, hi = self.config.gauge_scale_range
        scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)

        anchor = frame_ids[0]
        anchor_world = self.trajectory[anchor]
        k = self.intrinsics
        depths = []
        confs = []
        poses = []
        sigma = self.config.depth_noise_sigma
        for fid in frame_ids:
            world_from_cam = self.trajectory[fid]
            depth = render_depth(self.world, world_from_cam, k) * scale
            if sigma > 0:
                xi = rng.normal(size=depth.shape)
                depth = depth * np.exp(sigma * xi)
                conf = 1.0 / (1.0 + np.abs(xi))
            else:
                conf = np.ones_like(depth)
            conf = np.where(depth > 0, conf, 0.0)
            depths.append(depth)
            confs.append(conf)
            rel = anchor_world.inverse().compose(world_from_cam)
            poses.append(Pose3(rel.rotation, rel.translation * scale))

        true_global = anchor_world.to_sim3().compose(
            Sim3Transform(1.0 / scale, Rotation3.identity(), np.zeros(3))
        )
        self.injected_gauges.append(
            InjectedGauge(call_index, frame_ids, anchor, scale, true_global)
        )
        return ReconstructionOutput(
            frame_ids,
            np.stack(depths),
            np.stack(confs),
            tuple(poses),
            k,
            call_index,
        )

    def extract_features(self, frame_id: int) -> FrameObservation:
        self._check_frame(frame_id)
        cfg = self.config
        rng = np.random.default_rng([self.seed, _FEATURE_SALT, frame_id])
        pose = self.trajectory[frame_id]
        pix, _, vis = landmark_visibility(self.world, pose, self.intrinsics)
        idx = np.flatnonzero(vis)
        pix = pix[idx]
        if cfg.pixel_noise_sigma > 0 and len(idx):
            pix = pix + rng.normal(scale=cfg.pixel_noise_sigma, size=pix.shape)
            pix[:, 0] = np.clip(pix[:, 0], 0.0, self.intrinsics.width - 1)
            pix[:, 1] = np.clip(pix[:, 1], 0.0, self.intrinsics.height - 1)
        desc = self.world.tags[idx]
        if cfg.descriptor_noise_sigma > 0 and len(idx):
            desc = desc + rng.normal(scale=cfg.descriptor_noise_sigma, size=desc.shape)
            desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)
        ids = idx.astype(np.int64)

        n_spur = int(rng.binomial(len(idx), cfg.spurious_fraction)) if cfg.spurious_fraction > 0 else 0
        if n_spur:
            spur_pix = rng.uniform(
                [0.0, 0.0], [self.intrinsics.width - 1, self.intrinsics.height - 1], size=(n_spur, 2)
            )
            spur_desc = rng.normal(size=(n_spur, self.world.tags.shape[1]))
            spur_desc /= np.linalg.norm(spur_desc, axis=1, keepdims=True)
            pix = np.concatenate([pix, spur_pix])
            desc = np.concatenate([desc, spur_desc])
            ids = np.concatenate([ids, np.full(n_spur, -1, dtype=np.int64)])
        return FrameObservation(frame_id, pix, desc, ids)


class GroundTruthBackend(SyntheticBackend):
    """Noise-free backend returning exact ground truth (gauge scale 1).

    Exists to demonstrate interface substitutability: the pipeline must run
    unchanged against it.
    """

    name = "ground-truth"

    def __init__(self, world, trajectory, config: Optional[SyntheticBackendConfig] = None, seed: int = 0):
        base = config or SyntheticBackendConfig()
        exact = SyntheticBackendConfig(
            depth_resolution=base.depth_resolution,
            focal=base.focal,
            depth_noise_sigma=0.0,
            gauge_scale_range=(1.0, 1.0),
            pixel_noise_sigma=0.0,
            descriptor_noise_sigma=0.0,
            spurious_fraction=0.0,
            embedding_noise_sigma=0.0,
            token_count=base.token_count,
            embedding_dim=base.embedding_dim,
            max_batch=base.max_batch,
            position_length_scale=base.position_length_scale,
            direction_length_scale=base.direction_length_scale,
        )
        super().__init__(world, trajectory, exact, seed)


BACKEND_NAMES = {
    "synthetic": SyntheticBackend,
    "ground-truth": GroundTruthBackend,
}


def make_backend(name: str, world, trajectory, config=None, seed: int = 0) -> ReconBackend:
    try:
        cls = BACKEND_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; choices: {sorted(BACKEND_NAMES)}")
    if config is None:
        return cls(world, trajectory, seed=seed)
    return cls(world, trajectory, config, seed=seed)
