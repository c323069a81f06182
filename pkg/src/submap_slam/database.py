"""Keyframe storage database: embeddings, observations, landmark links,
submap membership and pose estimates, with append-only binary persistence.

The record file format is documented field-by-field in
``docs/file_formats.md``; records are length-prefixed so the file can be
scanned without parsing payloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .liegroups import Pose3, Rotation3
from .tracking import FrameObservation

MAGIC = b"SMKF"
VERSION = 1


@dataclass
class KeyframeRecord:
    keyframe_id: int
    embedding: Optional[np.ndarray] = None  # (tokens, dim)
    pooled: Optional[np.ndarray] = None  # cached unit retrieval vector
    observation: Optional[FrameObservation] = None
    landmark_ids: list = field(default_factory=list)
    submap_ids: list = field(default_factory=list)
    pose: Optional[Pose3] = None  # world_from_cam estimate


class KeyframeDatabase:
    """Append-only keyframe store; insertion order defines keyframe order."""

    def __init__(self):
        self._records: dict[int, KeyframeRecord] = {}
        self._order: list[int] = []
        # retired sparse-map landmarks, keyed by landmark id (runtime only;
        # the record file stores the per-keyframe landmark id lists)
        self.landmark_store: dict = {}

    def __len__(self):
        return len(self._records)

    def __contains__(self, kf_id):
        return kf_id in self._records

    def ids_in_order(self) -> list[int]:
        return list(self._order)

    def order_index(self, kf_id: int) -> int:
        return self._order.index(kf_id)

    def get(self, kf_id: int) -> KeyframeRecord:
        return self._records[kf_id]

    def ensure(self, kf_id: int) -> KeyframeRecord:
        rec = self._records.get(kf_id)
        if rec is None:
            rec = KeyframeRecord(kf_id)
            self._records[kf_id] = rec
            self._order.append(kf_id)
        return rec

    def has_embedding(self, kf_id: int) -> bool:
        rec = self._records.get(kf_id)
        return rec is not None and rec.embedding is not None

    def store_embedding(self, kf_id: int, tokens: np.ndarray) -> None:
        """Store exactly once (encoder-once contract)."""
        rec = self.ensure(kf_id)
        if rec.embedding is not None:
            raise ValueError(f"embedding for keyframe {kf_id} already stored")
        rec.embedding = np.asarray(tokens, dtype=float)
        pooled = rec.embedding.mean(axis=0)
        n = np.linalg.norm(pooled)
        rec.pooled = pooled / n if n > 0 else pooled

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(MAGIC + struct.pack("<I", VERSION))
            for kf_id in self._order:
                payload = _encode_record(self._records[kf_id])
                f.write(struct.pack("<I", len(payload)))
                f.write(payload)

    @staticmethod
    def load(path) -> "KeyframeDatabase":
        db = KeyframeDatabase()
        with open(path, "rb") as f:
            head = f.read(8)
            if head[:4] != MAGIC:
                raise ValueError(f"{path}: not a keyframe database file")
            version = struct.unpack("<I", head[4:])[0]
            if version != VERSION:
                raise ValueError(f"{path}: unsupported version {version}")
            while True:
                raw = f.read(4)
                if not raw:
                    break
                (length,) = struct.unpack("<I", raw)
                rec = _decode_record(f.read(length))
                db._records[rec.keyframe_id] = rec
                db._order.append(rec.keyframe_id)
        return db


def _pack_array(a: Optional[np.ndarray]) -> bytes:
    if a is None:
        return struct.pack("<b", -1)
    a = np.ascontiguousarray(a, dtype=np.float64)
    out = struct.pack("<b", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return out + a.tobytes()


def _unpack_array(buf: memoryview, off: int):
    (ndim,) = struct.unpack_from("<b", buf, off)
    off += 1
    if ndim < 0:
        return None, off
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(buf, dtype=np.float64, count=count, offset=off).reshape(shape).copy()
    off += 8 * count
    return a, off


def _pack_int_list(vals) -> bytes:
    return struct.pack("<I", len(vals)) + struct.pack(f"<{len(vals)}q", *vals)


def _unpack_int_list(buf: memoryview, off: int):
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    vals = list(struct.unpack_from(f"<{n}q", buf, off))
    off += 8 * n
    return vals, off


def _encode_record(rec: KeyframeRecord) -> bytes:
    parts = [struct.pack("<q", rec.keyframe_id)]
    parts.append(_pack_array(rec.embedding))
    if rec.observation is None:
        parts.append(struct.pack("<b", 0))
    else:
        obs = rec.observation
        parts.append(struct.pack("<b", 1))
        parts.append(struct.pack("<q", obs.frame_id))
        parts.append(_pack_array(obs.keypoints))
        parts.append(_pack_array(obs.descriptors))
        lm = obs.landmark_ids
        parts.append(_pack_array(None if lm is None else lm.astype(np.float64)))
    parts.append(_pack_int_list(rec.landmark_ids))
    parts.append(_pack_int_list(rec.submap_ids))
    if rec.pose is None:
        parts.append(struct.pack("<b", 0))
    else:
        q = rec.pose.rotation.q
        t = rec.pose.translation
        parts.append(struct.pack("<b", 1))
        parts.append(struct.pack("<7d", q[0], q[1], q[2], q[3], t[0], t[1], t[2]))
    return b"".join(parts)


def _decode_record(data: bytes) -> KeyframeRecord:
    buf = memoryview(data)
    off = 0
    (kf_id,) = struct.unpack_from("<q", buf, off)
    off += 8
    embedding, off = _unpack_array(buf, off)
    (has_obs,) = struct.unpack_from("<b", buf, off)
    off += 1
    observation = None
    if has_obs:
        (frame_id,) = struct.unpack_from("<q", buf, off)
        off += 8
        keypoints, off = _unpack_array(buf, off)
        descriptors, off = _unpack_array(buf, off)
        lm, off = _unpack_array(buf, off)
        observation = FrameObservation(
            int(frame_id),
            keypoints,
            descriptors,
            None if lm is None else lm.astype(np.int64),
        )
    landmark_ids, off = _unpack_int_list(buf, off)
    submap_ids, off = _unpack_int_list(buf, off)
    (has_pose,) = struct.unpack_from("<b", buf, off)
    off += 1
    pose = None
    if has_pose:
        vals = struct.unpack_from("<7d", buf, off)
        off += 56
        pose = Pose3(Rotation3(np.array(vals[:4])), np.array(vals[4:]))
    rec = KeyframeRecord(int(kf_id), embedding, None, observation, landmark_ids, submap_ids, pose)
    if embedding is not None:
        pooled = embedding.mean(axis=0)
        n = np.linalg.norm(pooled)
        rec.pooled = pooled / n if n > 0 else pooled
    return rec
