"""Deterministic synthetic world and trajectory generator.

The world is an axis-aligned box room (viewed from inside) with optional
solid interior boxes. Surfaces support analytic ray casting, landmark
sampling and point-to-surface distances, so every downstream oracle can be
computed in closed form. Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import CameraIntrinsics
from .liegroups import Pose3, Rotation3

TAG_DIM = 64


@dataclass(frozen=True, eq=False)
class WorldConfig:
    room_size: tuple = (10.0, 10.0, 4.0)
    interior_boxes: tuple = ()  # ((min_xyz, max_xyz), ...)
    landmark_count: int = 800
    tag_dim: int = TAG_DIM

    def __post_init__(self):
        if self.landmark_count < 8:
            raise ValueError("need at least 8 landmarks")


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    config: WorldConfig
    seed: int
    landmarks: np.ndarray  # (M, 3) positions on surfaces
    tags: np.ndarray  # (M, tag_dim) unit descriptor tags

    @property
    def room_min(self) -> np.ndarray:
        return -0.5 * np.asarray(self.config.room_size)

    @property
    def room_max(self) -> np.ndarray:
        return 0.5 * np.asarray(self.config.room_size)


def _face_list(world_min, world_max, boxes):
    """(axis, sign, min, max) rectangles: room inner faces + box outer faces."""
    faces = []
    for axis in range(3):
        for sign in (-1, 1):
            faces.append(("room", axis, sign, world_min, world_max))
    for bmin, bmax in boxes:
        for axis in range(3):
            for sign in (-1, 1):
                faces.append(("box", axis, sign, np.asarray(bmin), np.asarray(bmax)))
    return faces


def _sample_on_faces(rng, faces, n):
    areas = []
    for _, axis, _, fmin, fmax in faces:
        other = [a for a in range(3) if a != axis]
        ext = np.asarray(fmax) - np.asarray(fmin)
        areas.append(ext[other[0]] * ext[other[1]])
    areas = np.asarray(areas, dtype=float)
    probs = areas / areas.sum()
    choice = rng.choice(len(faces), size=n, p=probs)
    pts = np.empty((n, 3))
    for i, fi in enumerate(choice):
        _, axis, sign, fmin, fmax = faces[fi]
        p = rng.uniform(fmin, fmax)
        p[axis] = fmax[axis] if sign > 0 else fmin[axis]
        pts[i] = p
    return pts


def generate_world(cfg: WorldConfig, seed: int) -> SyntheticWorld:
    """Sample landmarks on the surface model; deterministic per seed."""
    rng = np.random.default_rng(seed)
    wmin = -0.5 * np.asarray(cfg.room_size)
    wmax = 0.5 * np.asarray(cfg.room_size)
    faces = _face_list(wmin, wmax, cfg.interior_boxes)
    landmarks = _sample_on_faces(rng, faces, cfg.landmark_count)
    tags = rng.normal(size=(cfg.landmark_count, cfg.tag_dim))
    tags /= np.linalg.norm(tags, axis=1, keepdims=True)
    landmarks.flags.writeable = False
    tags.flags.writeable = False
    return SyntheticWorld(cfg, seed, landmarks, tags)


def sample_surface_points(world: SyntheticWorld, n: int, seed: int) -> np.ndarray:
    """Extra ground-truth surface samples (evaluation reference clouds)."""
    rng = np.random.default_rng(seed)
    faces = _face_list(world.room_min, world.room_max, world.config.interior_boxes)
    return _sample_on_faces(rng, faces, n)


def surface_distance(world: SyntheticWorld, pts: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest modeled surface."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    lo = world.room_min
    hi = world.room_max
    # distance to the room shell (valid for points inside the room)
    d_shell = np.minimum(pts - lo, hi - pts).min(axis=1)
    d_shell = np.abs(d_shell)
    best = d_shell
    for bmin, bmax in world.config.interior_boxes:
        bmin = np.asarray(bmin)
        bmax = np.asarray(bmax)
        outside = np.maximum(np.maximum(bmin - pts, pts - bmax), 0.0)
        d_out = np.linalg.norm(outside, axis=1)
        inside = np.minimum(pts - bmin, bmax - pts).min(axis=1)
        d_box = np.where(d_out > 0, d_out, np.abs(inside))
        best = np.minimum(best, d_box)
    return best


# ---------------------------------------------------------------------------
# Ray casting


def cast_depth(world: SyntheticWorld, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """First-hit parameter t along each ray (0 where nothing is hit).

    ``dirs`` need not be unit length; t is in units of the supplied
    direction, so passing camera-frame directions with z = 1 yields
    perspective depth directly.
    """
    from ._kernels import raycast

    return raycast(
        origins,
        dirs,
        world.room_min,
        world.room_max,
        [(np.asarray(a, dtype=float), np.asarray(b, dtype=float)) for a, b in world.config.interior_boxes],
    )


def render_depth(
    world: SyntheticWorld,
    world_from_cam: Pose3,
    k: CameraIntrinsics,
    resolution: Optional[tuple] = None,
) -> np.ndarray:
    """Ray-cast perspective depth grid (rows = v, cols = u), 0 where empty."""
    w, h = resolution if resolution is not None else (k.width, k.height)
    u = np.arange(w, dtype=float)
    v = np.arange(h, dtype=float)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack(
        [(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    r_wc = world_from_cam.rotation.matrix()
    dirs_world = dirs_cam @ r_wc.T
    origins = np.broadcast_to(world_from_cam.translation, dirs_world.shape)
    t = cast_depth(world, origins, dirs_world)
    return t.reshape(h, w)


def landmark_visibility(
    world: SyntheticWorld, world_from_cam: Pose3, k: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pixels, depths, visible) of all landmarks; occlusion-aware."""
    from .geometry import project_points

    cam_from_world = world_from_cam.inverse()
    pix, z, vis = project_points(cam_from_world, k, world.landmarks)
    if np.any(vis):
        idx = np.flatnonzero(vis)
        center = world_from_cam.translation
        dirs = world.landmarks[idx] - center
        origins = np.broadcast_to(center, dirs.shape)
        t = cast_depth(world, origins, dirs)
        # landmark sits on a surface: the first hit must be (almost) itself
        occluded = t < 1.0 - 1e-6
        vis = vis.copy()
        vis[idx[occluded]] = False
    return pix, z, vis


# ---------------------------------------------------------------------------
# Trajectories

TRAJECTORY_KINDS = ("circle", "square-loop", "random-walk", "figure-eight")


@dataclass(frozen=True, eq=False)
class TrajectorySpec:
    kind: str = "square-loop"
    frame_count: int = 240
    speed: float = 0.05  # step length for random-walk; closed paths do one cycle
    look_at: str = "forward"  # "forward" | "center"
    radius: float = 3.0  # circle radius / square half side / eight lobe size
    height: float = 0.0
    step_bound: float = 0.5

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.frame_count < 2:
            raise ValueError("need at least 2 frames")


def look_rotation(forward: np.ndarray, up=(0.0, 0.0, 1.0)) -> Rotation3:
    """world_from_cam rotation with the camera z axis along ``forward``."""
    z = np.asarray(forward, dtype=float)
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    if abs(z @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Rotation3.from_matrix(np.stack([x, y, z], axis=1))


def _square_position(s: float, half: float) -> tuple[np.ndarray, np.ndarray]:
    """Position and tangent on the square loop at arc length s (s in [0, 8*half))."""
    side = 2.0 * half
    s = s % (4.0 * side)
    corners = [
        np.array([half, -half, 0.0]),
        np.array([half, half, 0.0]),
        np.array([-half, half, 0.0]),
        np.array([-half, -half, 0.0]),
    ]
    edge = int(s // side)
    along = s - edge * side
    a = corners[edge]
    b = corners[(edge + 1) % 4]
    tangent = (b - a) / side
    return a + tangent * along, tangent


def generate_trajectory(spec: TrajectorySpec, world: SyntheticWorld, seed: int = 0):
    """Ground-truth world_from_cam poses, one per frame."""
    n = spec.frame_count
    poses = []
    if spec.kind == "circle":
        for i in range(n):
            ang = 2.0 * math.pi * i / (n - 1)
            pos = np.array(
                [spec.radius * math.cos(ang), spec.radius * math.sin(ang), spec.height]
            )
            tangent = np.array([-math.sin(ang), math.cos(ang), 0.0])
            poses.append((pos, tangent))
    elif spec.kind == "square-loop":
        perimeter = 8.0 * spec.radius
        # heading is smoothed across corners so the yaw rate stays trackable
        delta = 0.02 * perimeter
        for i in range(n):
            s = perimeter * i / (n - 1)
            pos, _ = _square_position(s, spec.radius)
            ahead, _ = _square_position((s + delta) % perimeter, spec.radius)
            behind, _ = _square_position((s - delta) % perimeter, spec.radius)
            tangent = ahead - behind
            tangent = tangent / np.linalg.norm(tangent)
            pos = pos + np.array([0.0, 0.0, spec.height])
            poses.append((pos, tangent))
    elif spec.kind == "figure-eight":
        for i in range(n):
            ang = 2.0 * math.pi * i / (n - 1)
            pos = np.array(
                [
                    spec.radius * math.sin(ang),
                    0.5 * spec.radius * math.sin(2.0 * ang),
                    spec.height,
                ]
            )
            tangent = np.array(
                [math.cos(ang), math.cos(2.0 * ang), 0.0]
            )
            if np.linalg.norm(tangent) < 1e-9:
                tangent = np.array([1.0, 0.0, 0.0])
            poses.append((pos, tangent))
    else:  # random-walk
        rng = np.random.default_rng(seed)
        pos = np.array([0.0, 0.0, spec.height])
        heading = rng.uniform(0, 2 * math.pi)
        lim = 0.5 * min(world.config.room_size[0], world.config.room_size[1]) - 1.0
        for _ in range(n):
            tangent = np.array([math.cos(heading), math.sin(heading), 0.0])
            poses.append((pos.copy(), tangent))
            heading += rng.normal() * 0.25
            step = tangent * spec.speed
            nxt = pos + step
            if abs(nxt[0]) > lim or abs(nxt[1]) > lim:
                heading += math.pi / 2.0
                nxt = pos
            pos = nxt

    out = []
    for pos, tangent in poses:
        if spec.look_at == "center":
            target = np.array([0.0, 0.0, spec.height])
            d = target - pos
            if np.linalg.norm(d) < 1e-9:
                d = tangent
            rot = look_rotation(d)
        else:
            rot = look_rotation(tangent)
        out.append(Pose3(rot, pos))

    for a, b in zip(out[:-1], out[1:]):
        if np.linalg.norm(b.translation - a.translation) > spec.step_bound:
            raise ValueError("trajectory violates the configured step bound")
    return out
