"""Pipeline configuration: a sectioned key-value text file (INI syntax).

All thresholds are addressable; ``SUBMAP_SLAM_SEED`` and ``SUBMAP_SLAM_OUT``
environment variables override the seed and output directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from typing import Optional

from .backend import SyntheticBackendConfig
from .errors import ConfigError
from .geometry import RansacConfig
from .loops import LoopConfig
from .mapping import MappingConfig
from .posegraph import LmConfig
from .scenesim import TrajectorySpec, WorldConfig
from .tracking import TrackingConfig

ENV_SEED = "SUBMAP_SLAM_SEED"
ENV_OUT = "SUBMAP_SLAM_OUT"


@dataclass(frozen=True, eq=False)
class PipelineConfig:
    # thresholds (paper defaults)
    tau1: float = 0.4
    tau2: float = 0.3
    tau_p: float = 0.7
    tau_global: float = 0.93
    tau_local: float = 0.96
    buffer_size: int = 5  # N
    r_local: int = 3
    # stage toggles
    local_loop: bool = True
    global_loop: bool = True
    mini_flush: bool = True
    # declared choices
    max_gap: int = 30
    optimize_every: int = 5
    match_ratio: float = 0.8
    seed: int = 0
    backend_name: str = "synthetic"
    backend: SyntheticBackendConfig = field(default_factory=SyntheticBackendConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    world_seed: int = 0
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    lm: LmConfig = field(default_factory=LmConfig)

    def __post_init__(self):
        if not (0.0 < self.tau2 < self.tau1 <= 1.0):
            raise ConfigError(f"need 0 < tau2 < tau1 <= 1, got tau1={self.tau1} tau2={self.tau2}")
        if self.buffer_size < 2:
            raise ConfigError("buffer_size must be >= 2")

    def tracking_config(self) -> TrackingConfig:
        return TrackingConfig(
            ratio=self.match_ratio, promote_threshold=self.tau1, ransac=self.ransac
        )

    def loop_config(self) -> LoopConfig:
        return LoopConfig(
            tau1=self.tau1,
            tau2=self.tau2,
            tau_p=self.tau_p,
            tau_global=self.tau_global,
            tau_local=self.tau_local,
            buffer_capacity=self.buffer_size,
            r_local=self.r_local,
            match_ratio=self.match_ratio,
            ransac=self.ransac,
        )

    def mapping_config(self) -> MappingConfig:
        return MappingConfig(
            optimize_every_flushes=self.optimize_every,
            loop_top_n=self.buffer_size,
            lm=self.lm,
        )


def _get(parser, section, key, conv, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        if conv is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _parse_boxes(raw: str):
    boxes = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        vals = [float(v) for v in chunk.split()]
        if len(vals) != 6:
            raise ConfigError(f"box needs 6 numbers (min xyz, max xyz), got {chunk!r}")
        boxes.append((tuple(vals[:3]), tuple(vals[3:])))
    return tuple(boxes)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Build a PipelineConfig from an INI file plus environment overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as f:
                parser.read_file(f, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc

    g = lambda sec, key, conv, default: _get(parser, sec, key, conv, default)

    backend = SyntheticBackendConfig(
        depth_resolution=(g("backend", "resolution", int, 64),) * 2,
        focal=g("backend", "focal", float, 60.0),
        depth_noise_sigma=g("backend", "depth_noise", float, 0.01),
        gauge_scale_range=(
            g("backend", "gauge_min", float, 0.8),
            g("backend", "gauge_max", float, 1.25),
        ),
        pixel_noise_sigma=g("backend", "pixel_noise", float, 0.5),
        descriptor_noise_sigma=g("backend", "descriptor_noise", float, 0.05),
        spurious_fraction=g("backend", "spurious_fraction", float, 0.2),
        embedding_noise_sigma=g("backend", "embedding_noise", float, 0.02),
        max_batch=g("backend", "max_batch", int, 32),
    )
    world = WorldConfig(
        room_size=tuple(
            float(v) for v in g("world", "room", str, "10 10 4").split()
        ),
        interior_boxes=_parse_boxes(g("world", "boxes", str, "")),
        landmark_count=g("world", "landmarks", int, 800),
    )
    trajectory = TrajectorySpec(
        kind=g("trajectory", "kind", str, "square-loop"),
        frame_count=g("trajectory", "frames", int, 240),
        speed=g("trajectory", "speed", float, 0.05),
        look_at=g("trajectory", "look_at", str, "forward"),
        radius=g("trajectory", "radius", float, 3.0),
        height=g("trajectory", "height", float, 0.0),
        step_bound=g("trajectory", "step_bound", float, 0.5),
    )
    ransac = RansacConfig(
        pixel_threshold=g("ransac", "pixel_threshold", float, 2.0),
        confidence=g("ransac", "confidence", float, 0.999),
        max_iterations=g("ransac", "max_iterations", int, 1000),
        min_inliers=g("ransac", "min_inliers", int, 10),
        seed=g("ransac", "seed", int, 0),
    )
    lm = LmConfig(
        rel_tol=g("lm", "rel_tol", float, 1e-9),
        step_tol=g("lm", "step_tol", float, 1e-10),
        max_iters=g("lm", "max_iters", int, 100),
    )

    seed = g("pipeline", "seed", int, 0)
    if ENV_SEED in os.environ:
        try:
            seed = int(os.environ[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED}: {exc}") from exc

    cfg = PipelineConfig(
        tau1=g("pipeline", "tau1", float, 0.4),
        tau2=g("pipeline", "tau2", float, 0.3),
        tau_p=g("pipeline", "tau_p", float, 0.7),
        tau_global=g("pipeline", "tau_global", float, 0.93),
        tau_local=g("pipeline", "tau_local", float, 0.96),
        buffer_size=g("pipeline", "buffer_size", int, 5),
        r_local=g("pipeline", "r_local", int, 3),
        local_loop=g("pipeline", "local_loop", bool, True),
        global_loop=g("pipeline", "global_loop", bool, True),
        mini_flush=g("pipeline", "mini_flush", bool, True),
        max_gap=g("pipeline", "max_gap", int, 30),
        optimize_every=g("pipeline", "optimize_every", int, 5),
        match_ratio=g("pipeline", "match_ratio", float, 0.8),
        seed=seed,
        backend_name=g("backend", "name", str, "synthetic"),
        backend=backend,
        world=world,
        world_seed=g("world", "seed", int, 0),
        trajectory=trajectory,
        ransac=ransac,
        lm=lm,
    )
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def save_manifest(cfg: PipelineConfig, path, extra: Optional[dict] = None) -> None:
    """Write the sequence manifest (world + trajectory + seeds + artifacts)."""
    parser = configparser.ConfigParser()
    parser["world"] = {
        "room": " ".join(repr(v) for v in cfg.world.room_size),
        "boxes": " ; ".join(
            " ".join(repr(x) for x in (*bmin, *bmax)) for bmin, bmax in cfg.world.interior_boxes
        ),
        "landmarks": str(cfg.world.landmark_count),
        "seed": str(cfg.world_seed),
    }
    parser["trajectory"] = {
        "kind": cfg.trajectory.kind,
        "frames": str(cfg.trajectory.frame_count),
        "speed": repr(cfg.trajectory.speed),
        "look_at": cfg.trajectory.look_at,
        "radius": repr(cfg.trajectory.radius),
        "height": repr(cfg.trajectory.height),
        "step_bound": repr(cfg.trajectory.step_bound),
    }
    if extra:
        parser["artifacts"] = {k: str(v) for k, v in extra.items()}
    with open(path, "w") as f:
        parser.write(f)


def load_manifest(path) -> dict:
    """Read a manifest; returns {world, world_seed, trajectory, artifacts}."""
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as f:
            parser.read_file(f, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    g = lambda sec, key, conv, default: _get(parser, sec, key, conv, default)
    world = WorldConfig(
        room_size=tuple(float(v) for v in g("world", "room", str, "10 10 4").split()),
        interior_boxes=_parse_boxes(g("world", "boxes", str, "")),
        landmark_count=g("world", "landmarks", int, 800),
    )
    trajectory = TrajectorySpec(
        kind=g("trajectory", "kind", str, "square-loop"),
        frame_count=g("trajectory", "frames", int, 240),
        speed=g("trajectory", "speed", float, 0.05),
        look_at=g("trajectory", "look_at", str, "forward"),
        radius=g("trajectory", "radius", float, 3.0),
        height=g("trajectory", "height", float, 0.0),
        step_bound=g("trajectory", "step_bound", float, 0.5),
    )
    artifacts = dict(parser["artifacts"]) if parser.has_section("artifacts") else {}
    return {
        "world": world,
        "world_seed": g("world", "seed", int, 0),
        "trajectory": trajectory,
        "artifacts": artifacts,
    }
