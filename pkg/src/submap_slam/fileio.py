"""Text interchange formats: TUM trajectories, ASCII PLY clouds, metric
reports and event logs.

All numbers are written with Python's shortest round-trip decimal repr
(locale independent); every file ends with a newline.
"""

from __future__ import annotations

import json
from typing import Optional, Sequence

import numpy as np

from .evaluation import MetricReport, Trajectory
from .liegroups import Pose3, Rotation3


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# TUM trajectories: "timestamp tx ty tz qx qy qz qw"


def save_trajectory_tum(traj: Trajectory, path) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, pose in zip(traj.timestamps, traj.poses):
        q = pose.rotation.q  # stored (w, x, y, z); TUM wants x y z w
        tx, ty, tz = pose.translation
        lines.append(
            " ".join(
                [_fmt(t), _fmt(tx), _fmt(ty), _fmt(tz), _fmt(q[1]), _fmt(q[2]), _fmt(q[3]), _fmt(q[0])]
            )
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_trajectory_tum(path) -> Trajectory:
    ts = []
    poses = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            t, tx, ty, tz, qx, qy, qz, qw = vals
            ts.append(t)
            poses.append(Pose3(Rotation3(np.array([qw, qx, qy, qz])), np.array([tx, ty, tz])))
    return Trajectory(np.array(ts), tuple(poses))


# ---------------------------------------------------------------------------
# ASCII PLY point clouds


def save_ply(points: np.ndarray, path, confidences: Optional[np.ndarray] = None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    has_conf = confidences is not None
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if has_conf:
        header.append("property double confidence")
    header.append("end_header")
    lines = header
    for i, p in enumerate(points):
        row = [_fmt(p[0]), _fmt(p[1]), _fmt(p[2])]
        if has_conf:
            row.append(_fmt(confidences[i]))
        lines.append(" ".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_ply(path) -> np.ndarray:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertex = None
        props = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            line = line.strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        if n_vertex is None:
            raise ValueError(f"{path}: missing vertex element")
        try:
            ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
        except ValueError:
            raise ValueError(f"{path}: PLY lacks x/y/z properties")
        out = np.empty((n_vertex, 3))
        for i in range(n_vertex):
            parts = f.readline().split()
            out[i] = (float(parts[ix]), float(parts[iy]), float(parts[iz]))
    return out


# ---------------------------------------------------------------------------
# Metric reports


def save_metrics(report: MetricReport, txt_path, json_path=None) -> None:
    d = report.as_dict()
    lines = [f"{k}: {_fmt(v) if isinstance(v, float) else v}" for k, v in d.items()]
    with open(txt_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(d, f, indent=2, sort_keys=True)
            f.write("\n")


def save_event_log(events: Sequence[str], path) -> None:
    with open(path, "w") as f:
        if events:
            f.write("\n".join(events) + "\n")
        else:
            f.write("")
