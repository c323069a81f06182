"""Command-line entry points: simulate | run | eval | pgo | ablate.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numerical failure.
Every command is a deterministic function of (argv, files, seed): reruns
produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .backend import make_backend
from .config import ENV_OUT, PipelineConfig, load_config, load_manifest, save_manifest
from .errors import (
    ConfigError,
    NoConsensus,
    SingularSystem,
    SubmapSlamError,
    TooFewAssociations,
)
from .evaluation import MetricReport, ate_rmse, cloud_metrics
from .fileio import (
    load_ply,
    load_trajectory_tum,
    save_event_log,
    save_metrics,
    save_ply,
    save_trajectory_tum,
)
from .evaluation import Trajectory
from .pipeline import Pipeline
from .posegraph import LmConfig, load_graph, save_graph
from .scenesim import generate_trajectory, generate_world, render_depth

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

GT_CLOUD_FRAME_STRIDE = 10


def _out_dir(args) -> str:
    out = os.environ.get(ENV_OUT, args.out)
    if out is None:
        raise ConfigError("no output directory (pass --out or set SUBMAP_SLAM_OUT)")
    os.makedirs(out, exist_ok=True)
    return out


def _load_cfg(args, need_file=False) -> PipelineConfig:
    if need_file and args.config is None:
        raise ConfigError("--config is required")
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides=overrides or None)
    return cfg


def _build_scene(cfg: PipelineConfig):
    world = generate_world(cfg.world, cfg.world_seed)
    traj = generate_trajectory(cfg.trajectory, world, seed=cfg.world_seed)
    return world, traj


def _gt_cloud(world, traj, intrinsics) -> np.ndarray:
    """Reference cloud: ground-truth depths back-projected at a frame stride."""
    pts = []
    for pose in traj[::GT_CLOUD_FRAME_STRIDE]:
        depth = render_depth(world, pose, intrinsics)
        vs, us = np.nonzero(depth > 0)
        z = depth[vs, us]
        rays = np.stack(
            [
                (us - intrinsics.cx) / intrinsics.fx * z,
                (vs - intrinsics.cy) / intrinsics.fy * z,
                z,
            ],
            axis=1,
        )
        pts.append(pose.apply(rays))
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def _gt_trajectory(traj) -> Trajectory:
    return Trajectory(np.arange(len(traj), dtype=float), tuple(traj))


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    if args.seed is not None:
        cfg = replace(cfg, world_seed=args.seed)
    world, traj = _build_scene(cfg)

    world_ply = os.path.join(out, "world.ply")
    gt_tum = os.path.join(out, "groundtruth.txt")
    gt_cloud_ply = os.path.join(out, "gt_cloud.ply")
    manifest = os.path.join(out, "sequence.ini")

    save_ply(world.landmarks, world_ply)
    save_trajectory_tum(_gt_trajectory(traj), gt_tum)
    save_ply(_gt_cloud(world, traj, cfg.backend.intrinsics()), gt_cloud_ply)
    save_manifest(
        cfg,
        manifest,
        extra={
            "world_ply": "world.ply",
            "groundtruth": "groundtruth.txt",
            "gt_cloud": "gt_cloud.ply",
        },
    )
    print(f"simulate: wrote {world_ply}, {gt_tum}, {gt_cloud_ply}, {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _apply_toggles(cfg: PipelineConfig, args) -> PipelineConfig:
    changes = {}
    if getattr(args, "no_local_loop", False):
        changes["local_loop"] = False
    if getattr(args, "no_global_loop", False):
        changes["global_loop"] = False
    if getattr(args, "no_mini_flush", False):
        changes["mini_flush"] = False
    if getattr(args, "backend", None):
        changes["backend_name"] = args.backend
    return replace(cfg, **changes) if changes else cfg


def _run_once(cfg: PipelineConfig, world, traj):
    backend = make_backend(cfg.backend_name, world, traj, cfg.backend, seed=cfg.seed)
    return Pipeline(cfg, backend).run()


def _metrics_for_run(artifacts, world, traj, cfg) -> MetricReport:
    report = MetricReport()
    gt = _gt_trajectory(traj)
    try:
        report.ate_rmse = ate_rmse(artifacts.trajectory, gt, align="sim3")
        report.pose_pairs = len(gt)
    except TooFewAssociations:
        pass
    if len(artifacts.cloud_points):
        gt_cloud = _gt_cloud(world, traj, cfg.backend.intrinsics())
        cm = cloud_metrics(artifacts.cloud_points, gt_cloud)
        report.accuracy = cm.accuracy
        report.completeness = cm.completeness
        report.chamfer = cm.chamfer
        report.recon_points = cm.recon_points
        report.gt_points = cm.gt_points
    return report


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    cfg = _apply_toggles(cfg, args)
    if args.manifest is not None:
        m = load_manifest(args.manifest)
        cfg = replace(
            cfg, world=m["world"], world_seed=m["world_seed"], trajectory=m["trajectory"]
        )
    out = _out_dir(args)
    world, traj = _build_scene(cfg)
    artifacts = _run_once(cfg, world, traj)

    save_trajectory_tum(artifacts.trajectory, os.path.join(out, "trajectory.txt"))
    save_trajectory_tum(artifacts.live_trajectory, os.path.join(out, "trajectory_live.txt"))
    save_ply(
        artifacts.cloud_points,
        os.path.join(out, "cloud.ply"),
        artifacts.cloud_confidences,
    )
    save_event_log(artifacts.events, os.path.join(out, "events.log"))
    report = _metrics_for_run(artifacts, world, traj, cfg)
    save_metrics(report, os.path.join(out, "metrics.txt"), os.path.join(out, "metrics.json"))

    print(
        f"run: {artifacts.keyframe_count} keyframes, {artifacts.submap_count} submaps, "
        f"ate_rmse={report.ate_rmse!r}"
    )
    if artifacts.aborted:
        print("run: a pipeline stage aborted (see events.log)", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    est = load_trajectory_tum(args.est)
    gt = load_trajectory_tum(args.gt)
    report = MetricReport()
    report.ate_rmse = ate_rmse(est, gt, align=args.align)
    report.pose_pairs = min(len(est), len(gt))
    if args.est_cloud and args.gt_cloud:
        cm = cloud_metrics(load_ply(args.est_cloud), load_ply(args.gt_cloud))
        report.accuracy = cm.accuracy
        report.completeness = cm.completeness
        report.chamfer = cm.chamfer
        report.recon_points = cm.recon_points
        report.gt_points = cm.gt_points
    for key, val in report.as_dict().items():
        print(f"{key}: {val!r}")
    if args.out:
        out = _out_dir(args)
        save_metrics(report, os.path.join(out, "metrics.txt"), os.path.join(out, "metrics.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# pgo


def cmd_pgo(args) -> int:
    graph = load_graph(args.graph)
    if not any(n.fixed for n in graph.nodes.values()):
        first = next(iter(graph.nodes))
        graph.nodes[first].fixed = True
    report = graph.optimize(LmConfig())
    out = _out_dir(args)
    save_graph(graph, os.path.join(out, "optimized.txt"))
    with open(os.path.join(out, "energy_trace.txt"), "w") as f:
        f.write("\n".join(repr(e) for e in report.energy_trace) + "\n")
    print(
        f"pgo: energy {report.initial_energy!r} -> {report.final_energy!r} "
        f"in {report.iterations} iterations (converged={report.converged})"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

ABLATION_ROWS = (
    ("none", False, False),
    ("global-only", False, True),
    ("local-only", True, False),
    ("both", True, True),
)


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    world, traj = _build_scene(cfg)
    rows = []
    for name, local_on, global_on in ABLATION_ROWS:
        run_cfg = replace(cfg, local_loop=local_on, global_loop=global_on)
        artifacts = _run_once(run_cfg, world, traj)
        report = _metrics_for_run(artifacts, world, traj, run_cfg)
        rows.append(
            {
                "configuration": name,
                "local": local_on,
                "global": global_on,
                "ate_rmse": report.ate_rmse,
                "accuracy": report.accuracy,
                "completeness": report.completeness,
            }
        )

    header = f"{'configuration':<14} {'ate_rmse':>12} {'accuracy':>12} {'completeness':>14}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['configuration']:<14} {r['ate_rmse']:>12.6f} {r['accuracy']:>12.6f} "
            f"{r['completeness']:>14.6f}"
        )
    table = "\n".join(lines)
    print(table)
    with open(os.path.join(out, "ablation.txt"), "w") as f:
        f.write(table + "\n")
    with open(os.path.join(out, "ablation.json"), "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="submap-slam", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="pipeline configuration file (INI)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="seed override")

    sp = sub.add_parser("simulate", help="generate a synthetic world + trajectory")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="run the full pipeline on a sequence")
    common(sp)
    sp.add_argument("--manifest", help="sequence manifest from `simulate`")
    sp.add_argument("--backend", help="backend name override (synthetic | ground-truth)")
    sp.add_argument("--no-local-loop", action="store_true")
    sp.add_argument("--no-global-loop", action="store_true")
    sp.add_argument("--no-mini-flush", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="evaluate trajectories (and optionally clouds)")
    sp.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    sp.add_argument("--gt", required=True, help="ground-truth trajectory (TUM)")
    sp.add_argument("--align", choices=("sim3", "se3"), default="sim3")
    sp.add_argument("--est-cloud", help="estimated cloud (PLY)")
    sp.add_argument("--gt-cloud", help="reference cloud (PLY)")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pgo", help="optimize a standalone pose-graph file")
    sp.add_argument("--graph", required=True, help="edge-list graph file")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_pgo)

    sp = sub.add_parser("ablate", help="run the four loop-closure configurations")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularSystem, NoConsensus, TooFewAssociations) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SubmapSlamError as exc:
        print(f"pipeline failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
