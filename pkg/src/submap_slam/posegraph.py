"""Submap-level Sim(3) pose graph with Levenberg-Marquardt optimization.

The energy is  chi^2 = sum_(i,j) e_ij^T Omega_ij e_ij  with
e_ij = log(T_ij^-1 T_i^-1 T_j), minimized over all non-fixed node poses
using right perturbations T <- T * exp(delta). Normal equations are solved
densely below 50 nodes and by sparse LU (fill-reducing ordering) above.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import DisconnectedGraph, SingularSystem
from .liegroups import (
    Sim3Transform,
    sim3_adjoint,
    sim3_dexpinv_right,
    sim3_exp,
    sim3_log,
)

DENSE_NODE_LIMIT = 50

# Energies below this are machine-precision zero: no step can improve them.
ENERGY_FLOOR = 1e-24


@dataclass
class PoseGraphNode:
    submap_id: int
    pose: Sim3Transform
    fixed: bool = False


@dataclass
class PoseGraphEdge:
    i: int
    j: int
    measurement: Sim3Transform
    information: np.ndarray = field(default_factory=lambda: np.eye(7))

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float)
        if info.shape != (7, 7):
            raise ValueError("information matrix must be 7x7")
        if np.max(np.abs(info - info.T)) > 1e-12:
            raise ValueError("information matrix must be symmetric")
        self.information = info


@dataclass
class LmConfig:
    rel_tol: float = 1e-9
    step_tol: float = 1e-10
    max_iters: int = 100
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e12


@dataclass
class OptimizationReport:
    initial_energy: float
    final_energy: float
    iterations: int
    converged: bool
    energy_trace: list[float]


def edge_error(edge: PoseGraphEdge, t_i: Sim3Transform, t_j: Sim3Transform) -> np.ndarray:
    """Residual log(T_ij^-1 T_i^-1 T_j) in (trans, rot, log-scale) order."""
    return sim3_log(edge.measurement.inverse().compose(t_i.inverse()).compose(t_j))


def edge_jacobians(
    edge: PoseGraphEdge, t_i: Sim3Transform, t_j: Sim3Transform
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(error, d_error/d_delta_i, d_error/d_delta_j) for right perturbations."""
    err = edge_error(edge, t_i, t_j)
    jinv = sim3_dexpinv_right(err)
    jac_j = jinv
    jac_i = -jinv @ sim3_adjoint(t_j.inverse().compose(t_i))
    return err, jac_i, jac_j


class PoseGraph:
    """Nodes keyed by submap id; edges carry relative Sim(3) measurements."""

    def __init__(self):
        self.nodes: dict[int, PoseGraphNode] = {}
        self.edges: list[PoseGraphEdge] = []

    def add_node(self, submap_id: int, pose: Sim3Transform, fixed: bool = False) -> None:
        if submap_id in self.nodes:
            raise ValueError(f"node {submap_id} already exists")
        if fixed and any(n.fixed for n in self.nodes.values()):
            raise ValueError("graph already has a fixed node")
        self.nodes[submap_id] = PoseGraphNode(submap_id, pose, fixed)

    def add_edge(
        self,
        i: int,
        j: int,
        measurement: Sim3Transform,
        information: Optional[np.ndarray] = None,
    ) -> None:
        if i == j:
            raise ValueError("self edges are not allowed")
        if i not in self.nodes or j not in self.nodes:
            raise ValueError(f"edge ({i}, {j}) references a missing node")
        if information is None:
            information = np.eye(7)
        self.edges.append(PoseGraphEdge(i, j, measurement, information))

    def fixed_node_id(self) -> int:
        fixed = [n.submap_id for n in self.nodes.values() if n.fixed]
        if len(fixed) != 1:
            raise ValueError(f"expected exactly one fixed node, found {len(fixed)}")
        return fixed[0]

    def energy(self) -> float:
        total = 0.0
        for e in self.edges:
            err = edge_error(e, self.nodes[e.i].pose, self.nodes[e.j].pose)
            total += float(err @ e.information @ err)
        return total

    def chain_initialize(self) -> None:
        """Set node poses by chaining edges in insertion order from identity."""
        if not self.nodes:
            return
        done: dict[int, bool] = {}
        first = self.edges[0].i if self.edges else next(iter(self.nodes))
        self.nodes[first].pose = Sim3Transform.identity()
        done[first] = True
        for e in self.edges:
            if done.get(e.i) and not done.get(e.j):
                self.nodes[e.j].pose = self.nodes[e.i].pose.compose(e.measurement)
                done[e.j] = True
            elif done.get(e.j) and not done.get(e.i):
                self.nodes[e.i].pose = self.nodes[e.j].pose.compose(e.measurement.inverse())
                done[e.i] = True
        if len(done) != len(self.nodes):
            missing = sorted(set(self.nodes) - set(done))
            raise DisconnectedGraph(f"chain initialization left nodes {missing} unset")

    def _check_connected(self) -> None:
        if not self.nodes:
            return
        adj: dict[int, list[int]] = {nid: [] for nid in self.nodes}
        for e in self.edges:
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
        start = self.fixed_node_id()
        seen = {start}
        stack = [start]
        while stack:
            cur = stack.pop()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if len(seen) != len(self.nodes):
            raise SingularSystem(
                f"graph disconnected: {len(self.nodes) - len(seen)} nodes unreachable "
                "from the fixed node"
            )

    def optimize(self, cfg: LmConfig = LmConfig()) -> OptimizationReport:
        """Levenberg-Marquardt with multiplicative damping; in-place update."""
        self._check_connected()
        free_ids = [nid for nid, n in self.nodes.items() if not n.fixed]
        col = {nid: 7 * k for k, nid in enumerate(free_ids)}
        dim = 7 * len(free_ids)

        energy = self.energy()
        trace = [energy]
        report = OptimizationReport(energy, energy, 0, True, trace)
        if dim == 0 or not self.edges:
            return report

        lam = cfg.lambda_init
        iters = 0
        converged = False
        while iters < cfg.max_iters:
            if energy <= ENERGY_FLOOR:
                converged = True
                break
            iters += 1
            h_blocks: dict[tuple[int, int], np.ndarray] = {}
            g = np.zeros(dim)
            for e in self.edges:
                err, jac_i, jac_j = edge_jacobians(
                    e, self.nodes[e.i].pose, self.nodes[e.j].pose
                )
                blocks = []
                if e.i in col:
                    blocks.append((col[e.i], jac_i))
                if e.j in col:
                    blocks.append((col[e.j], jac_j))
                for ca, ja in blocks:
                    g[ca : ca + 7] += ja.T @ (e.information @ err)
                    for cb, jb in blocks:
                        key = (ca, cb)
                        contrib = ja.T @ e.information @ jb
                        if key in h_blocks:
                            h_blocks[key] += contrib
                        else:
                            h_blocks[key] = contrib

            accepted = False
            while lam <= cfg.lambda_max:
                step = self._solve_normal_equations(h_blocks, g, lam)
                if step is None:
                    lam *= cfg.lambda_up
                    continue
                saved = {nid: self.nodes[nid].pose for nid in free_ids}
                for nid in free_ids:
                    delta = step[col[nid] : col[nid] + 7]
                    self.nodes[nid].pose = self.nodes[nid].pose.compose(sim3_exp(delta))
                new_energy = self.energy()
                if new_energy < energy:
                    accepted = True
                    step_norm = float(np.linalg.norm(step))
                    rel = (energy - new_energy) / max(energy, 1e-300)
                    energy = new_energy
                    trace.append(energy)
                    lam = max(lam * cfg.lambda_down, 1e-15)
                    if rel < cfg.rel_tol or step_norm < cfg.step_tol:
                        converged = True
                    break
                for nid in free_ids:
                    self.nodes[nid].pose = saved[nid]
                lam *= cfg.lambda_up
            if not accepted:
                # damping exhausted without descent: treat as converged plateau
                converged = True
                break
            if converged:
                break

        report.final_energy = energy
        report.iterations = iters
        report.converged = converged
        report.energy_trace = trace
        return report

    def _solve_normal_equations(
        self, h_blocks: dict, g: np.ndarray, lam: float
    ) -> Optional[np.ndarray]:
        dim = len(g)
        diag = np.zeros(dim)
        for (ca, cb), blk in h_blocks.items():
            if ca == cb:
                diag[ca : ca + 7] += np.diag(blk)
        if np.any(diag <= 0):
            raise SingularSystem("normal equations have a zero diagonal block")

        if dim <= 7 * DENSE_NODE_LIMIT:
            h = np.zeros((dim, dim))
            for (ca, cb), blk in h_blocks.items():
                h[ca : ca + 7, cb : cb + 7] += blk
            damped = h + lam * np.diag(diag)
            try:
                c, low = scipy.linalg.cho_factor(damped, check_finite=False)
            except np.linalg.LinAlgError:
                return None
            step = scipy.linalg.cho_solve((c, low), -g, check_finite=False)
        else:
            rows, cols, vals = [], [], []
            base = np.arange(7)
            for (ca, cb), blk in h_blocks.items():
                rr, cc = np.meshgrid(base + ca, base + cb, indexing="ij")
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                vals.append(blk.ravel())
            rows.append(np.arange(dim))
            cols.append(np.arange(dim))
            vals.append(lam * diag)
            sp = scipy.sparse.csc_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(dim, dim),
            )
            try:
                lu = scipy.sparse.linalg.splu(sp, permc_spec="MMD_AT_PLUS_A")
                step = lu.solve(-g)
            except RuntimeError:
                return None
        if not np.all(np.isfinite(step)):
            return None
        return step



# ---------------------------------------------------------------------------
# Plain-text edge-list format (see docs/file_formats.md)

_TRI = [(a, b) for a in range(7) for b in range(a, 7)]


def save_graph(graph: PoseGraph, path) -> None:
    lines = []
    for nid, node in graph.nodes.items():
        t = node.pose
        q = t.rotation.q
        vals = [t.scale, q[0], q[1], q[2], q[3], *t.translation]
        lines.append("NODE " + str(nid) + " " + " ".join(repr(float(v)) for v in vals))
        if node.fixed:
            lines.append(f"FIX {nid}")
    for e in graph.edges:
        t = e.measurement
        q = t.rotation.q
        vals = [t.scale, q[0], q[1], q[2], q[3], *t.translation]
        vals += [e.information[a, b] for a, b in _TRI]
        lines.append(
            "EDGE " + f"{e.i} {e.j} " + " ".join(repr(float(v)) for v in vals)
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_graph(path) -> PoseGraph:
    from .liegroups import Rotation3

    graph = PoseGraph()
    fixed_ids = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "NODE":
                    nid = int(parts[1])
                    s, qw, qx, qy, qz, tx, ty, tz = map(float, parts[2:10])
                    graph.add_node(
                        nid,
                        Sim3Transform(s, Rotation3(np.array([qw, qx, qy, qz])), [tx, ty, tz]),
                    )
                elif parts[0] == "FIX":
                    fixed_ids.append(int(parts[1]))
                elif parts[0] == "EDGE":
                    i, j = int(parts[1]), int(parts[2])
                    s, qw, qx, qy, qz, tx, ty, tz = map(float, parts[3:11])
                    tri = list(map(float, parts[11:39]))
                    if len(tri) != 28:
                        raise ValueError("expected 28 upper-triangular entries")
                    info = np.zeros((7, 7))
                    for val, (a, b) in zip(tri, _TRI):
                        info[a, b] = val
                        info[b, a] = val
                    graph.add_edge(
                        i,
                        j,
                        Sim3Transform(s, Rotation3(np.array([qw, qx, qy, qz])), [tx, ty, tz]),
                        info,
                    )
                else:
                    raise ValueError(f"unknown record {parts[0]!r}")
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    for nid in fixed_ids:
        if nid not in graph.nodes:
            raise ValueError(f"FIX references missing node {nid}")
        if any(n.fixed for n in graph.nodes.values()):
            raise ValueError("multiple FIX records")
        graph.nodes[nid].fixed = True
    return graph
