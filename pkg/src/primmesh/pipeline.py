"""End-to-end modeling: Prim-Agent, merge, loop assignment, Mesh-Agent, OBJ."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .env_mesh import MESH_STEPS, MeshEnv, cap_primitives
from .env_prim import ALPHA1, ALPHA2, MERGE_THRESHOLDS, PRIM_STEPS, PrimEnv, merge_primitives
from .geometry import (
    ContractError,
    Cuboid,
    EdgeLoop,
    OccupancyGrid,
    TriangleMesh,
    grid_chamfer,
    iou,
    loft_mesh,
    render_depth,
    voxelize_mesh,
)
from .io import MESH_TRACE_COLUMNS, PRIM_TRACE_COLUMNS, obj_text, write_trace
from .qnetwork import QFunction, ReferenceCache, select_action

METRIC_COLUMNS = ("mode", "category", "accumulated_reward", "iou", "chamfer")


@dataclass
class ModelResult:
    primitives: List[Cuboid]
    merged: List[Cuboid]
    loops: List[EdgeLoop]
    mesh: TriangleMesh
    obj: bytes
    prim_trace: list
    mesh_trace: list
    prim_reward: float
    mesh_reward: float
    iou: Optional[float] = None
    chamfer: Optional[float] = None

    def write(self, dest, name: str = "shape") -> Path:
        dest = Path(dest)
        dest.mkdir(parents=True, exist_ok=True)
        (dest / f"{name}.obj").write_bytes(self.obj)
        write_trace(dest / f"{name}.prim.trace", PRIM_TRACE_COLUMNS, self.prim_trace)
        write_trace(dest / f"{name}.mesh.trace", MESH_TRACE_COLUMNS, self.mesh_trace)
        return dest


def greedy_episode(net: QFunction, env) -> float:
    """Masked greedy rollout (epsilon 0) to the end of the episode."""
    cache = ReferenceCache(net)
    total = 0.0
    while not env.done:
        obs = env.observe()
        a = select_action(net, obs, env.legal_mask(), 0.0, None, cache(obs.reference))
        _, r, _ = env.step(a)
        total += r
    return total


def _blank(trace, start: int, stop: int) -> list:
    # without a target the reward columns are meaningless
    return [row[:start] + (math.nan,) * (stop - start) + row[stop:] for row in trace]


def model_shape(prim_net: QFunction, mesh_net: QFunction, reference: Optional[np.ndarray] = None,
                target: Optional[OccupancyGrid] = None, resolution: Optional[int] = None,
                prim_steps: int = PRIM_STEPS, mesh_steps: int = MESH_STEPS,
                alpha1: float = ALPHA1, alpha2: float = ALPHA2,
                merge_thresholds: Sequence[float] = MERGE_THRESHOLDS) -> ModelResult:
    if reference is None and target is None:
        raise ContractError("model_shape needs a reference raster or a target grid")
    if target is not None:
        resolution = target.resolution
    if resolution is None:
        raise ContractError("resolution unknown: pass a target or the training resolution")
    have_target = target is not None
    target = target if have_target else OccupancyGrid.empty(resolution)
    reference = render_depth(target) if reference is None else np.asarray(reference, np.float32)

    prim_env = PrimEnv(resolution, prim_steps, alpha1, alpha2)
    prim_env.reset(target, reference)
    prim_reward = greedy_episode(prim_net, prim_env)
    primitives = prim_env.state.cuboids
    merged = merge_primitives(primitives, merge_thresholds)
    if not merged:
        raise ContractError("the Prim-Agent deleted every primitive; nothing to mesh")
    merged = cap_primitives(merged)

    mesh_env = MeshEnv(resolution, mesh_steps)
    mesh_env.reset(merged, target, reference)
    mesh_reward = greedy_episode(mesh_net, mesh_env)
    mesh = loft_mesh(mesh_env.loops)
    result = ModelResult(primitives, merged, list(mesh_env.loops), mesh, obj_text(mesh).encode("ascii"),
                         list(prim_env.history), list(mesh_env.history), prim_reward, mesh_reward)
    if have_target:
        solid = voxelize_mesh(result.loops, resolution)
        result.iou = iou(solid, target)
        result.chamfer = grid_chamfer(solid, target) if solid.count() and target.count() else math.nan
    else:
        result.prim_trace = _blank(result.prim_trace, 2, 5)
        result.mesh_trace = _blank(result.mesh_trace, 2, 4)
        result.prim_reward = result.mesh_reward = math.nan
    return result


def loops_from_mesh(mesh: TriangleMesh) -> List[EdgeLoop]:
    """Recover edge loops from a lofted mesh: four vertices per loop, owners from face connectivity."""
    n = len(mesh.vertices)
    if n == 0 or n % 4:
        raise ContractError("a lofted mesh has four vertices per loop")
    blocks = n // 4
    tri_blocks = mesh.triangles // 4
    rows = np.repeat(tri_blocks[:, 0], 2)
    cols = tri_blocks[:, 1:].ravel()
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(blocks, blocks))
    _, labels = connected_components(graph, directed=False)
    # owners in order of first appearance
    first = {}
    for b, lab in enumerate(labels):
        first.setdefault(lab, len(first))
    quads = mesh.vertices.reshape(blocks, 4, 3)
    lo, hi = quads.min(axis=1), quads.max(axis=1)
    loops = []
    for lab in sorted(first, key=first.get):
        members = np.flatnonzero(labels == lab)
        flat = [set(np.flatnonzero(lo[b] == hi[b])) for b in members]
        common = set.intersection(*flat)
        if not common:
            raise ContractError("mesh rings are not axis-perpendicular")
        # the loop axis is flat within every ring and should vary between rings
        varying = [d for d in sorted(common) if len(set(lo[members, d])) > 1]
        axis = (varying or sorted(common))[0]
        for b in members:
            loops.append(EdgeLoop(axis, tuple(np.rint(lo[b]).astype(int)), tuple(np.rint(hi[b]).astype(int)),
                                  first[lab]))
    return loops


def write_metrics(rows: Sequence[dict], dest) -> Path:
    dest = Path(dest)
    with open(dest, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in METRIC_COLUMNS})
    return dest


def read_metrics(src) -> List[dict]:
    with open(src, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in METRIC_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows


def evaluate(prim_net: QFunction, mesh_net: QFunction, shapes: Sequence, mode: str = "model",
             prim_steps: int = PRIM_STEPS, mesh_steps: int = MESH_STEPS) -> List[dict]:
    """Per-category means of Prim-Agent accumulated reward and final mesh IoU / Chamfer."""
    from .training import summarize

    if not shapes:
        raise ContractError("evaluation needs at least one shape")
    rows = []
    for shape in shapes:
        res = model_shape(prim_net, mesh_net, shape.reference, shape.target, prim_steps=prim_steps,
                          mesh_steps=mesh_steps)
        rows.append({"shape": shape.name, "category": shape.category, "accumulated_reward": res.prim_reward,
                     "iou": res.iou, "chamfer": res.chamfer})
    return summarize(rows, mode)
