import math
from collections import Counter

import numpy as np
import pytest

from oracles import mesh_iou
from primmesh.data import synthetic_shapes
from primmesh.env_mesh import MESH_STEPS, MeshEnv, assign_edge_loops, canonical_sort
from primmesh.env_prim import PRIM_STEPS, PrimEnv
from primmesh.geometry import ContractError, Cuboid, EdgeLoop, loft_mesh
from primmesh.io import parse_obj, read_trace
from primmesh.pipeline import evaluate, loops_from_mesh, model_shape
from primmesh.training import TrainConfig, new_pair

R = 16
TINY = TrainConfig(resolution=R, conv_channels=(2,), conv_kernels=(3,), pool=8, param_hidden=(8,), step_hidden=4,
                   head_hidden=(8,))


@pytest.fixture(scope="module")
def nets():
    shape = synthetic_shapes(1, seed=0, resolution=R)[0]
    prim_env = PrimEnv(R)
    prim_env.reset(shape.target, shape.reference)
    mesh_env = MeshEnv(R)
    mesh_env.reset([Cuboid((0, 0, 0), (4, 4, 4))], shape.target)
    return new_pair(prim_env, TINY).current, new_pair(mesh_env, TINY).current


@pytest.fixture(scope="module")
def modelled(nets):
    shape = synthetic_shapes(1, seed=9, resolution=R)[0]
    return shape, model_shape(*nets, shape.reference, shape.target)


def edges_paired(mesh):
    # every undirected edge of a closed, non-degenerate loft is shared by exactly two triangles
    edges = Counter()
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edges[(min(a, b), max(a, b))] += 1
    return set(edges.values()) == {2}


def vector_area_per_owner(mesh, loops):
    # a closed surface has zero total vector area, even with flat or collapsed rings
    v = mesh.vertices[mesh.triangles]
    area = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    owner = np.array([loops[b].owner for b in mesh.triangles[:, 0] // 4])
    return {o: np.abs(area[owner == o].sum(axis=0)).max() for o in set(owner)}


def test_trace_lengths(modelled, tmp_path):
    _, res = modelled
    assert len(res.prim_trace) == PRIM_STEPS == 300
    assert len(res.mesh_trace) == MESH_STEPS == 100
    res.write(tmp_path, "s")
    prim = read_trace(tmp_path / "s.prim.trace")
    mesh = read_trace(tmp_path / "s.mesh.trace")
    assert [r["step"] for r in prim] == list(range(300))
    assert [r["step"] for r in mesh] == list(range(100))
    assert sum(r["reward"] for r in prim) == pytest.approx(res.prim_reward, abs=1e-9)


def test_obj_closed_and_matches_loops(modelled, tmp_path):
    _, res = modelled
    mesh = parse_obj(res.obj)
    assert max(vector_area_per_owner(mesh, res.loops).values()) < 1e-9
    assert len(mesh.vertices) == 4 * len(res.loops) == 40
    assert loops_from_mesh(mesh) == res.loops


def test_reported_iou_recomputed_from_obj(modelled):
    shape, res = modelled
    loops = loops_from_mesh(parse_obj(res.obj))
    assert res.iou == pytest.approx(mesh_iou(loops, shape.target), abs=1e-12)
    assert res.chamfer >= 0


def test_reference_only(nets):
    shape = synthetic_shapes(1, seed=4, resolution=R)[0]
    res = model_shape(*nets, reference=shape.reference, resolution=R)
    assert res.iou is None and math.isnan(res.prim_reward)
    assert all(math.isnan(row[2]) for row in res.prim_trace)
    assert len(res.loops) == 10


def test_needs_input(nets):
    with pytest.raises(ContractError):
        model_shape(*nets)
    with pytest.raises(ContractError):
        model_shape(*nets, reference=np.zeros((128, 128), np.float32))


def test_loops_from_mesh_round_trip():
    cs = [Cuboid((0, 0, 0), (10, 4, 4)), Cuboid((2, 4, 1), (6, 12, 5)), Cuboid((9, 9, 9), (12, 11, 16))]
    loops = canonical_sort(assign_edge_loops(cs))
    mesh = loft_mesh(loops)
    assert loops_from_mesh(mesh) == loops
    assert edges_paired(mesh)
    assert len(mesh.triangles) == sum(8 * (n - 1) + 4 for n in Counter(l.owner for l in loops).values())
    assert max(vector_area_per_owner(mesh, loops).values()) < 1e-9


def test_loops_from_mesh_rejects_garbage():
    from primmesh.geometry import TriangleMesh
    with pytest.raises(ContractError):
        loops_from_mesh(TriangleMesh(np.zeros((3, 3)), np.zeros((1, 3), int)))


def test_evaluate_rows(nets):
    shapes = synthetic_shapes(2, seed=1, resolution=R)
    rows = evaluate(*nets, shapes, "probe")
    assert rows[-1]["category"] == "all" and rows[-1]["mode"] == "probe"
    assert 0.0 <= rows[-1]["iou"] <= 1.0
