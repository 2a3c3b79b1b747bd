"""Edge-loop editing environment: 10 loops over the merged primitives, 360 actions."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .geometry import (
    ContractError,
    CoverageGrid,
    Cuboid,
    EdgeLoop,
    OccupancyGrid,
    owner_occupancy,
    render_depth,
)
from .spaces import Observation, slot_mask

N_LOOPS = 10
ACTIONS_PER_LOOP = 36
N_MESH_ACTIONS = N_LOOPS * ACTIONS_PER_LOOP
MESH_STEPS = 100
MESH_AMOUNTS = (-3, -2, -1, 1, 2, 3)
MAX_OWNERS = N_LOOPS // 2


@dataclass(frozen=True)
class MeshAction:
    index: int
    loop: int
    corner: int  # 0 -> V_L, 1 -> V_L'
    axis: int
    amount: int


def decode_mesh_action(index: int) -> MeshAction:
    index = int(index)
    if not 0 <= index < N_MESH_ACTIONS:
        raise ContractError(f"mesh action index {index} out of range [0, {N_MESH_ACTIONS})")
    loop, local = divmod(index, ACTIONS_PER_LOOP)
    corner, rest = divmod(local, 18)
    axis, rank = divmod(rest, 6)
    return MeshAction(index, loop, corner, axis, MESH_AMOUNTS[rank])


def encode_mesh_action(loop: int, corner: int, axis: int, amount: int) -> int:
    return loop * ACTIONS_PER_LOOP + corner * 18 + axis * 6 + MESH_AMOUNTS.index(amount)


def loop_counts(volumes: Sequence[float], n: int = N_LOOPS) -> List[int]:
    """Loops per primitive: volume-proportional, at least 2, remainder to the last.

    Earlier primitives are capped so every later one can still receive its two
    boundary loops.
    """
    count = len(volumes)
    if count == 0:
        raise ContractError("loop assignment needs at least one primitive")
    if n < 2 * count:
        raise ContractError(f"{n} loops cannot give {count} primitives two loops each")
    total = float(sum(volumes))
    out, left = [], n
    for k, vol in enumerate(volumes):
        if k == count - 1:
            out.append(left)
            break
        e = max(math.ceil(n * vol / total + 0.5), 2)
        e = min(e, left - 2 * (count - k - 1))
        out.append(e)
        left -= e
    return out


def assign_edge_loops(cuboids: Sequence[Cuboid], n: int = N_LOOPS) -> List[EdgeLoop]:
    alive = [c for c in cuboids if not c.deleted]
    counts = loop_counts([c.volume() for c in alive], n)
    loops = []
    for owner, (c, e) in enumerate(zip(alive, counts)):
        lengths = [b - a for a, b in zip(c.v, c.v_prime)]
        axis = int(np.argmax(lengths))
        a, L = c.v[axis], lengths[axis]
        for k in range(e):
            pos = a + (2 * k * L + (e - 1)) // (2 * (e - 1))
            v, vp = list(c.v), list(c.v_prime)
            v[axis] = vp[axis] = pos
            loops.append(EdgeLoop(axis, tuple(v), tuple(vp), owner))
    return loops


def canonical_sort(loops: Sequence[EdgeLoop]) -> List[EdgeLoop]:
    return sorted(loops, key=lambda l: (l.owner, l.position))


def cap_primitives(cuboids: Sequence[Cuboid], limit: int = MAX_OWNERS) -> List[Cuboid]:
    """Keep the ``limit`` largest primitives (original order preserved)."""
    alive = [c for c in cuboids if not c.deleted]
    if len(alive) <= limit:
        return alive
    keep = sorted(sorted(range(len(alive)), key=lambda i: -alive[i].volume())[:limit])
    return [alive[i] for i in keep]


@dataclass(frozen=True)
class MeshState:
    reference: np.ndarray
    loops: tuple
    step: int
    target: OccupancyGrid


class MeshEnv:
    n_actions = N_MESH_ACTIONS
    n_slots = N_LOOPS
    per_slot = ACTIONS_PER_LOOP

    def __init__(self, resolution: int = 32, n_steps: int = MESH_STEPS, n_loops: int = N_LOOPS):
        if n_loops != N_LOOPS:
            raise ContractError("the mesh action space is defined for exactly 10 loops")
        self.resolution = resolution
        self.n_steps = n_steps
        self.history: list = []

    def reset(self, cuboids: Sequence[Cuboid], target: OccupancyGrid,
              reference: Optional[np.ndarray] = None) -> MeshState:
        if target.resolution != self.resolution:
            raise ContractError(f"target resolution {target.resolution} != env resolution {self.resolution}")
        loops = canonical_sort(assign_edge_loops(cuboids))
        return self.reset_loops(loops, target, reference)

    def reset_loops(self, loops: Sequence[EdgeLoop], target: OccupancyGrid,
                    reference: Optional[np.ndarray] = None, step: int = 0) -> MeshState:
        if len(loops) != N_LOOPS:
            raise ContractError(f"expected {N_LOOPS} loops, got {len(loops)}")
        self.target = target
        self.reference = render_depth(target) if reference is None else np.asarray(reference, np.float32)
        self.loops = list(loops)
        self.step_count = step
        self.done = step >= self.n_steps
        self.coverage = CoverageGrid(target)
        for owner in sorted({l.owner for l in self.loops}):
            sl, mask = owner_occupancy(self._group(owner), self.resolution)
            self.coverage.add_mask(sl, mask)
        self.history = []
        return self.state

    def restore(self, state: MeshState) -> MeshState:
        return self.reset_loops(list(state.loops), state.target, state.reference, state.step)

    def clone(self) -> "MeshEnv":
        other = object.__new__(MeshEnv)
        other.__dict__.update(self.__dict__)
        other.loops = list(self.loops)
        other.coverage = self.coverage.copy()
        other.history = list(self.history)
        return other

    @property
    def state(self) -> MeshState:
        return MeshState(self.reference, tuple(self.loops), self.step_count, self.target)

    def iou(self) -> float:
        return self.coverage.iou()

    def _group(self, owner: int, loops=None) -> List[EdgeLoop]:
        loops = self.loops if loops is None else loops
        return [l for l in loops if l.owner == owner]

    def legal_mask(self, state: Optional[MeshState] = None) -> np.ndarray:
        step = self.step_count if state is None else state.step
        return slot_mask(step, N_LOOPS, ACTIONS_PER_LOOP)

    def _neighbour_positions(self, j: int):
        loop = self.loops[j]
        prev = self.loops[j - 1].position if j > 0 and self.loops[j - 1].owner == loop.owner else None
        nxt = (self.loops[j + 1].position
               if j + 1 < len(self.loops) and self.loops[j + 1].owner == loop.owner else None)
        return prev, nxt

    def _moved(self, action: MeshAction) -> EdgeLoop:
        R = self.resolution
        loop = self.loops[action.loop]
        v, vp = list(loop.v_l), list(loop.v_l_prime)
        d = action.axis
        if d == loop.axis:
            prev, nxt = self._neighbour_positions(action.loop)
            lo = 0 if prev is None else prev
            hi = R if nxt is None else nxt
            pos = min(max(loop.position + action.amount, lo), hi)
            v[d] = vp[d] = pos
        elif action.corner == 0:
            v[d] = min(max(v[d] + action.amount, 0), vp[d])
        else:
            vp[d] = max(min(vp[d] + action.amount, R), v[d])
        return replace(loop, v_l=tuple(v), v_l_prime=tuple(vp))

    def _delta(self, j: int, new_loop: EdgeLoop):
        old_loop = self.loops[j]
        if new_loop == old_loop:
            return None
        prev, nxt = self._neighbour_positions(j)
        lo = min(old_loop.position, new_loop.position) if prev is None else prev
        hi = max(old_loop.position, new_loop.position) if nxt is None else nxt
        new_loops = list(self.loops)
        new_loops[j] = new_loop
        owner = old_loop.owner
        sl, m_old = owner_occupancy(self._group(owner), self.resolution, lo, hi)
        _, m_new = owner_occupancy(self._group(owner, new_loops), self.resolution, lo, hi)
        return sl, m_old, m_new, new_loops

    def _check_action(self, index: int) -> MeshAction:
        if self.done:
            raise ContractError("episode is done")
        action = decode_mesh_action(index)
        if not self.legal_mask()[action.index]:
            raise ContractError(f"action {index} is illegal at step {self.step_count}")
        return action

    def score_action(self, index: int) -> float:
        action = self._check_action(index)
        change = self._delta(action.loop, self._moved(action))
        if change is None:
            return 0.0
        sl, m_old, m_new, _ = change
        du, di = self.coverage.mask_delta(sl, m_old, m_new)
        cov = self.coverage
        union = cov.union + du + cov.target_count - (cov.inter + di)
        new_iou = (cov.inter + di) / union if union > 0 else 0.0
        return new_iou - cov.iou()

    def step(self, index: int):
        action = self._check_action(index)
        before = self.iou()
        change = self._delta(action.loop, self._moved(action))
        if change is not None:
            sl, m_old, m_new, new_loops = change
            self.coverage.add_mask(sl, m_old, -1)
            self.coverage.add_mask(sl, m_new, +1)
            self.loops = new_loops
        after = self.iou()
        reward = after - before
        self.step_count += 1
        self.done = self.step_count >= self.n_steps
        self.history.append((self.step_count - 1, action.index, reward, after))
        return self.state, reward, self.done

    def observe(self) -> Observation:
        params = np.zeros((N_LOOPS, 2, 4), dtype=np.float32)
        for j, loop in enumerate(self.loops):
            params[j, 0, :3] = np.asarray(loop.v_l) / self.resolution
            params[j, 1, :3] = np.asarray(loop.v_l_prime) / self.resolution
            params[j, :, 3] = loop.axis
        return Observation(self.reference, params.ravel(), self.step_count, self.n_steps)


def mesh_observation_length(n_steps: int = MESH_STEPS, raster: int = 128 * 128) -> int:
    return raster + N_LOOPS * 2 * 4 + n_steps
