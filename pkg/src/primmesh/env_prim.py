"""Primitive-editing environment: 27 seed cuboids, 756 actions, IoU-delta reward."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import (
    BoxSummer,
    ContractError,
    CoverageGrid,
    Cuboid,
    OccupancyGrid,
    iou_from_counts,
    render_depth,
)
from .spaces import Observation, slot_mask

M = 3
N_PRIMS = M ** 3
ACTIONS_PER_PRIM = 28
N_PRIM_ACTIONS = N_PRIMS * ACTIONS_PER_PRIM
PRIM_STEPS = 300
AMOUNTS = (-2, -1, 1, 2)
KINDS = ("drag_v", "drag_v_prime", "delete")
ALPHA1 = 0.1
ALPHA2 = 0.01
ALL_DELETED_REWARD = -1.0
MERGE_THRESHOLDS = (0.85, 0.90)


@dataclass(frozen=True)
class PrimAction:
    index: int
    primitive: int
    kind: str
    axis: Optional[int] = None
    amount: Optional[int] = None


def decode_action(index: int) -> PrimAction:
    index = int(index)
    if not 0 <= index < N_PRIM_ACTIONS:
        raise ContractError(f"prim action index {index} out of range [0, {N_PRIM_ACTIONS})")
    prim, local = divmod(index, ACTIONS_PER_PRIM)
    if local >= 24:
        return PrimAction(index, prim, "delete")
    corner, rest = divmod(local, 12)
    axis, rank = divmod(rest, 4)
    return PrimAction(index, prim, KINDS[corner], axis, AMOUNTS[rank])


def encode_action(primitive: int, kind: str, axis: Optional[int] = None, amount: Optional[int] = None,
                  variant: int = 0) -> int:
    if kind == "delete":
        return primitive * ACTIONS_PER_PRIM + 24 + variant
    corner = KINDS.index(kind)
    return primitive * ACTIONS_PER_PRIM + corner * 12 + axis * 4 + AMOUNTS.index(amount)


def initial_boxes(resolution: int) -> np.ndarray:
    """Seed cubes: one per cell of a 3x3x3 split, half the cell edge, centred."""
    bounds = []
    for i in range(M):
        lo, hi = i * resolution // M, (i + 1) * resolution // M
        size = hi - lo
        edge = max(1, size // 2)
        start = lo + (size - edge) // 2
        bounds.append((start, start + edge))
    boxes = np.zeros((N_PRIMS, 6), dtype=np.int64)
    for n in range(N_PRIMS):
        ix, iy, iz = n % M, (n // M) % M, n // (M * M)
        (x0, x1), (y0, y1), (z0, z1) = bounds[ix], bounds[iy], bounds[iz]
        boxes[n] = (x0, y0, z0, x1, y1, z1)
    return boxes


def apply_drag(box, corner: str, axis: int, amount: int, resolution: int) -> tuple:
    """Move one corner; saturates at the frame and never inverts the box."""
    box = list(int(c) for c in box)
    if corner == "drag_v":
        box[axis] = min(max(box[axis] + amount, 0), box[axis + 3] - 1)
    else:
        box[axis + 3] = max(min(box[axis + 3] + amount, resolution), box[axis] + 1)
    return tuple(box)


@dataclass(frozen=True)
class PrimState:
    reference: np.ndarray
    boxes: np.ndarray
    deleted: np.ndarray
    step: int
    target: OccupancyGrid

    @property
    def cuboids(self) -> List[Cuboid]:
        return [Cuboid.from_array(b, bool(d)) for b, d in zip(self.boxes, self.deleted)]


class PrimEnv:
    """Stateful environment driving one episode at a time.

    ``score_action`` evaluates an action's reward without applying it, which is
    what the greedy demonstrator uses to rank candidates.
    """

    n_actions = N_PRIM_ACTIONS
    n_slots = N_PRIMS
    per_slot = ACTIONS_PER_PRIM

    def __init__(self, resolution: int = 32, n_steps: int = PRIM_STEPS, alpha1: float = ALPHA1,
                 alpha2: float = ALPHA2):
        self.resolution = resolution
        self.n_steps = n_steps
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.history: list = []

    # -- episode control -------------------------------------------------

    def reset(self, target: OccupancyGrid, reference: Optional[np.ndarray] = None) -> PrimState:
        if target.resolution != self.resolution:
            raise ContractError(f"target resolution {target.resolution} != env resolution {self.resolution}")
        self.target = target
        self.reference = render_depth(target) if reference is None else np.asarray(reference, np.float32)
        self.summer = BoxSummer(target)
        self.boxes = initial_boxes(self.resolution)
        self.deleted = np.zeros(N_PRIMS, dtype=bool)
        self.step_count = 0
        self.done = False
        self.coverage = CoverageGrid(target)
        for b in self.boxes:
            self.coverage.replace(None, b)
        self.local = np.array([self._box_iou(b) for b in self.boxes])
        self.history = []
        return self.state

    def restore(self, state: PrimState) -> PrimState:
        self.reset(state.target, state.reference)
        for i in range(N_PRIMS):
            new = None if state.deleted[i] else state.boxes[i]
            self.coverage.replace(self.boxes[i], new)
        self.boxes = np.array(state.boxes, dtype=np.int64)
        self.deleted = np.array(state.deleted, dtype=bool)
        self.local = np.array([0.0 if d else self._box_iou(b) for b, d in zip(self.boxes, self.deleted)])
        self.step_count = state.step
        self.done = self.step_count >= self.n_steps or bool(self.deleted.all())
        return self.state

    def clone(self) -> "PrimEnv":
        other = object.__new__(PrimEnv)
        other.__dict__.update(self.__dict__)
        other.boxes = self.boxes.copy()
        other.deleted = self.deleted.copy()
        other.local = self.local.copy()
        other.coverage = self.coverage.copy()
        other.history = list(self.history)
        return other

    @property
    def state(self) -> PrimState:
        return PrimState(self.reference, self.boxes.copy(), self.deleted.copy(), self.step_count, self.target)

    # -- reward terms ----------------------------------------------------

    def _box_iou(self, box) -> float:
        vol = int(np.prod(np.asarray(box[3:]) - np.asarray(box[:3])))
        return iou_from_counts(self.summer.box_sum(box), vol, self.summer.total)

    def global_iou(self) -> float:
        return self.coverage.iou()

    def local_iou(self) -> float:
        alive = ~self.deleted
        return float(self.local[alive].mean()) if alive.any() else 0.0

    def terms(self) -> tuple:
        """``(I1, I2, N)`` for the current primitives."""
        return self.global_iou(), self.local_iou(), int(self.deleted.sum())

    # -- actions ---------------------------------------------------------

    def legal_mask(self, state: Optional[PrimState] = None) -> np.ndarray:
        step = self.step_count if state is None else state.step
        return slot_mask(step, N_PRIMS, ACTIONS_PER_PRIM)

    def _outcome(self, action: PrimAction):
        """Resulting (box, deleted, d_union, d_inter) for ``action`` on its primitive."""
        i = action.primitive
        old = tuple(self.boxes[i])
        if self.deleted[i]:
            return old, True, 0, 0
        if action.kind == "delete":
            du, di = self.coverage.delta(old, None)
            return old, True, du, di
        new = apply_drag(old, action.kind, action.axis, action.amount, self.resolution)
        du, di = self.coverage.delta(old, new)
        return new, False, du, di

    def _reward_for(self, action: PrimAction, outcome) -> float:
        i = action.primitive
        new, now_deleted, du, di = outcome
        if self.deleted[i]:
            return 0.0
        I1, I2, N = self.terms()
        alive = ~self.deleted
        local = self.local.copy()
        if now_deleted:
            alive = alive.copy()
            alive[i] = False
            if not alive.any():
                return ALL_DELETED_REWARD
            N1 = N + 1
        else:
            if new == tuple(self.boxes[i]):
                return 0.0
            local[i] = self._box_iou(new)
            N1 = N
        I1n = iou_from_counts(self.coverage.inter + di, self.coverage.union + du, self.coverage.target_count)
        I2n = float(local[alive].mean())
        return (I1n - I1) + self.alpha1 * (I2n - I2) + self.alpha2 * (N1 - N)

    def _check_action(self, index: int) -> PrimAction:
        if self.done:
            raise ContractError("episode is done")
        action = decode_action(index)
        if not self.legal_mask()[action.index]:
            raise ContractError(f"action {index} is illegal at step {self.step_count}")
        return action

    def score_action(self, index: int) -> float:
        action = self._check_action(index)
        return self._reward_for(action, self._outcome(action))

    def step(self, index: int):
        action = self._check_action(index)
        outcome = self._outcome(action)
        reward = self._reward_for(action, outcome)
        i = action.primitive
        new, now_deleted, _, _ = outcome
        if not self.deleted[i]:
            old = tuple(self.boxes[i])
            if now_deleted:
                self.coverage.replace(old, None)
                self.deleted[i] = True
                self.local[i] = 0.0
            elif new != old:
                self.coverage.replace(old, new)
                self.boxes[i] = new
                self.local[i] = self._box_iou(new)
        self.step_count += 1
        self.done = self.step_count >= self.n_steps or bool(self.deleted.all())
        I1, I2, N = self.terms()
        self.history.append((self.step_count - 1, action.index, reward, I1, I2, N))
        return self.state, reward, self.done

    # -- observation -----------------------------------------------------

    def observe(self) -> Observation:
        params = self.boxes.astype(np.float32) / self.resolution
        params[self.deleted] = 0.0
        return Observation(self.reference, params.ravel(), self.step_count, self.n_steps)


def observation_length(n_steps: int = PRIM_STEPS, raster: int = 128 * 128) -> int:
    return raster + N_PRIMS * 6 + n_steps


def merge_primitives(cuboids: Sequence[Cuboid], thresholds=MERGE_THRESHOLDS) -> List[Cuboid]:
    """Merge primitives whose pairwise union nearly fills their bounding box.

    One pass per threshold; each connected component of the "union/bbox >=
    threshold" graph is replaced by the bounding box of its members.
    """
    boxes = [np.asarray(c.as_tuple()) for c in cuboids if not c.deleted]
    for eps in thresholds:
        n = len(boxes)
        if n <= 1:
            break
        rows, cols = [], []
        for i in range(n):
            for j in range(i + 1, n):
                if _merge_ratio(boxes[i], boxes[j]) >= eps:
                    rows.append(i)
                    cols.append(j)
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, labels = connected_components(graph, directed=False)
        merged = []
        for comp in range(n_comp):
            members = np.stack([boxes[k] for k in range(n) if labels[k] == comp])
            merged.append(np.concatenate([members[:, :3].min(0), members[:, 3:].max(0)]))
        boxes = merged
    return [Cuboid.from_array(b) for b in boxes]


def _volume(box) -> int:
    return int(np.prod(np.maximum(np.asarray(box[3:]) - np.asarray(box[:3]), 0)))


def _merge_ratio(a, b) -> float:
    overlap = np.concatenate([np.maximum(a[:3], b[:3]), np.minimum(a[3:], b[3:])])
    union = _volume(a) + _volume(b) - _volume(overlap)
    bbox = np.concatenate([np.minimum(a[:3], b[:3]), np.maximum(a[3:], b[3:])])
    return union / _volume(bbox)
