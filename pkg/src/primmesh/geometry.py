"""Solid geometry on a voxel canonical frame.

Everything lives in the integer frame ``[0, R]^3`` where one voxel is one unit.
Cell ``(i, j, k)`` covers ``[i, i+1) x [j, j+1) x [k, k+1)``; a cuboid with
integer corners ``v <= v'`` therefore rasterizes exactly to the cells
``i in [x, x')`` and so on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

DEPTH_SIZE = 128


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean voxel field indexed ``cells[x, y, z]``."""

    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.ndim != 3 or len(set(cells.shape)) != 1 or cells.shape[0] < 1:
            raise ContractError(f"occupancy grid must be R^3, got shape {cells.shape}")
        object.__setattr__(self, "cells", cells)

    @property
    def resolution(self) -> int:
        return self.cells.shape[0]

    @classmethod
    def empty(cls, resolution: int) -> "OccupancyGrid":
        return cls(np.zeros((resolution,) * 3, dtype=bool))

    def count(self) -> int:
        return int(self.cells.sum())

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.cells.shape == other.cells.shape and bool(np.array_equal(self.cells, other.cells))

    __hash__ = None


@dataclass(frozen=True)
class Cuboid:
    v: tuple
    v_prime: tuple
    deleted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "v", tuple(int(c) for c in self.v))
        object.__setattr__(self, "v_prime", tuple(int(c) for c in self.v_prime))

    @classmethod
    def from_array(cls, box, deleted: bool = False) -> "Cuboid":
        box = [int(c) for c in box]
        return cls(tuple(box[:3]), tuple(box[3:]), deleted)

    def as_tuple(self) -> tuple:
        return self.v + self.v_prime

    def volume(self) -> int:
        if self.deleted:
            return 0
        return int(np.prod([max(0, b - a) for a, b in zip(self.v, self.v_prime)]))

    def validate(self, resolution: int) -> None:
        if self.deleted:
            return
        for a, b in zip(self.v, self.v_prime):
            if not (0 <= a < b <= resolution):
                raise ContractError(f"invalid cuboid {self.as_tuple()} for R={resolution}")


@dataclass(frozen=True)
class EdgeLoop:
    """Axis-perpendicular rectangle; ``v_l[axis] == v_l_prime[axis]``."""

    axis: int
    v_l: tuple
    v_l_prime: tuple
    owner: int = 0

    def __post_init__(self):
        object.__setattr__(self, "v_l", tuple(int(c) for c in self.v_l))
        object.__setattr__(self, "v_l_prime", tuple(int(c) for c in self.v_l_prime))
        if self.axis not in (0, 1, 2):
            raise ContractError(f"loop axis must be 0, 1 or 2, got {self.axis}")
        if self.v_l[self.axis] != self.v_l_prime[self.axis]:
            raise ContractError("edge loop corners must share the normal-axis coordinate")
        for d in in_plane_axes(self.axis):
            if self.v_l[d] > self.v_l_prime[d]:
                raise ContractError("edge loop corners must be ordered in-plane")

    @property
    def position(self) -> int:
        return self.v_l[self.axis]

    def rect(self) -> tuple:
        """``(u0, v0, u1, v1)`` over the two in-plane axes."""
        u, w = in_plane_axes(self.axis)
        return (self.v_l[u], self.v_l[w], self.v_l_prime[u], self.v_l_prime[w])


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ContractError("triangle index out of range")


def in_plane_axes(axis: int) -> tuple:
    return ((axis + 1) % 3, (axis + 2) % 3)


def _as_box(box) -> np.ndarray:
    if isinstance(box, Cuboid):
        box = box.as_tuple()
    return np.asarray(box, dtype=np.int64)


def box_mask(box, lo=(0, 0, 0), hi=None, resolution: Optional[int] = None) -> np.ndarray:
    """Boolean mask of ``box`` restricted to the region ``[lo, hi)``."""
    box = _as_box(box)
    if hi is None:
        hi = (resolution,) * 3
    axes = []
    for d in range(3):
        c = np.arange(lo[d], hi[d])
        axes.append((c >= box[d]) & (c < box[d + 3]))
    return axes[0][:, None, None] & axes[1][None, :, None] & axes[2][None, None, :]


def voxelize_cuboids(cuboids: Iterable[Cuboid], resolution: int) -> OccupancyGrid:
    cells = np.zeros((resolution,) * 3, dtype=bool)
    for c in cuboids:
        if c.deleted:
            continue
        c.validate(resolution)
        (x, y, z), (x1, y1, z1) = c.v, c.v_prime
        cells[x:x1, y:y1, z:z1] = True
    return OccupancyGrid(cells)


def _check_same_resolution(a: OccupancyGrid, b: OccupancyGrid) -> None:
    if a.resolution != b.resolution:
        raise ContractError(f"resolution mismatch: {a.resolution} vs {b.resolution}")


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    _check_same_resolution(a, b)
    union = np.count_nonzero(a.cells | b.cells)
    if union == 0:
        return 0.0
    return np.count_nonzero(a.cells & b.cells) / union


def iou_from_counts(inter: int, size_a: int, size_b: int) -> float:
    union = size_a + size_b - inter
    return inter / union if union > 0 else 0.0


class BoxSummer:
    """Summed-volume table: occupied-voxel count inside any box in O(1)."""

    def __init__(self, grid: OccupancyGrid):
        R = grid.resolution
        table = np.zeros((R + 1,) * 3, dtype=np.int64)
        table[1:, 1:, 1:] = grid.cells.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
        self.table = table
        self.total = int(table[R, R, R])

    def box_sum(self, box) -> int:
        x0, y0, z0, x1, y1, z1 = (int(c) for c in box)
        t = self.table
        return int(
            t[x1, y1, z1] - t[x0, y1, z1] - t[x1, y0, z1] - t[x1, y1, z0]
            + t[x0, y0, z1] + t[x0, y1, z0] + t[x1, y0, z0] - t[x0, y0, z0]
        )


def per_primitive_iou(p: Cuboid, target: OccupancyGrid, summer: Optional[BoxSummer] = None) -> float:
    if p.deleted:
        raise ContractError("per-primitive IoU of a deleted primitive is undefined")
    p.validate(target.resolution)
    summer = summer or BoxSummer(target)
    inter = summer.box_sum(p.as_tuple())
    return iou_from_counts(inter, p.volume(), summer.total)


class CoverageGrid:
    """Per-voxel coverage counter over a set of boxes, tallied against a target.

    Keeps ``union`` (voxels covered by at least one box) and ``inter`` (covered
    voxels inside the target) up to date as boxes are added, removed or edited,
    touching only the voxels the edit can change.
    """

    def __init__(self, target: OccupancyGrid):
        self.target = target.cells
        self.resolution = target.resolution
        self.target_count = int(self.target.sum())
        self.count = np.zeros(self.target.shape, dtype=np.int16)
        self.union = 0
        self.inter = 0

    def copy(self) -> "CoverageGrid":
        other = object.__new__(CoverageGrid)
        other.target = self.target
        other.resolution = self.resolution
        other.target_count = self.target_count
        other.count = self.count.copy()
        other.union = self.union
        other.inter = self.inter
        return other

    def iou(self) -> float:
        return iou_from_counts(self.inter, self.union, self.target_count)

    @staticmethod
    def _region(old, new):
        if old is None and new is None:
            return None
        if old is None or new is None:
            b = old if new is None else new
            return tuple(b[:3]), tuple(b[3:])
        diff = [i for i in range(6) if old[i] != new[i]]
        if not diff:
            return None
        if len(diff) == 1:
            i = diff[0]
            d = i % 3
            lo, hi = list(old[:3]), list(old[3:])
            lo[d] = min(old[i], new[i])
            hi[d] = max(old[i], new[i])
            return tuple(lo), tuple(hi)
        lo = tuple(min(old[d], new[d]) for d in range(3))
        hi = tuple(max(old[d + 3], new[d + 3]) for d in range(3))
        return lo, hi

    def _masks(self, old, new):
        region = self._region(old, new)
        if region is None:
            return None
        lo, hi = region
        sl = tuple(slice(lo[d], hi[d]) for d in range(3))
        shape = tuple(hi[d] - lo[d] for d in range(3))
        m_old = box_mask(old, lo, hi) if old is not None else np.zeros(shape, bool)
        m_new = box_mask(new, lo, hi) if new is not None else np.zeros(shape, bool)
        return sl, m_old, m_new

    def delta(self, old, new) -> tuple:
        """``(d_union, d_inter)`` if box ``old`` were replaced by ``new``.

        Either may be ``None`` (absent box). Nothing is mutated.
        """
        old = None if old is None else tuple(int(c) for c in old)
        new = None if new is None else tuple(int(c) for c in new)
        masks = self._masks(old, new)
        if masks is None:
            return 0, 0
        sl, m_old, m_new = masks
        c = self.count[sl]
        t = self.target[sl]
        gained = m_new & ~m_old & (c == 0)
        lost = m_old & ~m_new & (c == 1)
        d_union = int(np.count_nonzero(gained)) - int(np.count_nonzero(lost))
        d_inter = int(np.count_nonzero(gained & t)) - int(np.count_nonzero(lost & t))
        return d_union, d_inter

    def replace(self, old, new) -> None:
        old = None if old is None else tuple(int(c) for c in old)
        new = None if new is None else tuple(int(c) for c in new)
        d_union, d_inter = self.delta(old, new)
        masks = self._masks(old, new)
        if masks is None:
            return
        sl, m_old, m_new = masks
        self.count[sl] += m_new.astype(np.int16) - m_old.astype(np.int16)
        self.union += d_union
        self.inter += d_inter

    def add_mask(self, sl, mask: np.ndarray, sign: int = 1) -> None:
        """Add (or remove, ``sign=-1``) an arbitrary occupancy block at ``sl``."""
        c = self.count[sl]
        t = self.target[sl]
        if sign > 0:
            changed = mask & (c == 0)
            self.union += int(np.count_nonzero(changed))
            self.inter += int(np.count_nonzero(changed & t))
        else:
            changed = mask & (c == 1)
            self.union -= int(np.count_nonzero(changed))
            self.inter -= int(np.count_nonzero(changed & t))
        c += sign * mask.astype(np.int16)

    def mask_delta(self, sl, m_old: np.ndarray, m_new: np.ndarray) -> tuple:
        c = self.count[sl]
        t = self.target[sl]
        gained = m_new & ~m_old & (c == 0)
        lost = m_old & ~m_new & (c == 1)
        return (
            int(np.count_nonzero(gained)) - int(np.count_nonzero(lost)),
            int(np.count_nonzero(gained & t)) - int(np.count_nonzero(lost & t)),
        )

    def occupancy(self) -> OccupancyGrid:
        return OccupancyGrid(self.count > 0)


def render_depth(target: OccupancyGrid, size: int = DEPTH_SIZE) -> np.ndarray:
    """Orthographic front view looking down -z.

    Pixel value is ``(k + 1) / R`` for the highest occupied ``z`` index ``k``
    along the ray (nearest surface to a camera at ``z = R``), 0 for background.
    Row 0 is the top of the image (largest ``y``).
    """
    R = target.resolution
    if R > size:
        raise ContractError(f"resolution {R} exceeds depth map size {size}")
    cells = target.cells
    any_hit = cells.any(axis=2)
    # index of the last True along z
    top = R - 1 - np.argmax(cells[:, :, ::-1], axis=2)
    depth_xy = np.where(any_hit, (top + 1) / R, 0.0)
    cols = (np.arange(size) * R) // size
    rows = ((size - 1 - np.arange(size)) * R) // size
    return depth_xy[cols[None, :], rows[:, None]].astype(np.float32)


def loop_corners(loop: EdgeLoop) -> np.ndarray:
    """The four rectangle corners, counter-clockwise seen from +axis."""
    u, w = in_plane_axes(loop.axis)
    u0, w0, u1, w1 = loop.rect()
    out = np.zeros((4, 3))
    for k, (a, b) in enumerate(((u0, w0), (u1, w0), (u1, w1), (u0, w1))):
        out[k, loop.axis] = loop.position
        out[k, u] = a
        out[k, w] = b
    return out


def group_loops(loops: Sequence[EdgeLoop]) -> dict:
    """Loops per owner, each group sorted along its axis. Validates preconditions."""
    groups: dict = {}
    for loop in loops:
        groups.setdefault(loop.owner, []).append(loop)
    for owner, group in groups.items():
        if len(group) < 2:
            raise ContractError(f"owner {owner} has {len(group)} loop(s); at least 2 required")
        if len({l.axis for l in group}) != 1:
            raise ContractError(f"loops of owner {owner} do not share an axis")
        group.sort(key=lambda l: l.position)
    return groups


def loft_mesh(loops: Sequence[EdgeLoop]) -> TriangleMesh:
    groups = group_loops(loops)
    vertices, triangles = [], []
    base = 0
    for owner in sorted(groups):
        group = groups[owner]
        corners = [loop_corners(l) for l in group]
        ring = lambda j, k: base + 4 * j + (k % 4)  # noqa: E731
        for j in range(len(group) - 1):
            for k in range(4):
                triangles.append((ring(j, k), ring(j, k + 1), ring(j + 1, k + 1)))
                triangles.append((ring(j, k), ring(j + 1, k + 1), ring(j + 1, k)))
        last = len(group) - 1
        triangles += [(ring(0, 0), ring(0, 2), ring(0, 1)), (ring(0, 0), ring(0, 3), ring(0, 2))]
        triangles += [(ring(last, 0), ring(last, 1), ring(last, 2)), (ring(last, 0), ring(last, 2), ring(last, 3))]
        vertices.extend(corners)
        base += 4 * len(group)
    if not vertices:
        return TriangleMesh()
    vertices = np.concatenate(vertices)
    tris = np.asarray(triangles, dtype=np.int64)
    v = vertices[tris]
    degenerate = np.all(v[:, 0] == v[:, 1], axis=1) & np.all(v[:, 1] == v[:, 2], axis=1)
    return TriangleMesh(vertices, tris[~degenerate])


def owner_occupancy(group: Sequence[EdgeLoop], resolution: int, slab_lo: int = 0, slab_hi: Optional[int] = None):
    """Solid of one owner's loft over slabs ``[slab_lo, slab_hi)`` along its axis.

    Returns ``(slices, mask)`` where ``mask`` is in xyz order and ``slices``
    locate it inside the full grid.
    """
    R = resolution
    axis = group[0].axis
    u, w = in_plane_axes(axis)
    slab_hi = R if slab_hi is None else slab_hi
    pos = np.array([l.position for l in group], dtype=float)
    rects = np.array([l.rect() for l in group], dtype=float)
    centers = np.arange(slab_lo, slab_hi) + 0.5
    S = len(centers)
    inside = np.zeros(S, bool)
    lo_rect = np.zeros((S, 4))
    if S:
        # consecutive pair bracketing each slab center
        j = np.searchsorted(pos, centers, side="right") - 1
        valid = (j >= 0) & (j < len(pos) - 1)
        jj = np.clip(j, 0, len(pos) - 2)
        p0, p1 = pos[jj], pos[jj + 1]
        valid &= p1 > p0
        t = np.where(valid, (centers - p0) / np.where(p1 > p0, p1 - p0, 1.0), 0.0)
        lo_rect = (1 - t)[:, None] * rects[jj] + t[:, None] * rects[jj + 1]
        inside = valid
    c = np.arange(R) + 0.5
    in_u = (c[None, :] >= lo_rect[:, 0:1]) & (c[None, :] <= lo_rect[:, 2:3])
    in_w = (c[None, :] >= lo_rect[:, 1:2]) & (c[None, :] <= lo_rect[:, 3:4])
    block = inside[:, None, None] & in_u[:, :, None] & in_w[:, None, :]
    # block axes are (axis, u, w); move to xyz
    order = [0, 0, 0]
    order[axis], order[u], order[w] = 0, 1, 2
    mask = np.transpose(block, order)
    sl = [slice(0, R)] * 3
    sl[axis] = slice(slab_lo, slab_hi)
    return tuple(sl), mask


def voxelize_mesh(loops: Sequence[EdgeLoop], resolution: int) -> OccupancyGrid:
    groups = group_loops(loops)
    cells = np.zeros((resolution,) * 3, dtype=bool)
    for group in groups.values():
        sl, mask = owner_occupancy(group, resolution)
        cells[sl] |= mask
    return OccupancyGrid(cells)


def surface_faces(grid: OccupancyGrid) -> np.ndarray:
    """Boundary faces of occupied voxels as rows ``(i, j, k, axis, side)``.

    ``side`` is 0 for the face at the lower coordinate, 1 for the upper one.
    """
    cells = grid.cells
    padded = np.pad(cells, 1)
    out = []
    for axis in range(3):
        for side, shift in ((0, -1), (1, 1)):
            neighbour = np.roll(padded, -shift, axis=axis)[1:-1, 1:-1, 1:-1]
            idx = np.argwhere(cells & ~neighbour)
            if len(idx):
                out.append(np.column_stack([idx, np.full(len(idx), axis), np.full(len(idx), side)]))
    if not out:
        return np.zeros((0, 5), dtype=np.int64)
    return np.concatenate(out)


def sample_surface_points(grid: OccupancyGrid, n: int = 2048, rng=None) -> np.ndarray:
    """Points drawn uniformly over the occupied-voxel boundary (voxel units)."""
    rng = np.random.default_rng(rng)
    faces = surface_faces(grid)
    if len(faces) == 0:
        return np.zeros((0, 3))
    pick = faces[rng.integers(0, len(faces), size=n)]
    pts = pick[:, :3].astype(float) + rng.random((n, 3))
    rows = np.arange(n)
    pts[rows, pick[:, 3]] = pick[rows, pick[:, 3]] + pick[:, 4]
    return pts


def chamfer_distance(a: np.ndarray, b: np.ndarray, resolution: int = 1) -> float:
    """Symmetric mean nearest-neighbour distance, coordinates scaled by ``1/resolution``."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float((d_ab.mean() + d_ba.mean()) / resolution)


def grid_chamfer(a: OccupancyGrid, b: OccupancyGrid, n: int = 2048, seed: int = 0) -> float:
    _check_same_resolution(a, b)
    pa = sample_surface_points(a, n, seed)
    pb = sample_surface_points(b, n, seed + 1)
    return chamfer_distance(pa, pb, a.resolution)
