"""Synthetic box-assembly shapes, dataset directories and external-grid ingest."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .geometry import ContractError, Cuboid, OccupancyGrid, render_depth, voxelize_cuboids
from .io import FormatError, read_pfm, read_voxg, write_pfm, write_voxg

CATEGORIES = ("boxy-tables", "boxy-planes", "boxy-cars")
MANIFEST = "manifest.json"


@dataclass
class Shape:
    name: str
    category: str
    target: OccupancyGrid
    reference: np.ndarray

    @classmethod
    def from_grid(cls, target: OccupancyGrid, name: str = "shape", category: str = "external") -> "Shape":
        return cls(name, category, target, render_depth(target))


def _span(rng, lo, hi, length):
    """Integer interval of ``length`` placed at a random offset inside [lo, hi)."""
    length = int(min(length, hi - lo))
    start = int(rng.integers(lo, hi - length + 1))
    return start, start + length


def _centered(R, length):
    length = int(min(length, R))
    start = (R - length) // 2
    return start, start + length


def _table(rng, R):
    s = R / 32
    (x0, x1), (z0, z1) = _centered(R, rng.integers(18, 27) * s), _centered(R, rng.integers(14, 23) * s)
    top_t = max(2, int(rng.integers(2, 4) * s))
    y1 = int(rng.integers(22, 28) * s)
    boxes = [(x0, y1 - top_t, z0, x1, y1, z1)]
    leg = max(2, int(rng.integers(3, 5) * s))
    corners = [(x0, z0), (x1 - leg, z1 - leg), (x1 - leg, z0), (x0, z1 - leg)]
    for cx, cz in corners[: int(rng.integers(1, 5))]:
        boxes.append((cx, int(2 * s), cz, cx + leg, y1 - top_t, cz + leg))
    return boxes


def _plane(rng, R):
    s = R / 32
    fw = max(3, int(rng.integers(4, 7) * s))
    (fx0, fx1), (fz0, fz1) = _centered(R, fw), _centered(R, rng.integers(22, 29) * s)
    fy0 = int(R / 2 - fw / 2)
    boxes = [(fx0, fy0, fz0, fx1, fy0 + fw, fz1)]
    (wx0, wx1) = _centered(R, rng.integers(20, 29) * s)
    wz0, wz1 = _span(rng, fz0 + 2, fz1 - 8, max(4, int(rng.integers(5, 8) * s)))
    wt = max(2, int(rng.integers(2, 4) * s))
    boxes.append((wx0, fy0 + 1, wz0, wx1, fy0 + 1 + wt, wz1))
    extra = int(rng.integers(0, 3))
    if extra >= 1:
        tx0, tx1 = _centered(R, rng.integers(9, 14) * s)
        boxes.append((tx0, fy0 + 1, fz0, tx1, fy0 + 1 + wt, fz0 + max(3, int(3 * s))))
    if extra >= 2:
        boxes.append((fx0 + fw // 2 - 1, fy0 + fw, fz0, fx0 + fw // 2 + 1, fy0 + fw + int(5 * s), fz0 + int(4 * s)))
    return boxes


def _car(rng, R):
    s = R / 32
    (x0, x1), (z0, z1) = _centered(R, rng.integers(12, 19) * s), _centered(R, rng.integers(24, 29) * s)
    y0 = int(rng.integers(5, 8) * s)
    y1 = y0 + int(rng.integers(6, 10) * s)
    boxes = [(x0, y0, z0, x1, y1, z1)]
    cz0, cz1 = _span(rng, z0 + 2, z1 - 2, int(rng.integers(10, 16) * s))
    boxes.append((x0 + 1, y1, cz0, x1 - 1, y1 + int(rng.integers(4, 7) * s), cz1))
    wheel = max(3, int(4 * s))
    for zc in (z0 + int(3 * s), z1 - int(3 * s) - wheel)[: int(rng.integers(0, 3))]:
        boxes.append((x0 - 1 if x0 > 0 else x0, max(0, y0 - wheel + 1), zc, min(R, x1 + 1), y0 + 1, zc + wheel))
    return boxes


_MAKERS = {"boxy-tables": _table, "boxy-planes": _plane, "boxy-cars": _car}


def synthetic_shape(category: str, rng, resolution: int = 32) -> OccupancyGrid:
    if category not in _MAKERS:
        raise ContractError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    boxes = _MAKERS[category](rng, resolution)
    cuboids = []
    for b in boxes:
        b = [int(np.clip(c, 0, resolution)) for c in b]
        if all(b[d] < b[d + 3] for d in range(3)):
            cuboids.append(Cuboid(tuple(b[:3]), tuple(b[3:])))
    return voxelize_cuboids(cuboids, resolution)


def synthetic_shapes(count: int, categories: Sequence[str] = CATEGORIES, seed: int = 0,
                     resolution: int = 32) -> List[Shape]:
    if count < 1:
        raise ContractError("count must be at least 1")
    categories = [categories] if isinstance(categories, str) else list(categories)
    seeds = np.random.SeedSequence(seed).spawn(count)
    shapes = []
    for i in range(count):
        cat = categories[i % len(categories)]
        grid = synthetic_shape(cat, np.random.default_rng(seeds[i]), resolution)
        shapes.append(Shape(f"{cat}_{i:04d}", cat, grid, render_depth(grid)))
    return shapes


def write_dataset(shapes: Sequence[Shape], dest) -> Path:
    dest = Path(dest)
    (dest / "shapes").mkdir(parents=True, exist_ok=True)
    entries = []
    for shape in shapes:
        write_voxg(shape.target, dest / "shapes" / f"{shape.name}.voxg")
        write_pfm(shape.reference, dest / "shapes" / f"{shape.name}.pfm")
        entries.append({
            "id": shape.name,
            "category": shape.category,
            "grid": f"shapes/{shape.name}.voxg",
            "depth": f"shapes/{shape.name}.pfm",
            "occupied": shape.target.count(),
        })
    resolution = shapes[0].target.resolution if shapes else 0
    manifest = {"resolution": resolution, "shapes": entries}
    (dest / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return dest


def generate_synthetic_dataset(count: int, dest, categories: Sequence[str] = CATEGORIES, seed: int = 0,
                               resolution: int = 32) -> Path:
    return write_dataset(synthetic_shapes(count, categories, seed, resolution), dest)


def load_dataset(path) -> List[Shape]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    shapes = []
    for e in manifest["shapes"]:
        grid = read_voxg(path / e["grid"])
        shapes.append(Shape(e["id"], e["category"], grid, read_pfm(path / e["depth"])))
    return shapes


class IngestError(ContractError):
    def __init__(self, report: dict):
        self.report = report
        lines = "; ".join(f"{k}: {v}" for k, v in sorted(report.items()))
        super().__init__(f"ingest rejected {len(report)} file(s): {lines}")


def category_from_name(stem: str) -> str:
    head, sep, tail = stem.rpartition("_")
    return head if sep and tail.isdigit() and head else "external"


def ingest_external(files: Sequence, dest, resolution: Optional[int] = None) -> Path:
    """Validate VOXG files, render their references and write a dataset directory.

    Every file is checked before anything is written; failures are reported
    per file.
    """
    shapes, report = [], {}
    for f in sorted(Path(p) for p in files):
        try:
            grid = read_voxg(f)
        except (FormatError, OSError) as exc:
            report[str(f)] = str(exc)
            continue
        shapes.append((f, grid))
    if shapes:
        expected = resolution or shapes[0][1].resolution
        for f, grid in shapes:
            if grid.resolution != expected:
                report[str(f)] = f"resolution {grid.resolution} != {expected}"
    if not shapes and not report:
        raise ContractError("no input files")
    if report:
        raise IngestError(report)
    out = [Shape(f.stem, category_from_name(f.stem), g, render_depth(g)) for f, g in shapes]
    return write_dataset(out, dest)
