"""Binary and text file formats: VOXG grids, PFM depth maps, OBJ meshes, traces."""

from __future__ import annotations

import io
import os
import struct
from typing import IO, Iterable, Sequence, Union

import numpy as np

from .geometry import DEPTH_SIZE, ContractError, OccupancyGrid, TriangleMesh

PathOrFile = Union[str, os.PathLike, IO]

VOXG_MAGIC = b"VOXG"
_VOXG_HEADER = struct.Struct("<4sI8s")


class FormatError(ContractError):
    """Malformed or mismatched file content."""


def _open(dest: PathOrFile, mode: str):
    if hasattr(dest, "write") or hasattr(dest, "read"):
        return _NoClose(dest)
    return open(dest, mode)


class _NoClose:
    def __init__(self, f):
        self.f = f

    def __enter__(self):
        return self.f

    def __exit__(self, *exc):
        return False


def voxg_bytes(grid: OccupancyGrid) -> bytes:
    R = grid.resolution
    body = grid.cells.astype(np.uint8).ravel(order="F").tobytes()  # x fastest
    return _VOXG_HEADER.pack(VOXG_MAGIC, R, b"\0" * 8) + body


def write_voxg(grid: OccupancyGrid, dest: PathOrFile) -> None:
    with _open(dest, "wb") as f:
        f.write(voxg_bytes(grid))


def parse_voxg(data: bytes) -> OccupancyGrid:
    if len(data) < _VOXG_HEADER.size:
        raise FormatError("truncated VOXG header")
    magic, R, _ = _VOXG_HEADER.unpack_from(data)
    if magic != VOXG_MAGIC:
        raise FormatError(f"bad VOXG magic {magic!r}")
    if R < 1:
        raise FormatError("VOXG resolution must be positive")
    body = np.frombuffer(data, dtype=np.uint8, offset=_VOXG_HEADER.size)
    if body.size != R ** 3:
        raise FormatError(f"VOXG body has {body.size} bytes, expected {R ** 3}")
    if body.max(initial=0) > 1:
        raise FormatError("VOXG cells must be 0 or 1")
    return OccupancyGrid(body.reshape((R, R, R), order="F").astype(bool))


def read_voxg(src: PathOrFile) -> OccupancyGrid:
    with _open(src, "rb") as f:
        return parse_voxg(f.read())


def write_pfm(depth: np.ndarray, dest: PathOrFile) -> None:
    """Grayscale little-endian PFM; rows are stored bottom-to-top."""
    depth = np.asarray(depth, dtype="<f4")
    if depth.shape != (DEPTH_SIZE, DEPTH_SIZE):
        raise ContractError(f"depth map must be {DEPTH_SIZE}x{DEPTH_SIZE}, got {depth.shape}")
    h, w = depth.shape
    with _open(dest, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(depth[::-1]).tobytes())


def read_pfm(src: PathOrFile) -> np.ndarray:
    with _open(src, "rb") as f:
        data = f.read()
    stream = io.BytesIO(data)
    kind = stream.readline().strip()
    if kind != b"Pf":
        raise FormatError(f"unsupported PFM kind {kind!r}")
    try:
        w, h = (int(t) for t in stream.readline().split())
        scale = float(stream.readline())
    except ValueError:
        raise FormatError("malformed PFM header") from None
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(stream.read(), dtype=dtype)
    if values.size != w * h:
        raise FormatError("truncated PFM body")
    return values.reshape(h, w)[::-1].astype(np.float32)


OBJ_HEADER = "# primmesh OBJ\n"


def obj_text(mesh: TriangleMesh) -> str:
    lines = [OBJ_HEADER]
    lines += [f"v {x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {i + 1} {j + 1} {k + 1}\n" for i, j, k in mesh.triangles.tolist()]
    return "".join(lines)


def export_obj(mesh: TriangleMesh, dest: PathOrFile) -> bytes:
    data = obj_text(mesh).encode("ascii")
    with _open(dest, "wb") as f:
        f.write(data)
    return data


def parse_obj(text: Union[str, bytes]) -> TriangleMesh:
    if isinstance(text, bytes):
        text = text.decode("ascii")
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


class TraceWriter:
    """Tab-separated episode trace, one record per step after a header line."""

    def __init__(self, dest: PathOrFile, columns: Sequence[str]):
        self.columns = list(columns)
        self._owns = not hasattr(dest, "write")
        self.f = open(dest, "w") if self._owns else dest
        self.f.write("\t".join(self.columns) + "\n")

    def write(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError("trace record width does not match header")
        self.f.write("\t".join(_fmt(v) for v in values) + "\n")

    def close(self) -> None:
        if self._owns:
            self.f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


PRIM_TRACE_COLUMNS = ("step", "action", "reward", "I1", "I2", "N")
MESH_TRACE_COLUMNS = ("step", "action", "reward", "IoU")


def read_trace(src: PathOrFile) -> list:
    with _open(src, "r") as f:
        lines = f.read().splitlines()
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        vals = line.split("\t")
        rows.append({k: (int(v) if k in ("step", "action", "N") else float(v)) for k, v in zip(header, vals)})
    return rows


def write_trace(dest: PathOrFile, columns: Sequence[str], records: Iterable[Sequence]) -> None:
    with TraceWriter(dest, columns) as w:
        for rec in records:
            w.write(*rec)
