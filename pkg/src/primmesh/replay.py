"""Experience records, ring replay buffers and the demonstration archive format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, List, Optional, Sequence

import numpy as np

from .geometry import ContractError
from .io import FormatError, PathOrFile, _open
from .spaces import Observation


@dataclass(frozen=True)
class Experience:
    observation: Observation
    action: int
    reward: float
    next_observation: Observation
    done: bool
    is_demo: bool = False


class ReplayBuffer:
    """Fixed-capacity ring; once full, each push overwrites the oldest record."""

    def __init__(self, capacity: int, name: str = ""):
        if capacity < 1:
            raise ContractError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.name = name
        self._data: list = []
        self._head = 0  # index of the oldest record once full
        self.pushes = 0

    def __len__(self) -> int:
        return len(self._data)

    def __getitem__(self, i: int) -> Experience:
        return self._data[i]

    def push(self, e: Experience) -> None:
        self.pushes += 1
        if len(self._data) < self.capacity:
            self._data.append(e)
        else:
            self._data[self._head] = e
            self._head = (self._head + 1) % self.capacity

    def extend(self, records: Iterable[Experience]) -> None:
        for e in records:
            self.push(e)

    def empty(self) -> None:
        self._data = []
        self._head = 0

    def contents(self) -> List[Experience]:
        """Records from oldest to newest."""
        return self._data[self._head:] + self._data[:self._head]

    def sample(self, n: int, rng: np.random.Generator) -> List[Experience]:
        if not self._data:
            raise ContractError(f"cannot sample from empty buffer {self.name!r}")
        return [self._data[i] for i in rng.integers(0, len(self._data), size=n)]


def sample_equal(a: ReplayBuffer, b: ReplayBuffer, batch: int, rng: np.random.Generator) -> List[Experience]:
    """Half the batch from each buffer, uniformly with replacement, then shuffled."""
    if len(a) == 0 or len(b) == 0:
        raise ContractError("equal-mix sampling needs two non-empty buffers")
    half = -(-batch // 2)
    out = a.sample(half, rng) + b.sample(half, rng)
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# -- archive -----------------------------------------------------------------
#
# header   : b"PMXP", u16 version, u32 n_refs, u32 n_records
# reference: u32 ndim, ndim * u32 dims, float32 payload
# record   : u32 ref_id, u32 action, f64 reward, u8 done, u8 is_demo,
#            observation, next observation
# obs      : u32 n_params, float32 params, u32 step, u32 n_steps
# all integers and floats little-endian.

ARCHIVE_MAGIC = b"PMXP"
ARCHIVE_VERSION = 1
_HEAD = struct.Struct("<4sHII")
_REC = struct.Struct("<IIdBB")
_U32 = struct.Struct("<I")


def _write_obs(f: BinaryIO, obs: Observation) -> None:
    params = np.asarray(obs.params, "<f4")
    f.write(_U32.pack(params.size))
    f.write(params.tobytes())
    f.write(struct.pack("<II", obs.step, obs.n_steps))


def write_archive(records: Sequence[Experience], dest: PathOrFile) -> None:
    refs: dict = {}
    for e in records:
        for o in (e.observation, e.next_observation):
            refs.setdefault(id(o.reference), o.reference)
    ref_ids = {k: i for i, k in enumerate(refs)}
    with _open(dest, "wb") as f:
        f.write(_HEAD.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, len(refs), len(records)))
        for ref in refs.values():
            arr = np.asarray(ref, "<f4")
            f.write(_U32.pack(arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        for e in records:
            if id(e.observation.reference) != id(e.next_observation.reference):
                raise ContractError("observation and next observation must share a reference")
            f.write(_REC.pack(ref_ids[id(e.observation.reference)], int(e.action), float(e.reward),
                              int(e.done), int(e.is_demo)))
            _write_obs(f, e.observation)
            _write_obs(f, e.next_observation)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.data):
            raise FormatError("truncated archive")
        out = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return out

    def floats(self, n: int) -> np.ndarray:
        end = self.pos + 4 * n
        if end > len(self.data):
            raise FormatError("truncated archive")
        out = np.frombuffer(self.data, "<f4", count=n, offset=self.pos).astype(np.float32)
        self.pos = end
        return out


def read_archive(src: PathOrFile) -> List[Experience]:
    with _open(src, "rb") as f:
        r = _Reader(f.read())
    magic, version, n_refs, n_records = r.take("<4sHII")
    if magic != ARCHIVE_MAGIC:
        raise FormatError(f"bad archive magic {magic!r}")
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}")
    refs = []
    for _ in range(n_refs):
        (ndim,) = r.take("<I")
        shape = r.take(f"<{ndim}I")
        refs.append(r.floats(int(np.prod(shape))).reshape(shape))

    def obs(ref):
        (n,) = r.take("<I")
        params = r.floats(n)
        step, n_steps = r.take("<II")
        return Observation(ref, params, step, n_steps)

    out = []
    for _ in range(n_records):
        ref_id, action, reward, done, is_demo = r.take("<IIdBB")
        if ref_id >= len(refs):
            raise FormatError("record references an unknown raster")
        ref = refs[ref_id]
        o = obs(ref)
        o2 = obs(ref)
        out.append(Experience(o, action, reward, o2, bool(done), bool(is_demo)))
    return out
