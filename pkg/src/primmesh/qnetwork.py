"""Three-stream Q-network, double-DQN losses and masked epsilon-greedy selection."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geometry import ContractError
from .io import FormatError, PathOrFile, _open
from .replay import Experience
from .spaces import Observation, slot_mask

GAMMA = 0.9
MARGIN = 0.8
LAMBDA = 1.0
EPSILON = 0.02
TARGET_SYNC = 4000
LEARNING_RATE = 8e-5
BATCH_SIZE = 64


@dataclass
class NetConfig:
    n_params: int
    n_steps: int
    n_slots: int
    per_slot: int
    in_channels: int = 1
    conv_channels: Tuple[int, ...] = (16, 32, 64)
    conv_kernels: Tuple[int, ...] = (5, 3, 3)
    conv_stride: int = 2
    pool: int = 4
    param_hidden: Tuple[int, ...] = (256, 128)
    step_hidden: int = 128
    head_hidden: Tuple[int, ...] = (512, 256)

    @property
    def n_actions(self) -> int:
        return self.n_slots * self.per_slot

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for k in ("conv_channels", "conv_kernels", "param_hidden", "head_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class QFunction(nn.Module):
    """Reference raster, primitive/loop parameters and step one-hot in; one value per action out."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        layers, c_in = [], config.in_channels
        for c_out, k in zip(config.conv_channels, config.conv_kernels):
            layers += [nn.Conv2d(c_in, c_out, k, config.conv_stride, k // 2), nn.ReLU()]
            c_in = c_out
        layers += [nn.AdaptiveAvgPool2d(config.pool), nn.Flatten()]
        self.reference_stream = nn.Sequential(*layers)
        ref_dim = c_in * config.pool ** 2

        layers, d = [], config.n_params
        for h in config.param_hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        self.param_stream = nn.Sequential(*layers)
        self.step_stream = nn.Sequential(nn.Linear(config.n_steps, config.step_hidden), nn.ReLU())

        layers, d = [], ref_dim + d + config.step_hidden
        for h in config.head_hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, config.n_actions))
        self.head = nn.Sequential(*layers)

    @property
    def final_layer(self) -> nn.Linear:
        return self.head[-1]

    def encode_reference(self, refs: torch.Tensor) -> torch.Tensor:
        if refs.dim() == 3:
            refs = refs.unsqueeze(1)
        return self.reference_stream(refs)

    def forward(self, refs: torch.Tensor, params: torch.Tensor, steps: torch.Tensor,
                ref_index: Optional[torch.Tensor] = None, ref_features: Optional[torch.Tensor] = None):
        """``refs`` may hold only the distinct rasters, gathered through ``ref_index``."""
        feats = self.encode_reference(refs) if ref_features is None else ref_features
        if ref_index is not None:
            feats = feats[ref_index]
        one_hot = F.one_hot(steps.clamp(max=self.config.n_steps - 1), self.config.n_steps).to(params.dtype)
        one_hot = one_hot * (steps < self.config.n_steps).unsqueeze(1).to(params.dtype)
        z = torch.cat([feats, self.param_stream(params), self.step_stream(one_hot)], dim=1)
        return self.head(z)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


@dataclass
class Batch:
    refs: torch.Tensor
    ref_index: torch.Tensor
    params: torch.Tensor
    steps: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    next_params: torch.Tensor
    next_steps: torch.Tensor
    dones: torch.Tensor
    is_demo: torch.Tensor
    masks: torch.Tensor
    next_masks: torch.Tensor

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, keep: torch.Tensor) -> "Batch":
        fields = {k: v for k, v in self.__dict__.items() if k != "refs"}
        out = {k: v[keep] for k, v in fields.items()}
        return Batch(refs=self.refs, **out)


def make_batch(records: Sequence[Experience], config: NetConfig, dtype=torch.float32) -> Batch:
    if not records:
        raise ContractError("empty batch")
    uniq: Dict[int, int] = {}
    rasters = []
    index = []
    for e in records:
        key = id(e.observation.reference)
        if key not in uniq:
            uniq[key] = len(rasters)
            rasters.append(np.asarray(e.observation.reference, np.float32))
        index.append(uniq[key])
    steps = np.array([e.observation.step for e in records])
    next_steps = np.array([e.next_observation.step for e in records])
    n_slots, per_slot = config.n_slots, config.per_slot
    return Batch(
        refs=torch.as_tensor(np.stack(rasters), dtype=dtype),
        ref_index=torch.as_tensor(index),
        params=torch.as_tensor(np.stack([e.observation.params for e in records]), dtype=dtype),
        steps=torch.as_tensor(steps),
        actions=torch.as_tensor([int(e.action) for e in records]),
        rewards=torch.as_tensor([float(e.reward) for e in records], dtype=dtype),
        next_params=torch.as_tensor(np.stack([e.next_observation.params for e in records]), dtype=dtype),
        next_steps=torch.as_tensor(next_steps),
        dones=torch.as_tensor([bool(e.done) for e in records]),
        is_demo=torch.as_tensor([bool(e.is_demo) for e in records]),
        masks=torch.as_tensor(np.stack([slot_mask(s, n_slots, per_slot) for s in steps])),
        next_masks=torch.as_tensor(np.stack([slot_mask(s, n_slots, per_slot) for s in next_steps])),
    )


class DDQNPair:
    """Current network ``theta`` and target network ``theta'``."""

    def __init__(self, config: NetConfig, seed: Optional[int] = None, dtype=torch.float32):
        if seed is not None:
            torch.manual_seed(seed)
        self.config = config
        self.current = QFunction(config).to(dtype)
        self.target = QFunction(config).to(dtype)
        self.sync_target()
        self.target.requires_grad_(False)

    def sync_target(self) -> None:
        self.target.load_state_dict(self.current.state_dict())


def _batch_q(net: QFunction, batch: Batch, next_state: bool = False, features=None) -> torch.Tensor:
    params = batch.next_params if next_state else batch.params
    steps = batch.next_steps if next_state else batch.steps
    return net(batch.refs, params, steps, batch.ref_index, ref_features=features)


def _masked(q: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return q.masked_fill(~mask, float("-inf"))


def _td_terms(pair: DDQNPair, batch: Batch, q: torch.Tensor, gamma: float, features=None) -> torch.Tensor:
    q_taken = q.gather(1, batch.actions.unsqueeze(1)).squeeze(1)
    with torch.no_grad():
        q_next = _batch_q(pair.current, batch, next_state=True, features=features)
        a_max = _masked(q_next, batch.next_masks).argmax(dim=1)
        q_eval = _batch_q(pair.target, batch, next_state=True).gather(1, a_max.unsqueeze(1)).squeeze(1)
        y = batch.rewards + gamma * (~batch.dones).to(q.dtype) * q_eval
    return (y - q_taken) ** 2


def _margin_terms(q: torch.Tensor, batch: Batch, margin: float) -> torch.Tensor:
    l = torch.full_like(q, margin)
    l.scatter_(1, batch.actions.unsqueeze(1), 0.0)
    best = _masked(q + l, batch.masks).max(dim=1).values
    return best - q.gather(1, batch.actions.unsqueeze(1)).squeeze(1)


def td_loss(pair: DDQNPair, batch: Batch, gamma: float = GAMMA) -> torch.Tensor:
    """Double-DQN TD error, averaged over the batch; terminal transitions do not bootstrap."""
    q = _batch_q(pair.current, batch)
    return _td_terms(pair, batch, q, gamma).mean()


def margin_loss(net: QFunction, batch: Batch, margin: float = MARGIN) -> torch.Tensor:
    if not bool(batch.is_demo.all()):
        raise ContractError("margin loss is defined on demonstration records only")
    return _margin_terms(_batch_q(net, batch), batch, margin).mean()


def combined_loss(pair: DDQNPair, batch: Batch, lam: float = LAMBDA, gamma: float = GAMMA,
                  margin: float = MARGIN) -> torch.Tensor:
    """TD loss plus ``lam`` times the margin loss over the batch's demo records."""
    feats = pair.current.encode_reference(batch.refs)
    q = pair.current(batch.refs, batch.params, batch.steps, batch.ref_index, ref_features=feats)
    loss = _td_terms(pair, batch, q, gamma, features=feats.detach()).mean()
    demo = batch.is_demo
    if lam and bool(demo.any()):
        loss = loss + lam * _margin_terms(q[demo], batch.subset(demo), margin).mean()
    return loss


def supervised_loss(net: QFunction, batch: Batch, margin: float = MARGIN) -> torch.Tensor:
    """Margin loss alone, over whatever demo records the batch holds."""
    demo = batch.is_demo
    if not bool(demo.any()):
        return torch.zeros((), dtype=net.dtype)
    return margin_loss(net, batch.subset(demo), margin)


def observation_tensors(obs: Observation, dtype=torch.float32):
    ref = torch.as_tensor(np.asarray(obs.reference, np.float32), dtype=dtype).unsqueeze(0)
    params = torch.as_tensor(np.asarray(obs.params), dtype=dtype).unsqueeze(0)
    steps = torch.as_tensor([obs.step])
    return ref, params, steps


@torch.no_grad()
def q_values(net: QFunction, obs: Observation, ref_features: Optional[torch.Tensor] = None) -> np.ndarray:
    if obs.params.size != net.config.n_params:
        raise ContractError(f"observation has {obs.params.size} parameters, network expects {net.config.n_params}")
    ref, params, steps = observation_tensors(obs, net.dtype)
    return net(ref, params, steps, ref_features=ref_features).squeeze(0).cpu().numpy()


def greedy(values: np.ndarray, mask: np.ndarray) -> int:
    return int(np.argmax(np.where(mask, values, -np.inf)))


def select_action(net: QFunction, obs: Observation, mask: np.ndarray, epsilon: float = EPSILON,
                  rng: Optional[np.random.Generator] = None, ref_features=None) -> int:
    """Masked epsilon-greedy; ties in the greedy branch go to the lowest index."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ContractError("no legal action")
    rng = rng if rng is not None else np.random.default_rng()
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(mask)))
    return greedy(q_values(net, obs, ref_features), mask)


class ReferenceCache:
    """Reference-stream features per raster, valid until the network changes."""

    def __init__(self, net: QFunction):
        self.net = net
        self._cache: dict = {}

    def clear(self) -> None:
        self._cache.clear()

    @torch.no_grad()
    def __call__(self, reference: np.ndarray) -> torch.Tensor:
        key = id(reference)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not reference:
            ref = torch.as_tensor(np.asarray(reference, np.float32), dtype=self.net.dtype).unsqueeze(0)
            hit = (reference, self.net.encode_reference(ref))
            self._cache[key] = hit
        return hit[1]


# -- checkpoints ---------------------------------------------------------------
#
# b"QNET", u32 version, u32 n_meta, n_meta bytes of UTF-8 JSON (NetConfig),
# u32 n_arrays, then per array: u16 name length, name (UTF-8), u8 ndim,
# ndim * u32 dims, little-endian float32 payload.

CHECKPOINT_MAGIC = b"QNET"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: QFunction, dest: PathOrFile, extra: Optional[dict] = None) -> None:
    meta = {"config": asdict(net.config), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    state = net.state_dict()
    with _open(dest, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(src: PathOrFile) -> Tuple[QFunction, dict]:
    with _open(src, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a Q-network checkpoint")
    version, n_meta = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + n_meta].decode("utf-8"))
    pos += n_meta
    (n_arrays,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(n_arrays):
        (n_name,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n_name].decode("utf-8")
        pos += n_name
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape))
        state[name] = torch.from_numpy(np.frombuffer(data, "<f4", count, pos).reshape(shape).copy())
        pos += 4 * count
    net = QFunction(NetConfig.from_dict(meta["config"]))
    net.load_state_dict(state)
    return net, meta.get("extra", {})
