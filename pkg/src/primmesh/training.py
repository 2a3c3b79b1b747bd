"""Imitation (DAgger with a virtual expert and two demo buffers) and self-exploration phases."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import qnetwork as qn
from .env_mesh import MeshEnv
from .env_prim import PrimEnv
from .expert import expert_action, rollout_expert
from .geometry import ContractError, grid_chamfer
from .qnetwork import DDQNPair, NetConfig, ReferenceCache, make_batch, select_action
from .replay import Experience, ReplayBuffer, sample_equal

log = logging.getLogger(__name__)

SCHEMES = ("ddqn_only", "dagger_only", "dqfd_style", "dagger_star", "full")


@dataclass
class TrainConfig:
    """Every training hyperparameter; defaults are the full-scale values."""

    resolution: int = 64
    batch_size: int = qn.BATCH_SIZE
    learning_rate: float = qn.LEARNING_RATE
    gamma: float = qn.GAMMA
    margin: float = qn.MARGIN
    lam: float = qn.LAMBDA
    epsilon: float = qn.EPSILON
    target_sync: int = qn.TARGET_SYNC
    dagger_iterations: int = 4
    updates_per_iteration: int = 4000
    demo_capacity: int = 200_000
    self_capacity: int = 100_000
    rl_episodes: int = 100
    rl_update_every: int = 4
    rl_warmup: int = 64
    finetune_learning_rate: Optional[float] = None  # RL after IL; None keeps learning_rate
    finetune_target_sync: Optional[int] = None  # RL after IL; None keeps target_sync
    shape_loop: str = "outer"  # "outer": per-shape DAgger; "joint": DAgger over all shapes at once
    seed: int = 0
    conv_channels: tuple = (16, 32, 64)
    conv_kernels: tuple = (5, 3, 3)
    pool: int = 4
    param_hidden: tuple = (256, 128)
    step_hidden: int = 128
    head_hidden: tuple = (512, 256)

    def net_config(self, n_params: int, n_steps: int, n_slots: int, per_slot: int, in_channels: int = 1) -> NetConfig:
        return NetConfig(n_params, n_steps, n_slots, per_slot, in_channels,
                         tuple(self.conv_channels), tuple(self.conv_kernels), 2, self.pool,
                         tuple(self.param_hidden), self.step_hidden, tuple(self.head_hidden))

    def updated(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


SHAPE_LOOPS = ("outer", "joint")

DESK = TrainConfig(
    resolution=32,
    learning_rate=1e-3,
    target_sync=200,
    updates_per_iteration=400,
    demo_capacity=20_000,
    self_capacity=10_000,
    rl_episodes=15,
    finetune_learning_rate=8e-5,
    finetune_target_sync=1000,
)


class Learner:
    """Owns the network pair and optimizer; counts updates and syncs the target every ``target_sync``."""

    def __init__(self, pair: DDQNPair, config: TrainConfig):
        self.pair = pair
        self.config = config
        self.optimizer = torch.optim.Adam(pair.current.parameters(), lr=config.learning_rate, foreach=True)
        self.updates = 0
        self.syncs = 0
        self.losses: List[float] = []

    def update(self, records: Sequence[Experience], loss: str = "combined") -> float:
        c = self.config
        batch = make_batch(records, self.pair.config, self.pair.current.dtype)
        if loss == "combined":
            value = qn.combined_loss(self.pair, batch, c.lam, c.gamma, c.margin)
        elif loss == "td":
            value = qn.td_loss(self.pair, batch, c.gamma)
        elif loss == "supervised":
            value = qn.supervised_loss(self.pair.current, batch, c.margin)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        self.optimizer.zero_grad()
        value.backward()
        self.optimizer.step()
        self.updates += 1
        if self.updates % c.target_sync == 0:
            self.pair.sync_target()
            self.syncs += 1
        self.losses.append(float(value.detach()))
        return self.losses[-1]


# -- environment plumbing -------------------------------------------------------

EnvFactory = Callable[[object], object]


def prim_env_factory(resolution: int, n_steps: Optional[int] = None) -> EnvFactory:
    """Shapes are anything with ``target`` and ``reference`` attributes."""

    def make(shape):
        env = PrimEnv(resolution, **({"n_steps": n_steps} if n_steps else {}))
        env.reset(shape.target, shape.reference)
        return env

    return make


def mesh_env_factory(resolution: int, start_cuboids: Callable, n_steps: Optional[int] = None) -> EnvFactory:
    """``start_cuboids(shape)`` supplies the (merged) primitives each episode starts from."""

    def make(shape):
        env = MeshEnv(resolution, **({"n_steps": n_steps} if n_steps else {}))
        env.reset(start_cuboids(shape), shape.target, shape.reference)
        return env

    return make


def new_pair(env, config: TrainConfig, dtype=torch.float32) -> DDQNPair:
    obs = env.observe()
    ref = np.asarray(obs.reference)
    channels = 1 if ref.ndim == 2 else ref.shape[0]
    net_cfg = config.net_config(obs.params.size, obs.n_steps, env.n_slots, env.per_slot, channels)
    return DDQNPair(net_cfg, seed=config.seed, dtype=dtype)


def policy_rollout(pair: DDQNPair, env, epsilon: float = 0.0, rng=None, relabel: bool = False,
                   cache: Optional[ReferenceCache] = None) -> tuple:
    """Greedy (or epsilon-greedy) episode under the step mask.

    With ``relabel`` every visited state is also labelled with the expert's
    action; the labelled transition's reward and successor come from applying
    the expert action to a copy of the environment.
    Returns ``(labelled, total_reward)``.
    """
    cache = cache or ReferenceCache(pair.current)
    labelled, total = [], 0.0
    obs = env.observe()
    while not env.done:
        if relabel:
            a_e = expert_action(env)
            trial = env.clone()
            _, r_e, d_e = trial.step(a_e)
            labelled.append(Experience(obs, a_e, r_e, trial.observe(), d_e, True))
        a = select_action(pair.current, obs, env.legal_mask(), epsilon, rng, cache(obs.reference))
        _, r, _ = env.step(a)
        total += r
        obs = env.observe()
    return labelled, total


# -- imitation phase -------------------------------------------------------------

@dataclass
class ILResult:
    pair: DDQNPair
    learner: Learner
    demo_long: ReplayBuffer
    demo_short: Optional[ReplayBuffer]
    short_audit: List[List[Experience]] = field(default_factory=list)


def run_il(env_factory: EnvFactory, shapes: Sequence, config: TrainConfig, pair: Optional[DDQNPair] = None,
           relabel: bool = True, double_buffer: bool = True, loss: str = "combined",
           rollout: bool = True, learner: Optional[Learner] = None) -> ILResult:
    """DAgger with the virtual expert.

    ``relabel=False`` trains on the initial demonstrations only (fixed-demo
    pretraining); ``double_buffer=False`` samples from the long-term buffer
    alone.
    """
    if not shapes:
        raise ContractError("imitation needs at least one shape")
    rng = np.random.default_rng(config.seed)
    if pair is None:
        pair = new_pair(env_factory(shapes[0]), config)
    learner = learner or Learner(pair, config)
    demo_long = ReplayBuffer(config.demo_capacity, "demo_long")
    demo_short = ReplayBuffer(config.demo_capacity, "demo_short") if double_buffer else None
    audit: List[List[Experience]] = []

    groups = [[s] for s in shapes] if config.shape_loop == "outer" else [list(shapes)]
    for group in groups:
        d0 = []
        for shape in group:
            d0.extend(rollout_expert(env_factory(shape)))
        demo_long.extend(d0)
        if demo_short is not None:
            demo_short.empty()
            demo_short.extend(d0)
        for k in range(config.dagger_iterations):
            for _ in range(config.updates_per_iteration):
                if demo_short is not None:
                    records = sample_equal(demo_short, demo_long, config.batch_size, rng)
                else:
                    records = demo_long.sample(config.batch_size, rng)
                learner.update(records, loss)
            if not (relabel and rollout):
                continue
            d_k = []
            for shape in group:
                labelled, _ = policy_rollout(pair, env_factory(shape), relabel=True)
                d_k.extend(labelled)
            demo_long.extend(d_k)
            if demo_short is not None:
                demo_short.empty()
                demo_short.extend(d_k)
                audit.append(list(demo_short.contents()))
            log.info("dagger iteration %d: %d new labelled states, %d updates", k + 1, len(d_k), learner.updates)
    return ILResult(pair, learner, demo_long, demo_short, audit)


# -- self-exploration phase ------------------------------------------------------

@dataclass
class RLResult:
    pair: DDQNPair
    learner: Learner
    demo_long: Optional[ReplayBuffer]
    demo_self: ReplayBuffer
    episode_rewards: List[float]
    demo_long_pushes: int


def run_rl(pair: Optional[DDQNPair], env_factory: EnvFactory, shapes: Sequence, config: TrainConfig,
           demo_long: Optional[ReplayBuffer] = None, learner: Optional[Learner] = None) -> RLResult:
    """Epsilon-greedy exploration; TD-only updates on equal D_self / D_demo_long mixes."""
    if not shapes:
        raise ContractError("self-exploration needs at least one shape")
    rng = np.random.default_rng(config.seed + 1)
    if pair is None:
        pair = new_pair(env_factory(shapes[0]), config)
    learner = learner or Learner(pair, config)
    if demo_long is not None and config.finetune_learning_rate is not None:
        for group in learner.optimizer.param_groups:
            group["lr"] = config.finetune_learning_rate
    if demo_long is not None and config.finetune_target_sync is not None:
        learner.config = learner.config.updated(target_sync=config.finetune_target_sync)
    demo_self = ReplayBuffer(config.self_capacity, "self")
    long_pushes = demo_long.pushes if demo_long is not None else 0
    cache = ReferenceCache(pair.current)
    rewards = []
    steps = 0
    for episode in range(config.rl_episodes):
        env = env_factory(shapes[episode % len(shapes)])
        obs = env.observe()
        total = 0.0
        while not env.done:
            a = select_action(pair.current, obs, env.legal_mask(), config.epsilon, rng, cache(obs.reference))
            _, r, done = env.step(a)
            nxt = env.observe()
            demo_self.push(Experience(obs, a, r, nxt, done, False))
            obs = nxt
            total += r
            steps += 1
            if len(demo_self) >= config.rl_warmup and steps % config.rl_update_every == 0:
                if demo_long is not None and len(demo_long):
                    records = sample_equal(demo_self, demo_long, config.batch_size, rng)
                else:
                    records = demo_self.sample(config.batch_size, rng)
                learner.update(records, "td")
                cache.clear()
        rewards.append(total)
    after = demo_long.pushes if demo_long is not None else 0
    return RLResult(pair, learner, demo_long, demo_self, rewards, after - long_pushes)


# -- evaluation ------------------------------------------------------------------

def evaluate_policy(pair: DDQNPair, env_factory: EnvFactory, shapes: Sequence, chamfer: bool = True) -> List[dict]:
    """Greedy episode per shape: accumulated reward, final IoU and Chamfer distance."""
    out = []
    cache = ReferenceCache(pair.current)
    for shape in shapes:
        env = env_factory(shape)
        _, total = policy_rollout(pair, env, 0.0, cache=cache)
        if isinstance(env, PrimEnv):
            iou = env.global_iou()
            solid = env.coverage.occupancy()
        else:
            iou = env.iou()
            solid = env.coverage.occupancy()
        cd = grid_chamfer(solid, shape.target) if chamfer and solid.count() else float("nan")
        out.append({"shape": getattr(shape, "name", ""), "category": getattr(shape, "category", ""),
                    "accumulated_reward": total, "iou": iou, "chamfer": cd})
    return out


def summarize(rows: Sequence[dict], mode: str) -> List[dict]:
    """Per-category means, plus an ``all`` row."""
    if not rows:
        raise ContractError("no evaluation rows to summarize")
    cats: Dict[str, List[dict]] = {}
    for r in rows:
        cats.setdefault(r["category"], []).append(r)
    cats["all"] = list(rows)
    table = []
    for cat, rs in cats.items():
        table.append({
            "mode": mode,
            "category": cat,
            "accumulated_reward": float(np.mean([r["accumulated_reward"] for r in rs])),
            "iou": float(np.mean([r["iou"] for r in rs])),
            "chamfer": float(np.nanmean([r["chamfer"] for r in rs])) if any(np.isfinite(r["chamfer"]) for r in rs) else float("nan"),
        })
    return table


# -- schemes ---------------------------------------------------------------------

@dataclass
class SchemeResult:
    mode: str
    pair: DDQNPair
    metrics: List[dict]
    rows: List[dict]
    il: Optional[ILResult] = None
    rl: Optional[RLResult] = None
    seconds: float = 0.0


def train_scheme(mode: str, env_factory: EnvFactory, demo_shapes: Sequence, train_shapes: Sequence,
                 config: TrainConfig, on_il: Optional[Callable[[ILResult], None]] = None) -> SchemeResult:
    """Train one of the compared learning schemes (no evaluation).

    ``demo_shapes`` receive expert demonstrations; ``train_shapes`` are
    explored during self-exploration. ``on_il`` sees the imitation result
    before self-exploration starts, e.g. to score the IL-only network.
    """
    if mode not in SCHEMES:
        raise ContractError(f"unknown scheme {mode!r}; expected one of {SCHEMES}")
    if mode != "ddqn_only" and not demo_shapes:
        raise ContractError(f"scheme {mode!r} needs demonstration shapes")
    if mode in ("ddqn_only", "dqfd_style", "full") and not train_shapes:
        raise ContractError(f"scheme {mode!r} needs self-exploration shapes")
    t0 = time.time()
    pair = new_pair(env_factory(demo_shapes[0] if demo_shapes else train_shapes[0]), config)
    learner = Learner(pair, config)
    il = rl = None
    if mode == "dagger_only":
        il = run_il(env_factory, demo_shapes, config, pair, double_buffer=False, loss="supervised", learner=learner)
    elif mode == "dqfd_style":
        fixed = config.updated(dagger_iterations=1,
                               updates_per_iteration=config.updates_per_iteration * config.dagger_iterations)
        il = run_il(env_factory, demo_shapes, fixed, pair, relabel=False, double_buffer=False, learner=learner)
    elif mode in ("dagger_star", "full"):
        il = run_il(env_factory, demo_shapes, config, pair, learner=learner)
    if il is not None and on_il is not None:
        on_il(il)
    if mode in ("ddqn_only", "dqfd_style", "full"):
        rl = run_rl(pair, env_factory, train_shapes, config, il.demo_long if il else None, learner=learner)
    return SchemeResult(mode, pair, [], [], il, rl, time.time() - t0)


def run_scheme(mode: str, env_factory: EnvFactory, demo_shapes: Sequence, train_shapes: Sequence,
               eval_shapes: Sequence, config: TrainConfig, chamfer: bool = True) -> SchemeResult:
    """Train a scheme, then evaluate it greedily on ``eval_shapes``."""
    result = train_scheme(mode, env_factory, demo_shapes, train_shapes, config)
    t0 = time.time()
    result.rows = evaluate_policy(result.pair, env_factory, eval_shapes, chamfer)
    result.metrics = summarize(result.rows, mode)
    result.seconds += time.time() - t0
    return result


def expert_agreement(pair: DDQNPair, records: Sequence[Experience]) -> float:
    """Fraction of demo states on which the greedy masked action equals the expert's."""
    if not records:
        return 0.0
    batch = make_batch(records, pair.config, pair.current.dtype)
    with torch.no_grad():
        q = pair.current(batch.refs, batch.params, batch.steps, batch.ref_index)
        picks = q.masked_fill(~batch.masks, float("-inf")).argmax(dim=1)
    return float((picks == batch.actions).double().mean())
