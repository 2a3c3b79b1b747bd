"""Greedy one-step demonstrator for both agents."""

from __future__ import annotations

from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .env_mesh import MeshEnv
from .env_prim import ACTIONS_PER_PRIM, PrimEnv
from .geometry import ContractError, Cuboid, OccupancyGrid
from .replay import Experience


def expert_candidates(env) -> np.ndarray:
    legal = np.flatnonzero(env.legal_mask())
    if isinstance(env, PrimEnv) and env.step_count < env.n_steps // 2:
        # first half: corner drags only
        legal = legal[legal % ACTIONS_PER_PRIM < 24]
    return legal


def score_candidates(env) -> Tuple[np.ndarray, np.ndarray]:
    candidates = expert_candidates(env)
    return candidates, np.array([env.score_action(a) for a in candidates])


def expert_action(env) -> int:
    """Best one-step reward among the allowed actions; lowest index on ties."""
    candidates, scores = score_candidates(env)
    return int(candidates[int(np.argmax(scores))])


expert_action_prim = expert_action
expert_action_mesh = expert_action


def rollout_expert(env) -> List[Experience]:
    """Run the expert until the episode ends, recording demo transitions."""
    out = []
    obs = env.observe()
    while not env.done:
        a = expert_action(env)
        _, reward, done = env.step(a)
        nxt = env.observe()
        out.append(Experience(obs, a, reward, nxt, done, True))
        obs = nxt
    return out


def generate_demonstrations(shapes: Iterable, resolution: int = 32, kind: str = "prim",
                            n_steps: Optional[int] = None) -> List[Experience]:
    """Expert rollouts over ``shapes``.

    For ``kind="prim"`` each shape is ``(target, reference)``; for
    ``kind="mesh"`` it is ``(cuboids, target, reference)``.
    """
    if kind not in ("prim", "mesh"):
        raise ContractError(f"unknown demonstration kind {kind!r}")
    records: List[Experience] = []
    for shape in shapes:
        if kind == "prim":
            target, reference = shape
            env = PrimEnv(resolution, **({"n_steps": n_steps} if n_steps else {}))
            env.reset(target, reference)
        else:
            cuboids, target, reference = shape
            env = MeshEnv(resolution, **({"n_steps": n_steps} if n_steps else {}))
            env.reset(cuboids, target, reference)
        records.extend(rollout_expert(env))
    return records


def expert_primitives(target: OccupancyGrid, reference=None, resolution: Optional[int] = None) -> List[Cuboid]:
    """Final cuboids of a full expert episode."""
    env = PrimEnv(resolution or target.resolution)
    env.reset(target, reference)
    rollout_expert(env)
    return env.state.cuboids
