"""scikit-learn style wrappers around the two agents.

``X`` is always a collection of shapes: ``Shape`` objects, ``OccupancyGrid``
objects, or boolean arrays of shape ``(R, R, R)`` / ``(n, R, R, R)``.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Shape
from .env_mesh import MESH_STEPS, MeshEnv, cap_primitives
from .env_prim import MERGE_THRESHOLDS, PRIM_STEPS, PrimEnv, merge_primitives
from .expert import expert_primitives
from .geometry import ContractError, Cuboid, OccupancyGrid
from .pipeline import greedy_episode
from .qnetwork import load_checkpoint, save_checkpoint
from .training import DESK, SCHEMES, TrainConfig, mesh_env_factory, prim_env_factory, train_scheme


def check_shapes(X, resolution: Optional[int] = None) -> List[Shape]:
    """Coerce ``X`` to a non-empty list of shapes sharing one resolution."""
    if isinstance(X, (Shape, OccupancyGrid)):
        X = [X]
    elif isinstance(X, np.ndarray):
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4:
            raise ContractError(f"expected an array of shape (n, R, R, R), got {X.shape}")
        X = list(X)
    shapes = []
    for i, item in enumerate(X):
        if isinstance(item, Shape):
            shapes.append(item)
            continue
        if not isinstance(item, OccupancyGrid):
            arr = np.asarray(item)
            if arr.ndim != 3 or len(set(arr.shape)) != 1:
                raise ContractError(f"shape {i}: expected a cubic 3-D grid, got {arr.shape}")
            if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
                raise ContractError(f"shape {i}: occupancy values must be 0 or 1")
            item = OccupancyGrid(arr.astype(bool))
        shapes.append(Shape.from_grid(item, name=f"shape_{i:04d}"))
    if not shapes:
        raise ContractError("X holds no shapes")
    found = {s.target.resolution for s in shapes}
    if len(found) > 1:
        raise ContractError(f"mixed resolutions {sorted(found)}")
    if resolution is not None and found != {resolution}:
        raise ContractError(f"resolution {found.pop()} != expected {resolution}")
    return shapes


def check_config(config) -> TrainConfig:
    if config is None:
        return DESK
    if isinstance(config, dict):
        return DESK.updated(**config)
    if not isinstance(config, TrainConfig):
        raise ContractError("config must be a TrainConfig, a dict of overrides or None")
    return config


class _Agent(BaseEstimator):
    n_steps_default = 0

    def _config(self, resolution: int) -> TrainConfig:
        cfg = check_config(self.config).updated(resolution=resolution)
        if self.random_state is not None:
            cfg = cfg.updated(seed=int(self.random_state))
        return cfg

    def _fit_scheme(self, factory, shapes):
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.n_demo < 0:
            raise ContractError("n_demo must be non-negative")
        cfg = self._config(shapes[0].target.resolution)
        result = train_scheme(self.scheme, factory, shapes[: self.n_demo], shapes, cfg)
        self.net_ = result.pair.current
        self.resolution_ = cfg.resolution
        self.il_ = result.il
        self.rl_ = result.rl
        self.fit_seconds_ = result.seconds
        return self

    def save(self, dest) -> None:
        check_is_fitted(self, "net_")
        save_checkpoint(self.net_, dest, {"agent": self.kind, "resolution": self.resolution_,
                                          "n_steps": self.n_steps, "scheme": self.scheme})

    @classmethod
    def load(cls, src, **params):
        net, extra = load_checkpoint(src)
        if extra.get("agent") != cls.kind:
            raise ContractError(f"checkpoint holds a {extra.get('agent')!r} agent, not {cls.kind!r}")
        agent = cls(**{"scheme": extra.get("scheme", "full"), "n_steps": extra.get("n_steps", cls.n_steps_default),
                       **params})
        agent.net_ = net
        agent.resolution_ = int(extra["resolution"])
        return agent


class PrimAgent(_Agent):
    """Cuboid-editing agent.

    ``fit`` demonstrates on the first ``n_demo`` shapes and explores all of
    them; ``predict`` returns the final primitive list per shape; ``score``
    is the mean greedy accumulated reward.
    """

    kind = "prim"
    n_steps_default = PRIM_STEPS

    def __init__(self, scheme: str = "full", config=None, n_demo: int = 5, n_steps: int = PRIM_STEPS,
                 random_state: Optional[int] = 0):
        self.scheme = scheme
        self.config = config
        self.n_demo = n_demo
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X, y=None):
        shapes = check_shapes(X)
        return self._fit_scheme(prim_env_factory(shapes[0].target.resolution, self.n_steps), shapes)

    def _episodes(self, X):
        check_is_fitted(self, "net_")
        for shape in check_shapes(X, self.resolution_):
            env = PrimEnv(self.resolution_, self.n_steps)
            env.reset(shape.target, shape.reference)
            total = greedy_episode(self.net_, env)
            yield env, total

    def predict(self, X) -> List[List[Cuboid]]:
        return [env.state.cuboids for env, _ in self._episodes(X)]

    def primitives_for_mesh(self, X, thresholds: Sequence[float] = MERGE_THRESHOLDS) -> List[List[Cuboid]]:
        """Merged, capped primitives: the Mesh-Agent's starting point."""
        out = []
        for cs in self.predict(X):
            merged = cap_primitives(merge_primitives(cs, thresholds))
            if not merged:
                raise ContractError("the Prim-Agent deleted every primitive")
            out.append(merged)
        return out

    def score(self, X, y=None) -> float:
        return float(np.mean([total for _, total in self._episodes(X)]))


class MeshAgent(_Agent):
    """Edge-loop editing agent started from a frozen ``prim_agent``'s output.

    Without a ``prim_agent`` the virtual expert's primitives are used.
    ``predict`` returns the final loops per shape; ``score`` is the mean
    final IoU.
    """

    kind = "mesh"
    n_steps_default = MESH_STEPS

    def __init__(self, prim_agent: Optional[PrimAgent] = None, scheme: str = "full", config=None, n_demo: int = 5,
                 n_steps: int = MESH_STEPS, random_state: Optional[int] = 0):
        self.prim_agent = prim_agent
        self.scheme = scheme
        self.config = config
        self.n_demo = n_demo
        self.n_steps = n_steps
        self.random_state = random_state

    def _starts(self, shapes) -> dict:
        if self.prim_agent is not None:
            starts = self.prim_agent.primitives_for_mesh(shapes)
        else:
            starts = [cap_primitives(merge_primitives(expert_primitives(s.target, s.reference))) for s in shapes]
        return {id(s): c for s, c in zip(shapes, starts)}

    def fit(self, X, y=None):
        shapes = check_shapes(X)
        starts = self._starts(shapes)
        factory = mesh_env_factory(shapes[0].target.resolution, lambda s: starts[id(s)], self.n_steps)
        return self._fit_scheme(factory, shapes)

    def _episodes(self, X):
        check_is_fitted(self, "net_")
        shapes = check_shapes(X, self.resolution_)
        starts = self._starts(shapes)
        for shape in shapes:
            env = MeshEnv(self.resolution_, self.n_steps)
            env.reset(starts[id(shape)], shape.target, shape.reference)
            greedy_episode(self.net_, env)
            yield env

    def predict(self, X):
        return [list(env.loops) for env in self._episodes(X)]

    def score(self, X, y=None) -> float:
        return float(np.mean([env.iou() for env in self._episodes(X)]))
