"""Run configuration: flat ``key = value`` sections read with configparser.

Defaults are the full-scale values. The shipped ``desk`` profile overrides
what must shrink for a laptop CPU.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Dict, Optional, Tuple

from .env_mesh import MESH_STEPS
from .env_prim import ALPHA1, ALPHA2, MERGE_THRESHOLDS, PRIM_STEPS
from .geometry import ContractError
from .training import SHAPE_LOOPS, TrainConfig

RUNS_ENV = "PRIMMESH_RUNS"
PROFILES = ("full-scale", "desk")

_TRAINING_KEYS = ("batch_size", "learning_rate", "finetune_learning_rate", "finetune_target_sync", "gamma", "margin", "lam", "epsilon",
                  "target_sync", "dagger_iterations", "updates_per_iteration", "demo_capacity", "self_capacity",
                  "rl_episodes", "rl_update_every", "rl_warmup", "shape_loop", "seed")
_NETWORK_KEYS = ("conv_channels", "conv_kernels", "pool", "param_hidden", "step_hidden", "head_hidden")


@dataclass
class EnvSettings:
    prim_steps: int = PRIM_STEPS
    mesh_steps: int = MESH_STEPS
    alpha1: float = ALPHA1
    alpha2: float = ALPHA2
    merge_thresholds: Tuple[float, ...] = MERGE_THRESHOLDS


@dataclass
class DataSettings:
    shapes: int = 20
    demo_shapes: int = 5
    train_shapes: int = 15
    seed: int = 0


@dataclass
class Config:
    training: TrainConfig = field(default_factory=TrainConfig)
    env: EnvSettings = field(default_factory=EnvSettings)
    data: DataSettings = field(default_factory=DataSettings)
    runs: str = "runs"
    dataset: str = ""
    runs_override: Optional[str] = None  # command-line flag; beats the environment variable

    @property
    def resolution(self) -> int:
        return self.training.resolution

    def validate(self) -> "Config":
        t, e, d = self.training, self.env, self.data
        checks = [
            (4 <= t.resolution <= 128, "resolution must lie in [4, 128]"),
            (t.batch_size >= 1, "batch_size must be positive"),
            (t.learning_rate > 0, "learning_rate must be positive"),
            (t.finetune_learning_rate is None or t.finetune_learning_rate > 0,
             "finetune_learning_rate must be positive"),
            (t.finetune_target_sync is None or t.finetune_target_sync >= 1, "finetune_target_sync must be positive"),
            (0 <= t.gamma < 1, "gamma must lie in [0, 1)"),
            (t.margin >= 0 and t.lam >= 0, "margin and lam must be non-negative"),
            (0 <= t.epsilon <= 1, "epsilon must lie in [0, 1]"),
            (t.target_sync >= 1, "target_sync must be positive"),
            (t.dagger_iterations >= 1 and t.updates_per_iteration >= 1, "DAgger schedule must be positive"),
            (t.demo_capacity >= 1 and t.self_capacity >= 1, "buffer capacities must be positive"),
            (t.rl_episodes >= 0 and t.rl_update_every >= 1 and t.rl_warmup >= 0, "bad RL schedule"),
            (t.shape_loop in SHAPE_LOOPS, f"shape_loop must be one of {SHAPE_LOOPS}"),
            (len(t.conv_channels) == len(t.conv_kernels) >= 1, "conv_channels and conv_kernels must pair up"),
            (e.prim_steps >= 1 and e.mesh_steps >= 1, "episode lengths must be positive"),
            (all(0 < x <= 1 for x in e.merge_thresholds), "merge thresholds must lie in (0, 1]"),
            (1 <= d.demo_shapes <= d.shapes and 1 <= d.train_shapes <= d.shapes, "bad shape split"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ContractError(f"invalid config: {msg}")
        return self

    def runs_root(self) -> Path:
        return Path(self.runs_override or os.environ.get(RUNS_ENV) or self.runs)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        t = self.training
        parser["geometry"] = {"resolution": str(t.resolution)}
        parser["env"] = {f.name: _fmt(getattr(self.env, f.name)) for f in fields(self.env)}
        parser["network"] = {k: _fmt(getattr(t, k)) for k in _NETWORK_KEYS}
        parser["training"] = {k: _fmt(getattr(t, k)) for k in _TRAINING_KEYS}
        parser["data"] = {f.name: _fmt(getattr(self.data, f.name)) for f in fields(self.data)}
        parser["paths"] = {"runs": self.runs, "dataset": self.dataset}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in parser[name].items()]
            lines.append("")
        return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(text: str, like):
    text = text.strip()
    if isinstance(like, tuple):
        kind = float if like and isinstance(like[0], float) else int
        return tuple(kind(v) for v in text.split(",") if v.strip())
    if text.lower() == "none":
        return None
    if isinstance(like, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float) or like is None:
        return float(text)
    return text


_SECTIONS = {"geometry", "env", "network", "training", "data", "paths"}


def _apply(config: Config, parser: configparser.ConfigParser, origin: str) -> Config:
    unknown = set(parser.sections()) - _SECTIONS
    if unknown:
        raise ContractError(f"{origin}: unknown section(s) {sorted(unknown)}")
    train: Dict[str, object] = {}
    for section in parser.sections():
        for key, text in parser[section].items():
            try:
                if section == "geometry" and key == "resolution":
                    train[key] = int(text)
                elif section in ("training", "network") and key in _TRAINING_KEYS + _NETWORK_KEYS:
                    train[key] = _parse(text, getattr(config.training, key))
                elif section == "env" and hasattr(config.env, key):
                    setattr(config.env, key, _parse(text, getattr(config.env, key)))
                elif section == "data" and hasattr(config.data, key):
                    setattr(config.data, key, _parse(text, getattr(config.data, key)))
                elif section == "paths" and key in ("runs", "dataset"):
                    setattr(config, key, text.strip())
                else:
                    raise ContractError(f"{origin}: unknown key [{section}] {key}")
            except ValueError as exc:
                if isinstance(exc, ContractError):
                    raise
                raise ContractError(f"{origin}: bad value for [{section}] {key}: {text!r}") from None
    config.training = config.training.updated(**train)
    return config


def profile_text(name: str) -> str:
    if name not in PROFILES:
        raise ContractError(f"unknown profile {name!r}; expected one of {PROFILES}")
    return resources.files("primmesh").joinpath("profiles", f"{name}.ini").read_text()


def load_config(path: Optional[os.PathLike] = None, profile: str = "desk") -> Config:
    """Profile first, then the optional user file on top; the result is validated."""
    config = Config()
    parser = configparser.ConfigParser()
    parser.read_string(profile_text(profile), source=f"profile {profile}")
    _apply(config, parser, f"profile {profile}")
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ContractError(f"{path}: {exc.message}") from None
        _apply(config, parser, str(path))
    return config.validate()
