"""Observation container and the per-step action restriction shared by both agents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Observation:
    """One agent observation, kept as its three network streams.

    ``reference`` is shared between every observation of an episode, so
    replay buffers holding thousands of these stay small. ``to_vector`` gives
    the flat layout: raster, then parameters, then the step one-hot.
    """

    reference: np.ndarray
    params: np.ndarray
    step: int
    n_steps: int

    def step_one_hot(self) -> np.ndarray:
        out = np.zeros(self.n_steps, dtype=np.float32)
        if self.step < self.n_steps:
            out[self.step] = 1.0
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.reference, np.float32).ravel(), self.params.ravel(), self.step_one_hot()]
        )

    def __len__(self) -> int:
        return int(np.asarray(self.reference).size + self.params.size + self.n_steps)


def slot_mask(step: int, n_slots: int, per_slot: int) -> np.ndarray:
    """Only the actions of slot ``step mod n_slots`` are legal."""
    mask = np.zeros(n_slots * per_slot, dtype=bool)
    i = step % n_slots
    mask[i * per_slot:(i + 1) * per_slot] = True
    return mask
