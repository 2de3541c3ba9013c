"""Per-study topic/state assignments."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError


class Mode(str, Enum):
    ONE_HOT_TRUTH = "one_hot_truth"
    PREDICTED = "predicted"


@dataclass
class Checklist:
    """``n x k`` state matrix; rows of a truth checklist are exact one-hot."""

    states: np.ndarray
    mode: Mode = Mode.PREDICTED

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2:
            raise ContractError(f"checklist must be n x k, got shape {self.states.shape}")
        if not np.allclose(self.states.sum(axis=1), 1.0, atol=1e-6):
            raise ContractError("checklist rows must sum to 1")
        if self.mode is Mode.ONE_HOT_TRUTH and not is_one_hot(self.states):
            raise ContractError("truth checklist rows must be one-hot")

    @classmethod
    def from_indices(cls, indices, k: int, mode: Mode = Mode.ONE_HOT_TRUTH) -> "Checklist":
        indices = np.asarray(indices, dtype=int)
        return cls(np.eye(k)[indices], mode)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def k(self) -> int:
        return self.states.shape[1]

    def indices(self) -> np.ndarray:
        return self.states.argmax(axis=1)

    def to_json(self, topics, states) -> dict:
        """``{"states": {topic: state}, "probabilities": [[...]]}``"""
        idx = self.indices()
        return {
            "states": {t: states[i] for t, i in zip(topics, idx)},
            "probabilities": self.states.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict, topics, states, mode: Mode = Mode.PREDICTED) -> "Checklist":
        if "probabilities" in obj:
            return cls(np.asarray(obj["probabilities"]), mode)
        lookup = {s: i for i, s in enumerate(states)}
        return cls.from_indices([lookup[obj["states"][t]] for t in topics], len(states), mode)


def is_one_hot(states: np.ndarray) -> bool:
    states = np.asarray(states)
    return bool(np.all((states == 0) | (states == 1)) and np.all(states.sum(axis=-1) == 1))
