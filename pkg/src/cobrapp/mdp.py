"""State, action and reward for the surrogate-selection decision process.

Per-model features (8 per pool member, in this order):

1. windowed leave-one-out objective error, normalized by the archive f range
2-6. whether the model was the action at steps t-1 .. t-5
7. feasible candidates among the model's last (up to) five uses, divided by 5
8. share of all reward events so far that were earned with this model

Global features: squashed std of the last (up to) five candidate f values,
and the consumed fraction of the evaluation budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .surrogate import LOO_WINDOW, loo_errors

FEATURE_SCHEMA = "v1"
N_MODEL_FEATURES = 8
N_GLOBAL_FEATURES = 2
HISTORY_DEPTH = 5


@dataclass
class SelectionHistory:
    actions: List[int] = field(default_factory=list)
    feasible: List[bool] = field(default_factory=list)
    improved: List[bool] = field(default_factory=list)
    candidate_f: List[float] = field(default_factory=list)

    def record(self, action: int, feasible: bool, improved: bool, f: float) -> None:
        self.actions.append(int(action))
        self.feasible.append(bool(feasible))
        self.improved.append(bool(improved))
        self.candidate_f.append(float(f))

    def __len__(self) -> int:
        return len(self.actions)

    def improvement_counts(self, n_models: int) -> np.ndarray:
        counts = np.zeros(n_models)
        for a, imp in zip(self.actions, self.improved):
            if imp:
                counts[a] += 1
        return counts


@dataclass(frozen=True, eq=False)
class StateVector:
    per_model: np.ndarray  # (n_models, 8)
    global_: np.ndarray  # (2,)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.per_model.ravel(), self.global_])

    def __len__(self) -> int:
        return self.per_model.size + self.global_.size

    @classmethod
    def from_flat(cls, vec, n_models: int = 11) -> "StateVector":
        vec = np.asarray(vec, dtype=float)
        k = n_models * N_MODEL_FEATURES
        return cls(vec[:k].reshape(n_models, N_MODEL_FEATURES), vec[k:k + N_GLOBAL_FEATURES])


@dataclass(frozen=True, eq=False)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


def squash(v: float) -> float:
    return v / (1.0 + v)


def history_features(history: SelectionHistory, n_models: int, fes: int,
                     max_fes: int) -> StateVector:
    """Features 2-8 and both global features (feature 1 left at zero)."""
    t = len(history)
    acts = np.asarray(history.actions, dtype=int)
    feas = np.asarray(history.feasible, dtype=bool)
    per_model = np.zeros((n_models, N_MODEL_FEATURES))

    for k in range(1, HISTORY_DEPTH + 1):
        if t - k >= 0:
            per_model[acts[t - k], k] = 1.0

    for i in range(n_models):
        used = np.flatnonzero(acts == i)[-HISTORY_DEPTH:]
        per_model[i, 6] = np.count_nonzero(feas[used]) / HISTORY_DEPTH

    counts = history.improvement_counts(n_models)
    total = counts.sum()
    if total > 0:
        per_model[:, 7] = counts / total

    recent = np.asarray(history.candidate_f[-HISTORY_DEPTH:], dtype=float)
    g1 = squash(float(np.std(recent))) if recent.size else 0.0
    return StateVector(per_model, np.array([g1, fes / max_fes]))


def extract_state(history: SelectionHistory, pool, dataset, fes: int, max_fes: int,
                  window: int = LOO_WINDOW) -> StateVector:
    kernels = pool.kernels
    state = history_features(history, len(kernels), fes, max_fes)
    state.per_model[:, 0] = loo_errors(kernels, dataset, window)
    return state


def compute_reward(prev_incumbent, new_eval) -> int:
    """1 when the new point is feasible and beats the previous incumbent's f."""
    feasible = bool(np.max(new_eval.g) <= 0.0) if np.size(new_eval.g) else True
    return int(feasible and new_eval.f < prev_incumbent.f)
