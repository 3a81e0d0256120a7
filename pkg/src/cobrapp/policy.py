"""Deep Q-network for surrogate selection, written against plain numpy.

Architecture: the 88 per-model features pass through a model extractor
(88 -> 32 -> 16) and the 2 global features through a global extractor
(2 -> 8 -> 16); the two 16-vectors are concatenated and mapped by the Q head
(32 -> 32 -> 64 -> 128 -> 11). Hidden layers use relu, output layers are
linear. With ``feature_extractor=False`` the extractors are bypassed and the
head reads the interleaved vector [s_m1, s_g, s_m2, s_g, ...] (110 inputs).
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .mdp import FEATURE_SCHEMA, N_GLOBAL_FEATURES, N_MODEL_FEATURES, StateVector, Transition

CHECKPOINT_VERSION = 1
N_ACTIONS = 11


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class SchemaMismatch(CheckpointError):
    pass


class BufferTooSmall(ValueError):
    pass


def default_arch(feature_extractor: bool = True) -> dict:
    return {
        "n_models": N_ACTIONS,
        "n_model_features": N_MODEL_FEATURES,
        "n_global": N_GLOBAL_FEATURES,
        "model_hidden": [32],
        "global_hidden": [8],
        "embed": 16,
        "head_hidden": [32, 64, 128],
        "n_actions": N_ACTIONS,
        "feature_extractor": bool(feature_extractor),
    }


def _mlp_sizes(arch: dict) -> Dict[str, List[int]]:
    n_m, n_f, n_g = arch["n_models"], arch["n_model_features"], arch["n_global"]
    if arch["feature_extractor"]:
        return {
            "model": [n_m * n_f, *arch["model_hidden"], arch["embed"]],
            "global": [n_g, *arch["global_hidden"], arch["embed"]],
            "head": [2 * arch["embed"], *arch["head_hidden"], arch["n_actions"]],
        }
    return {"head": [n_m * (n_f + n_g), *arch["head_hidden"], arch["n_actions"]]}


def xavier_normal(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / (fan_in + fan_out))


class QNetwork:
    """Twin feature extractors feeding a Q head; parameters live in ``params``."""

    def __init__(self, arch: Optional[dict] = None, rng: Optional[np.random.Generator] = None,
                 seed: int = 0):
        self.arch = dict(default_arch() if arch is None else arch)
        self.sizes = _mlp_sizes(self.arch)
        rng = np.random.default_rng(seed) if rng is None else rng
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, sizes in self.sizes.items():
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                self.params[f"{name}.W{i}"] = xavier_normal(a, b, rng)
                self.params[f"{name}.b{i}"] = np.zeros(b)
        self.meta: dict = {}

    @property
    def state_dim(self) -> int:
        a = self.arch
        return a["n_models"] * a["n_model_features"] + a["n_global"]

    @property
    def n_actions(self) -> int:
        return self.arch["n_actions"]

    def copy(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.arch = dict(self.arch)
        other.sizes = {k: list(v) for k, v in self.sizes.items()}
        other.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        other.meta = dict(self.meta)
        return other

    # -- forward / backward -------------------------------------------------

    def _split(self, S: np.ndarray):
        a = self.arch
        k = a["n_models"] * a["n_model_features"]
        return S[:, :k], S[:, k:k + a["n_global"]]

    def _interleave(self, S: np.ndarray) -> np.ndarray:
        a = self.arch
        sm, sg = self._split(S)
        sm = sm.reshape(S.shape[0], a["n_models"], a["n_model_features"])
        sg = np.repeat(sg[:, None, :], a["n_models"], axis=1)
        return np.concatenate([sm, sg], axis=2).reshape(S.shape[0], -1)

    def _mlp_forward(self, name: str, x: np.ndarray, cache: Optional[list]):
        n = len(self.sizes[name]) - 1
        for i in range(n):
            z = x @ self.params[f"{name}.W{i}"] + self.params[f"{name}.b{i}"]
            if cache is not None:
                cache.append(x)
            x = np.maximum(z, 0.0) if i < n - 1 else z
        return x

    def _mlp_backward(self, name: str, grad: np.ndarray, cache: list, grads: dict):
        n = len(self.sizes[name]) - 1
        for i in reversed(range(n)):
            x_in = cache[i]
            grads[f"{name}.W{i}"] = x_in.T @ grad
            grads[f"{name}.b{i}"] = grad.sum(axis=0)
            grad = grad @ self.params[f"{name}.W{i}"].T
            if i > 0:
                # input of layer i is relu output of layer i-1
                grad = grad * (x_in > 0.0)
        return grad

    def forward(self, S, cache: Optional[dict] = None) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if S.shape[1] != self.state_dim:
            raise ValueError(f"state length {S.shape[1]} != {self.state_dim}")
        if not self.arch["feature_extractor"]:
            c = None if cache is None else cache.setdefault("head", [])
            return self._mlp_forward("head", self._interleave(S), c)
        sm, sg = self._split(S)
        cm = None if cache is None else cache.setdefault("model", [])
        cg = None if cache is None else cache.setdefault("global", [])
        ch = None if cache is None else cache.setdefault("head", [])
        hm = self._mlp_forward("model", sm, cm)
        hg = self._mlp_forward("global", sg, cg)
        return self._mlp_forward("head", np.concatenate([hm, hg], axis=1), ch)

    def backward(self, dQ: np.ndarray, cache: dict) -> Dict[str, np.ndarray]:
        grads: Dict[str, np.ndarray] = {}
        g = self._mlp_backward("head", dQ, cache["head"], grads)
        if self.arch["feature_extractor"]:
            e = self.arch["embed"]
            self._mlp_backward("model", g[:, :e], cache["model"], grads)
            self._mlp_backward("global", g[:, e:], cache["global"], grads)
        return OrderedDict((k, grads[k]) for k in self.params)


def _as_matrix(state) -> np.ndarray:
    if isinstance(state, StateVector):
        state = state.flat
    return np.atleast_2d(np.asarray(state, dtype=float))


def forward(net: QNetwork, state) -> np.ndarray:
    """Q values (11,) for one state, or (B, 11) for a batch."""
    S = _as_matrix(state)
    if not np.all(np.isfinite(S)):
        raise ValueError("state contains non-finite values")
    Q = net.forward(S)
    single = isinstance(state, StateVector) or np.ndim(state) == 1
    return Q[0] if single else Q


def greedy(q: np.ndarray, allowed: Optional[Sequence[int]] = None) -> int:
    if allowed is None:
        return int(np.argmax(q))  # first maximum, i.e. lowest index on ties
    allowed = np.asarray(sorted(allowed), dtype=int)
    return int(allowed[np.argmax(q[allowed])])


def select_action(net: QNetwork, state, epsilon: float, rng: np.random.Generator,
                  allowed: Optional[Sequence[int]] = None) -> int:
    """epsilon-greedy over the (optionally restricted) action set."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        if allowed is None:
            return int(rng.integers(net.n_actions))
        return int(rng.choice(np.asarray(sorted(allowed))))
    return greedy(forward(net, state), allowed)


@dataclass
class EpsilonSchedule:
    value: float = 1.0
    decay: float = 0.995
    floor: float = 0.01

    def step(self) -> float:
        self.value = max(self.floor, self.value * self.decay)
        return self.value


class ReplayBuffer:
    """FIFO ring buffer of transitions stored in preallocated arrays."""

    def __init__(self, capacity: int = 10_000, state_dim: int = 90):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity, dtype=int)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0
        self.pushed = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        i = self.cursor
        self.s[i] = t.s.flat if isinstance(t.s, StateVector) else t.s
        self.a[i] = t.a
        self.r[i] = t.r
        self.s2[i] = t.s_next.flat if isinstance(t.s_next, StateVector) else t.s_next
        self.terminal[i] = t.terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def sample(self, k: int, rng: np.random.Generator) -> dict:
        if self.size < k:
            raise BufferTooSmall(f"buffer holds {self.size} transitions, batch needs {k}")
        idx = rng.choice(self.size, size=k, replace=False)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx],
                "s_next": self.s2[idx], "terminal": self.terminal[idx], "index": idx}


def push(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.push(transition)


def sample(buffer: ReplayBuffer, k: int, rng: np.random.Generator) -> dict:
    return buffer.sample(k, rng)


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def td_targets(batch: dict, target_net: QNetwork, gamma: float) -> np.ndarray:
    """y = r + gamma * max_a Q_target(s', a), and y = r on terminal transitions."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    r = np.asarray(batch["r"], dtype=float)
    q_next = target_net.forward(batch["s_next"]).max(axis=1)
    return r + gamma * np.where(batch["terminal"], 0.0, q_next)


def loss_and_grads(net: QNetwork, S, A, y):
    """Mean squared TD error over the batch and its parameter gradients."""
    cache: dict = {}
    Q = net.forward(S, cache)
    rows = np.arange(Q.shape[0])
    diff = Q[rows, A] - y
    loss = float(np.mean(diff * diff))
    dQ = np.zeros_like(Q)
    dQ[rows, A] = 2.0 * diff / Q.shape[0]
    return loss, net.backward(dQ, cache)


def train_step(net: QNetwork, target_net: QNetwork, buffer: ReplayBuffer, opt: Adam,
               gamma: float, k: int, rng: np.random.Generator) -> Optional[float]:
    """One gradient step on a sampled minibatch; None while the buffer is warming up."""
    if len(buffer) < k:
        return None
    batch = buffer.sample(k, rng)
    y = td_targets(batch, target_net, gamma)
    loss, grads = loss_and_grads(net, batch["s"], batch["a"], y)
    opt.step(net.params, grads)
    return loss


def sync_target(net: QNetwork, target_net: QNetwork) -> None:
    if net.arch != target_net.arch:
        raise ValueError("architecture mismatch between online and target network")
    for k, v in net.params.items():
        if target_net.params[k].shape != v.shape:
            raise ValueError(f"shape mismatch for {k}")
        target_net.params[k][...] = v


# -- persistence -------------------------------------------------------------

def _floats(a: np.ndarray) -> str:
    return "[" + ", ".join(f"{v:.17g}" for v in a.ravel()) + "]"


def save_checkpoint(net: QNetwork, meta: Optional[dict], path) -> None:
    head = {
        "version": CHECKPOINT_VERSION,
        "arch": net.arch,
        "feature_schema": FEATURE_SCHEMA,
        "meta": dict(net.meta if meta is None else meta),
    }
    parts = [
        f'  "{name}": {{"shape": {json.dumps(list(v.shape))}, "data": {_floats(v)}}}'
        for name, v in net.params.items()
    ]
    text = json.dumps(head, indent=1, sort_keys=True)[:-2]
    text += ',\n "params": {\n' + ",\n".join(parts) + "\n }\n}\n"
    with open(path, "w") as fh:
        fh.write(text)


def load_checkpoint(path, feature_schema: str = FEATURE_SCHEMA) -> QNetwork:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: not a valid checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or not {"version", "arch", "feature_schema", "params"} <= doc.keys():
        raise CorruptCheckpoint(f"{path}: missing checkpoint fields")
    if doc["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: version {doc['version']}, expected {CHECKPOINT_VERSION}")
    if doc["feature_schema"] != feature_schema:
        raise SchemaMismatch(
            f"{path}: feature schema {doc['feature_schema']!r}, expected {feature_schema!r}")
    try:
        net = QNetwork(doc["arch"])
        for name in net.params:
            entry = doc["params"][name]
            arr = np.array(entry["data"], dtype=float).reshape(entry["shape"])
            if arr.shape != net.params[name].shape:
                raise ValueError(f"bad shape for {name}")
            net.params[name] = arr
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed parameters ({exc})") from exc
    net.meta = dict(doc.get("meta", {}))
    return net
