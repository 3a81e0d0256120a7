"""Training loop for the selection policy and greedy evaluation of a checkpoint.

Each epoch visits every training problem once, in a seeded shuffled order.
An episode starts from a fresh initial design and runs COBRA to the budget,
choosing the pool member epsilon-greedily; every step pushes one transition
and, once the buffer holds a full batch, triggers a gradient step every
``train_interval`` environment steps. Epsilon decays per environment step
across episodes; the target network is synced every ``target_sync_interval``
gradient steps.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bench import LearnedSelector, RunResult, run_grid
from .cobra import CobraConfig, Episode, RunTrace
from .mdp import Transition
from .policy import (Adam, EpsilonSchedule, QNetwork, ReplayBuffer, default_arch, save_checkpoint,
                     select_action, sync_target, train_step)
from .problems import ProblemSpec, make_problem
from .seeding import derive_seed, substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    train_set: Tuple[ProblemSpec, ...]
    max_epochs: int = 10
    budget: int = 100
    n0: Optional[int] = None
    batch: int = 1024
    gamma: float = 0.95
    lr: float = 1e-3
    train_interval: int = 1
    target_sync_interval: int = 500
    buffer_capacity: int = 10_000
    eps_start: float = 1.0
    eps_decay: float = 0.995
    eps_floor: float = 0.01
    feature_extractor: bool = True
    seed: int = 0
    fresh_designs: bool = True
    checkpoint: Optional[str] = None
    cobra: CobraConfig = field(default_factory=CobraConfig)

    def validate(self) -> "TrainConfig":
        if not self.train_set:
            raise ValueError("training set is empty")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch < 1 or self.train_interval < 1 or self.target_sync_interval < 1:
            raise ValueError("batch and intervals must be positive")
        if self.n0 is not None and self.budget <= self.n0:
            raise ValueError(f"budget ({self.budget}) must exceed n0 ({self.n0})")
        return self


@dataclass
class EpochReport:
    epoch: int
    total_return: float
    per_problem: Dict[str, float]
    epsilon: float
    mean_loss: Optional[float]
    n_updates: int
    transitions: int
    traces: List[RunTrace] = field(default_factory=list, repr=False)


class TrainingError(RuntimeError):
    """Training aborted; ``reports`` holds the epochs completed before the failure."""

    def __init__(self, message: str, reports: List[EpochReport]):
        super().__init__(message)
        self.reports = reports


@dataclass
class Trainer:
    """Mutable training state: online and target nets, optimizer, buffer, schedule."""

    cfg: TrainConfig
    net: QNetwork = None
    target: QNetwork = None
    opt: Adam = None
    buffer: ReplayBuffer = None
    eps: EpsilonSchedule = None
    updates: int = 0

    def __post_init__(self):
        cfg = self.cfg.validate()
        self.net = QNetwork(default_arch(cfg.feature_extractor), rng=substream(cfg.seed, "init"))
        self.target = self.net.copy()
        self.opt = Adam(self.net.params, lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, self.net.state_dim)
        self.eps = EpsilonSchedule(cfg.eps_start, cfg.eps_decay, cfg.eps_floor)
        self.act_rng = substream(cfg.seed, "explore")
        self.batch_rng = substream(cfg.seed, "minibatch")

    def episode_seed(self, epoch: int, spec: ProblemSpec) -> int:
        if self.cfg.fresh_designs:
            return derive_seed(self.cfg.seed, "episode", epoch, str(spec))
        return derive_seed(self.cfg.seed, "episode", str(spec))

    def run_episode(self, spec: ProblemSpec, epoch: int, losses: List[float],
                    traces: Optional[List[RunTrace]] = None) -> float:
        cfg = self.cfg
        ep = Episode(make_problem(spec), cfg.budget, cfg.cobra, self.episode_seed(epoch, spec), cfg.n0)
        state = ep.state()
        total = 0.0
        steps = 0
        while not ep.done:
            action = select_action(self.net, state, self.eps.value, self.act_rng)
            rec = ep.step(action)
            nxt = ep.state()
            self.buffer.push(Transition(state.flat, action, float(rec.reward), nxt.flat, ep.done))
            total += rec.reward
            steps += 1
            self.eps.step()
            if steps % cfg.train_interval == 0 and len(self.buffer) >= cfg.batch:
                loss = train_step(self.net, self.target, self.buffer, self.opt, cfg.gamma,
                                  cfg.batch, self.batch_rng)
                losses.append(loss)
                self.updates += 1
                if self.updates % cfg.target_sync_interval == 0:
                    sync_target(self.net, self.target)
            state = nxt
        if traces is not None:
            traces.append(ep.trace)
        return total

    def meta(self, epochs: int) -> dict:
        return {"epochs": epochs, "seed": self.cfg.seed, "epsilon": self.eps.value,
                "updates": self.updates, "budget": self.cfg.budget,
                "train_set": [str(s) for s in self.cfg.train_set]}

    def run_epoch(self, epoch: int) -> EpochReport:
        order = substream(self.cfg.seed, "shuffle", epoch).permutation(len(self.cfg.train_set))
        losses: List[float] = []
        per_problem: Dict[str, float] = {}
        traces: List[RunTrace] = []
        before = self.buffer.pushed
        for i in order:
            spec = self.cfg.train_set[i]
            per_problem[str(spec)] = self.run_episode(spec, epoch, losses, traces)
        mean_loss = float(np.mean(losses)) if losses else None
        return EpochReport(epoch, float(sum(per_problem.values())), per_problem, self.eps.value,
                           mean_loss, len(losses), self.buffer.pushed - before, traces)


def train_policy(cfg: TrainConfig, epochs_csv=None) -> Tuple[QNetwork, List[EpochReport]]:
    """Train a policy; returns the final online network and one report per epoch.

    With ``cfg.checkpoint`` set the network is saved after every epoch (and
    once before training, so ``max_epochs=0`` still leaves a checkpoint).
    """
    trainer = Trainer(cfg)
    reports: List[EpochReport] = []
    if cfg.checkpoint:
        save_checkpoint(trainer.net, trainer.meta(0), cfg.checkpoint)
    for epoch in range(1, cfg.max_epochs + 1):
        try:
            rep = trainer.run_epoch(epoch)
        except Exception as exc:
            raise TrainingError(f"epoch {epoch} failed: {exc}", reports) from exc
        reports.append(rep)
        log.info("epoch %d return %g eps %.4f loss %s", epoch, rep.total_return, rep.epsilon,
                 rep.mean_loss)
        if cfg.checkpoint:
            save_checkpoint(trainer.net, trainer.meta(epoch), cfg.checkpoint)
        if epochs_csv is not None:
            write_epochs_csv(reports, epochs_csv)
    trainer.net.meta = trainer.meta(len(reports))
    return trainer.net, reports


def write_epochs_csv(reports: Sequence[EpochReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "return", "epsilon", "mean_loss"])
        for r in reports:
            loss = "" if r.mean_loss is None else f"{r.mean_loss:.17g}"
            w.writerow([r.epoch, f"{r.total_return:.17g}", f"{r.epsilon:.17g}", loss])


def evaluate_policy(net: QNetwork, test_set: Sequence[ProblemSpec], budgets: Sequence[int],
                    repeats: int, seed: int, cobra: CobraConfig = CobraConfig(),
                    n0: Optional[int] = None, trace_dir=None) -> List[RunResult]:
    """Greedy runs of the policy on every problem x budget x repeat.

    Schema compatibility is enforced when the checkpoint is loaded.
    """
    if trace_dir is not None:
        os.makedirs(trace_dir, exist_ok=True)
    return run_grid(test_set, [LearnedSelector(net)], budgets, repeats, seed, cobra, n0, trace_dir)
