"""Surrogate-assisted constrained optimization with a learned kernel-selection policy."""

from .bench import (FixedSelector, GreedyErrorSelector, LearnedSelector, RandomSelector, aggregate,
                    phase_frequencies, ri)
from .cobra import CobraConfig, Episode, RunTrace, run_cobra
from .policy import QNetwork, load_checkpoint, save_checkpoint
from .problems import Family, ProblemSpec, make_problem
from .surrogate import POOL, fit_pool, fit_rbf
from .trainer import TrainConfig, evaluate_policy, train_policy

__version__ = "0.1.0"
