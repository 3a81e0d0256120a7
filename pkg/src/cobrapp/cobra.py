"""Bi-stage COBRA iteration on top of a surrogate pool.

Each step evaluates exactly one true point. While the incumbent is infeasible
the point comes from the repair stage (minimize predicted constraint
violation); afterwards it comes from the improvement stage (minimize the
predicted objective inside the predicted feasible region shrunk by a margin).
Both stages use bounded Nelder-Mead with multi-starts on the surrogates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from .mdp import SelectionHistory, StateVector, compute_reward, extract_state
from .problems import (
    ConstrainedProblem,
    Dataset,
    EvalCounter,
    Evaluation,
    default_n0,
    evaluate,
    initial_design,
)
from .seeding import substream
from .surrogate import POOL, SurrogatePool, SurrogateSet, fit_pool

BISECTION_STEPS = 40


@dataclass(frozen=True)
class CobraConfig:
    """Inner-solver settings. ``None`` fields are resolved per problem."""

    margin: Optional[float] = None  # default 1e-4 * bounds range
    inner_budget: Optional[int] = None  # default 200 * dim
    restarts: int = 5
    duplicate_tol: Optional[float] = None  # default 1e-8 * dim * bounds range
    margin_grow: float = 2.0
    margin_shrink: float = 0.5
    margin_floor: float = 1e-6
    margin_cap: Optional[float] = None  # default 0.1 * bounds range
    simplex_step: float = 0.05  # initial simplex edge, fraction of bounds range

    def resolve(self, problem: ConstrainedProblem) -> "CobraConfig":
        span, dim = problem.bounds_range, problem.dim
        cfg = replace(
            self,
            margin=1e-4 * span if self.margin is None else self.margin,
            inner_budget=200 * dim if self.inner_budget is None else self.inner_budget,
            duplicate_tol=1e-8 * dim * span if self.duplicate_tol is None else self.duplicate_tol,
            margin_cap=0.1 * span if self.margin_cap is None else self.margin_cap,
        )
        if cfg.margin < 0:
            raise ValueError("margin must be non-negative")
        if cfg.inner_budget < 10 * dim:
            raise ValueError("inner_budget must be at least 10 * dim")
        if not cfg.duplicate_tol > 0:
            raise ValueError("duplicate_tol must be positive")
        if cfg.restarts < 1:
            raise ValueError("restarts must be at least 1")
        return cfg


@dataclass(frozen=True)
class Incumbent:
    x: np.ndarray
    f: float
    violation: float
    feasible: bool

    @classmethod
    def from_evaluation(cls, e: Evaluation) -> "Incumbent":
        return cls(e.x, e.f, e.violation, e.feasible)


def dominates(e: Evaluation, inc: Optional[Incumbent]) -> bool:
    """Feasible beats infeasible; then lower f (feasible) or lower violation, then f."""
    if inc is None:
        return True
    if e.feasible != inc.feasible:
        return e.feasible
    if e.feasible:
        return e.f < inc.f
    v = e.violation
    return v < inc.violation or (v == inc.violation and e.f < inc.f)


def best_of(dataset: Dataset) -> Incumbent:
    inc = None
    for e in dataset:
        if dominates(e, inc):
            inc = Incumbent.from_evaluation(e)
    return inc


def _starts(start, bounds, restarts, rng) -> List[np.ndarray]:
    lo, hi = bounds[:, 0], bounds[:, 1]
    pts = [np.clip(np.asarray(start, dtype=float), lo, hi)]
    pts += [rng.uniform(lo, hi) for _ in range(restarts - 1)]
    return pts


def _simplex(x0, bounds, step) -> np.ndarray:
    lo, hi = bounds[:, 0], bounds[:, 1]
    d = x0.size
    sim = np.tile(x0, (d + 1, 1))
    for i in range(d):
        h = step * (hi[i] - lo[i])
        sim[i + 1, i] = x0[i] + h if x0[i] + h <= hi[i] else x0[i] - h
    return sim


def _local_search(fun, x0, bounds, cfg: CobraConfig) -> np.ndarray:
    span = float(np.max(bounds[:, 1] - bounds[:, 0]))
    res = minimize(
        fun,
        x0,
        method="Nelder-Mead",
        bounds=bounds,
        options={
            "maxfev": cfg.inner_budget,
            "maxiter": 10 * cfg.inner_budget,
            "xatol": 1e-9 * span,
            "fatol": np.inf,
            "initial_simplex": _simplex(x0, bounds, cfg.simplex_step),
        },
    )
    return np.clip(res.x, bounds[:, 0], bounds[:, 1])


def _violation(g, margin: float) -> float:
    return float(np.sum(np.maximum(g + margin, 0.0) ** 2))


def stage1_repair(sset: SurrogateSet, start, bounds, cfg: CobraConfig,
                  rng: Optional[np.random.Generator] = None,
                  margin: Optional[float] = None) -> np.ndarray:
    """Approximately minimize the predicted squared violation sum_j max(g_j + margin, 0)^2.

    Every surrogate evaluation is tracked; the best one by (violation,
    predicted f) is returned, so the result never has higher predicted
    violation than ``start``.
    """
    bounds = np.asarray(bounds, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    margin = (cfg.margin or 0.0) if margin is None else margin
    best = [np.inf, np.inf, None]

    def fun(x):
        f, g = sset.predict_point(x)
        v = _violation(g, margin)
        if v < best[0] or (v == best[0] and f < best[1]):
            best[:] = [v, f, np.array(x, dtype=float)]
        return v

    for x0 in _starts(start, bounds, cfg.restarts, rng):
        fun(x0)
        _local_search(fun, x0, bounds, cfg)
    return best[2]


def _stage2(sset: SurrogateSet, start, bounds, cfg: CobraConfig, rng, margin):
    bounds = np.asarray(bounds, dtype=float)
    f_span = float(np.ptp(sset.f_hat.values)) if sset.f_hat.values.size > 1 else 1.0
    g_vals = np.column_stack([m.values for m in sset.g_hat]) if sset.g_hat else np.zeros((1, 1))
    g_span = float(np.max(np.ptp(g_vals, axis=0))) if g_vals.shape[0] > 1 else 1.0
    rho0 = 10.0 * max(f_span, 1e-12) / max(g_span, 1e-12) ** 2
    best = [np.inf, None]
    rho = [rho0]

    def feasible(g):
        return bool(np.all(g + margin <= 0.0))

    def fun(x):
        f, g = sset.predict_point(x)
        if feasible(g) and f < best[0]:
            best[:] = [f, np.array(x, dtype=float)]
        return f + rho[0] * _violation(g, margin)

    finals = []
    for k, x0 in enumerate(_starts(start, bounds, cfg.restarts, rng)):
        rho[0] = rho0 * 10.0 ** k
        fun(x0)
        finals.append(_local_search(fun, x0, bounds, cfg))

    if best[1] is None:
        return stage1_repair(sset, start, bounds, cfg, rng, margin), True

    # pull penalized optima that overshot the boundary back onto it
    for xb in finals:
        f_b, g_b = sset.predict_point(xb)
        if feasible(g_b) or f_b >= best[0]:
            continue
        xa = best[1]
        lo, hi = 0.0, 1.0
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            _, g_m = sset.predict_point(xa + mid * (xb - xa))
            if feasible(g_m):
                lo = mid
            else:
                hi = mid
        xm = xa + lo * (xb - xa)
        f_m, g_m = sset.predict_point(xm)
        if feasible(g_m) and f_m < best[0]:
            best[:] = [f_m, xm]
    return best[1], False


def stage2_improve(sset: SurrogateSet, start, bounds, cfg: CobraConfig,
                   rng: Optional[np.random.Generator] = None,
                   margin: Optional[float] = None) -> np.ndarray:
    """Minimize predicted f subject to g_hat_j + margin <= 0.

    Penalty multi-start (penalty weight grows 10x per restart); the best
    strictly margin-feasible surrogate point is returned. Falls back to the
    repair stage when no such point was found.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    margin = (cfg.margin or 0.0) if margin is None else margin
    return _stage2(sset, start, bounds, cfg, rng, margin)[0]


def make_distinct(x, dataset: Dataset, tol: float, bounds, rng) -> np.ndarray:
    """Perturb ``x`` inside the box until it is farther than ``tol`` from the archive."""
    bounds = np.asarray(bounds, dtype=float)
    x = np.asarray(x, dtype=float)
    if dataset.min_distance(x) > tol:
        return x
    radius = 2.0 * tol
    for _ in range(200):
        u = rng.standard_normal(x.size)
        cand = np.clip(x + radius * u / np.linalg.norm(u), bounds[:, 0], bounds[:, 1])
        if dataset.min_distance(cand) > tol:
            return cand
        radius *= 2.0
    raise RuntimeError("could not find a point distinct from the archive")


@dataclass
class StepResult:
    evaluation: Evaluation
    incumbent: Incumbent
    stage: int
    fallback: bool
    margin: float
    candidate: np.ndarray


def cobra_step(problem: ConstrainedProblem, pool: SurrogatePool, action: int,
               incumbent: Incumbent, dataset: Dataset, cfg: CobraConfig,
               counter: EvalCounter, rng: np.random.Generator,
               margin: Optional[float] = None) -> StepResult:
    """One COBRA iteration with surrogate set ``pool[action]`` (1 FE)."""
    cfg = cfg.resolve(problem)
    margin = cfg.margin if margin is None else margin
    sset = pool[action]
    bounds = problem.bounds
    if incumbent.feasible:
        cand, fallback = _stage2(sset, incumbent.x, bounds, cfg, rng, margin)
        stage = 2
    else:
        cand = stage1_repair(sset, incumbent.x, bounds, cfg, rng, margin)
        stage, fallback = 1, False
    x = make_distinct(cand, dataset, cfg.duplicate_tol, bounds, rng)
    ev = evaluate(problem, x, counter)
    dataset.append(ev)
    new_inc = Incumbent.from_evaluation(ev) if dominates(ev, incumbent) else incumbent
    if stage == 2 and not fallback:
        if ev.feasible:
            margin = max(cfg.margin_floor, margin * cfg.margin_shrink)
        else:
            margin = min(cfg.margin_cap, margin * cfg.margin_grow)
    return StepResult(ev, new_inc, stage, fallback, margin, np.asarray(cand))


@dataclass
class StepRecord:
    step: int
    fes: int
    action: int
    reward: int
    reward_vs_candidate: int
    stage: int
    fallback: bool
    x: np.ndarray
    f: float
    g: np.ndarray
    violation: float
    feasible: bool
    best_f: float
    best_violation: float
    best_feasible: bool


TRACE_COLUMNS = ("step", "fes", "action", "reward", "f", "violation", "feasible",
                 "best_f", "best_feasible")


def fmt(v: float) -> str:
    return f"{v:.17g}"


@dataclass
class RunTrace:
    problem: str
    seed: int
    budget: int
    n0: int
    f_star: float
    design_best_feasible_f: Optional[float]
    steps: List[StepRecord] = field(default_factory=list)
    design: Optional[Dataset] = None

    @property
    def final_fes(self) -> int:
        return self.steps[-1].fes if self.steps else self.n0

    @property
    def actions(self) -> List[int]:
        return [s.action for s in self.steps]

    @property
    def rewards(self) -> List[int]:
        return [s.reward for s in self.steps]

    @property
    def best_feasible_f(self) -> Optional[float]:
        if self.steps:
            last = self.steps[-1]
            return last.best_f if last.best_feasible else None
        return self.design_best_feasible_f

    @property
    def first_feasible_f(self) -> Optional[float]:
        """f of the initial feasible solution: best feasible design point, else first feasible step."""
        if self.design_best_feasible_f is not None:
            return self.design_best_feasible_f
        for s in self.steps:
            if s.feasible:
                return s.f
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for s in self.steps:
            w.writerow([s.step, s.fes, s.action, s.reward, fmt(s.f), fmt(s.violation),
                        int(s.feasible), fmt(s.best_f), int(s.best_feasible)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def read_trace_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({
            "step": int(r["step"]), "fes": int(r["fes"]), "action": int(r["action"]),
            "reward": int(r["reward"]), "f": float(r["f"]), "violation": float(r["violation"]),
            "feasible": bool(int(r["feasible"])), "best_f": float(r["best_f"]),
            "best_feasible": bool(int(r["best_feasible"])),
        })
    return out


class Episode:
    """A single optimization run, steppable one action at a time."""

    def __init__(self, problem: ConstrainedProblem, budget: int, cfg: CobraConfig = CobraConfig(),
                 seed: int = 0, n0: Optional[int] = None, kernels=POOL):
        self.problem = problem
        self.budget = int(budget)
        self.n0 = default_n0(problem.dim, budget) if n0 is None else int(n0)
        if self.budget <= self.n0:
            raise ValueError(f"budget ({budget}) must exceed n0 ({self.n0})")
        self.cfg = cfg.resolve(problem)
        self.kernels = tuple(kernels)
        self.counter = EvalCounter(self.budget)
        self.dataset = initial_design(problem, self.n0, seed, self.counter)
        self.pool = fit_pool(self.dataset, self.kernels)
        self.incumbent = best_of(self.dataset)
        self.history = SelectionHistory()
        self.margin = self.cfg.margin
        self.rng = substream(seed, "cobra")
        feas = self.dataset.f[self.dataset.feasible]
        self.trace = RunTrace(str(problem.spec), seed, self.budget, self.n0, problem.f_star,
                              float(feas.min()) if feas.size else None, design=self.dataset)
        self._prev_f: Optional[float] = None

    @property
    def done(self) -> bool:
        return self.counter.exhausted

    @property
    def fes(self) -> int:
        return self.counter.count

    def state(self) -> StateVector:
        return extract_state(self.history, self.pool, self.dataset, self.fes, self.budget)

    def step(self, action: int) -> StepRecord:
        if not 0 <= action < len(self.pool):
            raise ValueError(f"action {action} outside 0..{len(self.pool) - 1}")
        prev = self.incumbent
        res = cobra_step(self.problem, self.pool, action, prev, self.dataset, self.cfg,
                         self.counter, self.rng, self.margin)
        ev = res.evaluation
        reward = compute_reward(prev, ev)
        # alternative reading of the reward: compare with the previous candidate
        prev_f = self._prev_f if self._prev_f is not None else prev.f
        reward_cand = int(ev.feasible and ev.f < prev_f)
        self._prev_f = ev.f
        self.incumbent = res.incumbent
        self.margin = res.margin
        self.history.record(action, ev.feasible, bool(reward), ev.f)
        self.pool = fit_pool(self.dataset, self.kernels)
        inc = self.incumbent
        rec = StepRecord(len(self.trace.steps) + 1, ev.fes_at_eval, int(action), reward,
                         reward_cand, res.stage, res.fallback, ev.x, ev.f, ev.g,
                         ev.violation, ev.feasible, inc.f, inc.violation, inc.feasible)
        self.trace.steps.append(rec)
        return rec


def run_cobra(problem: ConstrainedProblem, selector, budget: int,
              cfg: CobraConfig = CobraConfig(), seed: int = 0,
              n0: Optional[int] = None) -> RunTrace:
    """Run COBRA to the budget, asking ``selector`` for the pool index at each step."""
    ep = Episode(problem, budget, cfg, seed, n0, getattr(selector, "kernels", POOL))
    rng = substream(seed, "selector")
    while not ep.done:
        state = ep.state() if getattr(selector, "needs_state", True) else None
        ep.step(int(selector.select(state, ep.pool, rng)))
    return ep.trace
