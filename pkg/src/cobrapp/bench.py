"""Relative improvement, baseline selectors, aggregation and phase analysis.

The baselines are stand-ins, not reimplementations of published methods:
``fixed:K`` is plain COBRA with one kernel, ``random`` draws a pool member
uniformly, and ``greedy-error`` picks the member with the smallest windowed
leave-one-out error at every step (an adaptive-selection proxy).
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .cobra import CobraConfig, RunTrace, run_cobra
from .policy import QNetwork, select_action
from .problems import ProblemSpec, make_problem
from .seeding import derive_seed
from .surrogate import POOL_SIZE

RI_CLAMP = 1e12
RI_DENOM_MIN = 1e-12
OPTIMUM_TOL = 1e-9
NONE = "none"


class BrokenOptimum(ValueError):
    """The run found a point better than the problem's stated optimum."""


def ri(f0: Optional[float], f_star: float, f_best: Optional[float]) -> Optional[float]:
    """(f0 - f_star) / (f_best - f_star); None when the run never saw a feasible point.

    The tolerance on ``f_best >= f_star`` scales with ``max(1, |f_star|)`` so the
    check stays meaningful on problems whose optimum is large in magnitude.
    """
    if f0 is None or f_best is None:
        return None
    if f_best < f_star - OPTIMUM_TOL * max(1.0, abs(f_star)):
        raise BrokenOptimum(f"f_best={f_best!r} is below f_star={f_star!r}")
    denom = f_best - f_star
    if denom < RI_DENOM_MIN:
        return RI_CLAMP
    return min((f0 - f_star) / denom, RI_CLAMP)


def initial_feasible_f(trace: RunTrace) -> Optional[float]:
    """Best feasible design value, else the first feasible value found during the run."""
    if trace.design_best_feasible_f is not None:
        return trace.design_best_feasible_f
    return trace.first_feasible_f


def trace_ri(trace: RunTrace) -> Optional[float]:
    return ri(initial_feasible_f(trace), trace.f_star, trace.best_feasible_f)


# -- selectors ----------------------------------------------------------------

class FixedSelector:
    needs_state = False

    def __init__(self, index: int):
        if not 0 <= int(index) < POOL_SIZE:
            raise ValueError(f"fixed kernel index {index} outside 0..{POOL_SIZE - 1}")
        self.index = int(index)
        self.name = f"fixed:{self.index}"

    def select(self, state, pool, rng) -> int:
        return self.index


class RandomSelector:
    needs_state = False
    name = "random"

    def select(self, state, pool, rng) -> int:
        return int(rng.integers(len(pool) if pool is not None else POOL_SIZE))


class GreedyErrorSelector:
    """Smallest windowed leave-one-out error, lowest index on ties."""

    needs_state = True
    name = "greedy-error"

    def select(self, state, pool, rng) -> int:
        return int(np.argmin(state.per_model[:, 0]))


class LearnedSelector:
    """Greedy (epsilon = 0) action from a trained Q-network."""

    needs_state = True

    def __init__(self, net: QNetwork, name: str = "learned"):
        self.net = net
        self.name = name

    def select(self, state, pool, rng) -> int:
        return select_action(self.net, state, 0.0, rng)


def parse_selector(text: str, net: Optional[QNetwork] = None):
    """Build a selector from ``fixed:K``, ``random``, ``greedy-error`` or ``learned``."""
    key = text.strip().lower()
    if key.startswith("fixed:"):
        try:
            index = int(key.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad fixed selector {text!r}") from None
        return FixedSelector(index)
    if key == "random":
        return RandomSelector()
    if key in ("greedy-error", "greedy_error", "greedy"):
        return GreedyErrorSelector()
    if key == "learned":
        if net is None:
            raise ValueError("the learned selector needs a policy checkpoint")
        return LearnedSelector(net)
    raise ValueError(f"unknown selector {text!r}")


def select_baseline(selector, state, pool, rng) -> int:
    return int(selector.select(state, pool, rng))


# -- runs ---------------------------------------------------------------------

@dataclass
class RunResult:
    problem: str
    budget: int
    algorithm: str
    repeat: int
    seed: int
    f0: Optional[float]
    f_star: float
    best_f: Optional[float]
    ri: Optional[float]
    fes: int
    trace: Optional[RunTrace] = field(default=None, repr=False)

    @property
    def feasible(self) -> bool:
        return self.best_f is not None


RUN_COLUMNS = ("problem", "budget", "algorithm", "repeat", "seed", "f0", "f_star", "best_f",
               "ri", "fes")


def _cell(v) -> str:
    if v is None:
        return NONE
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _opt_float(text: str) -> Optional[float]:
    return None if text == NONE else float(text)


def run_seed(seed: int, problem: str, budget: int, repeat: int) -> int:
    """Run seed shared by all algorithms, so comparisons are paired by initial design."""
    return derive_seed(seed, "run", problem, budget, repeat)


def run_one(spec: ProblemSpec, selector, budget: int, repeat: int, seed: int,
            cfg: CobraConfig = CobraConfig(), n0: Optional[int] = None) -> RunResult:
    problem = make_problem(spec)
    rs = run_seed(seed, str(spec), budget, repeat)
    trace = run_cobra(problem, selector, budget, cfg, rs, n0)
    f0 = initial_feasible_f(trace)
    return RunResult(str(spec), budget, selector.name, repeat, rs, f0, problem.f_star,
                     trace.best_feasible_f, trace_ri(trace), trace.final_fes, trace)


def trace_filename(problem: str, budget: int, algorithm: str, repeat: int) -> str:
    return f"{problem}_{budget}_{algorithm}_{repeat}.csv".replace(":", "-")


def run_grid(specs: Sequence[ProblemSpec], selectors: Sequence, budgets: Sequence[int],
             repeats: int, seed: int, cfg: CobraConfig = CobraConfig(),
             n0: Optional[int] = None, trace_dir=None) -> List[RunResult]:
    results = []
    for spec in specs:
        for budget in budgets:
            for sel in selectors:
                for rep in range(repeats):
                    res = run_one(spec, sel, budget, rep, seed, cfg, n0)
                    if trace_dir is not None:
                        name = trace_filename(str(spec), budget, sel.name, rep)
                        res.trace.write_csv(os.path.join(trace_dir, name))
                    results.append(res)
    return sort_runs(results)


def sort_runs(results: Iterable[RunResult]) -> List[RunResult]:
    return sorted(results, key=lambda r: (r.problem, r.budget, r.algorithm, r.repeat))


def runs_to_csv(results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for r in sort_runs(results):
        w.writerow([_cell(getattr(r, c)) for c in RUN_COLUMNS])
    return buf.getvalue()


def read_runs_csv(path) -> List[RunResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunResult(row["problem"], int(row["budget"]), row["algorithm"],
                                 int(row["repeat"]), int(row["seed"]), _opt_float(row["f0"]),
                                 float(row["f_star"]), _opt_float(row["best_f"]),
                                 _opt_float(row["ri"]), int(row["fes"])))
    return out


# -- aggregation --------------------------------------------------------------

@dataclass
class ResultRow:
    problem: str
    budget: int
    algorithm: str
    mean_ri: Optional[float]
    std_ri: Optional[float]
    n_feasible: int
    n_runs: int
    rank: float = float("nan")


@dataclass
class ResultsTable:
    rows: List[ResultRow]
    avg_rank: Dict[int, Dict[str, float]]  # budget -> algorithm -> mean rank

    def cell(self, problem: str, budget: int, algorithm: str) -> ResultRow:
        for r in self.rows:
            if (r.problem, r.budget, r.algorithm) == (problem, budget, algorithm):
                return r
        raise KeyError((problem, budget, algorithm))

    @property
    def algorithms(self) -> List[str]:
        return sorted({r.algorithm for r in self.rows})


def rank_scores(scores: Sequence[Optional[float]]) -> np.ndarray:
    """Ranks 1..n with higher score first, ties averaged, None ranked last."""
    vals = np.array([-np.inf if s is None else s for s in scores], dtype=float)
    return rankdata(-vals, method="average")


def aggregate(results: Sequence[RunResult]) -> ResultsTable:
    """Mean and (population) std of RI per cell over its feasible runs, plus ranks.

    Runs that never found a feasible point count in ``n_runs`` but not in the
    mean; a cell whose runs are all infeasible has no mean and ranks last.
    """
    cells: Dict[tuple, List[RunResult]] = {}
    for r in results:
        cells.setdefault((r.problem, r.budget, r.algorithm), []).append(r)
    algos = sorted({k[2] for k in cells})
    groups = sorted({k[:2] for k in cells})
    rows: List[ResultRow] = []
    rank_acc: Dict[int, Dict[str, List[float]]] = {}
    for problem, budget in groups:
        group_rows = []
        for algo in algos:
            runs = cells.get((problem, budget, algo))
            if not runs:
                raise ValueError(f"empty cell {problem} / {budget} / {algo}")
            vals = np.array([r.ri for r in runs if r.ri is not None], dtype=float)
            mean = float(vals.mean()) if vals.size else None
            std = float(vals.std()) if vals.size else None
            group_rows.append(ResultRow(problem, budget, algo, mean, std, int(vals.size), len(runs)))
        ranks = rank_scores([r.mean_ri for r in group_rows])
        for row, rk in zip(group_rows, ranks):
            row.rank = float(rk)
            rank_acc.setdefault(budget, {}).setdefault(row.algorithm, []).append(row.rank)
        rows.extend(group_rows)
    avg = {b: {a: float(np.mean(v)) for a, v in d.items()} for b, d in rank_acc.items()}
    return ResultsTable(rows, avg)


def phase_frequencies(traces: Sequence, n_actions: int = POOL_SIZE) -> np.ndarray:
    """Action counts per optimization phase (first/middle/final third of each run).

    ``traces`` holds RunTrace objects or plain action sequences. Returns a
    (3, n_actions) integer array.
    """
    hist = np.zeros((3, n_actions), dtype=int)
    for t in traces:
        actions = np.asarray(t.actions if hasattr(t, "actions") else t, dtype=int)
        for phase, chunk in enumerate(np.array_split(actions, 3)):
            hist[phase] += np.bincount(chunk, minlength=n_actions)
    return hist


# -- rendering ----------------------------------------------------------------

def report_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["problem", "budget", "algorithm", "mean_ri", "std_ri", "n_feasible_runs",
                "n_runs", "rank"])
    for r in table.rows:
        w.writerow([r.problem, r.budget, r.algorithm, _cell(r.mean_ri), _cell(r.std_ri),
                    r.n_feasible, r.n_runs, _cell(r.rank)])
    return buf.getvalue()


def ranks_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["budget", "algorithm", "avg_rank"])
    for b in sorted(table.avg_rank):
        for a in sorted(table.avg_rank[b]):
            w.writerow([b, a, _cell(table.avg_rank[b][a])])
    return buf.getvalue()


def phase_csv(freq_by_algo: Dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = next(iter(freq_by_algo.values())).shape[1] if freq_by_algo else POOL_SIZE
    w.writerow(["algorithm", "phase", *[f"model_{i}" for i in range(n)]])
    for a in sorted(freq_by_algo):
        for phase, name in enumerate(("first", "middle", "final")):
            w.writerow([a, name, *freq_by_algo[a][phase].tolist()])
    return buf.getvalue()


def _fmt_cell(row: ResultRow) -> str:
    if row.mean_ri is None:
        return NONE
    return f"{row.mean_ri:.3g} ({row.std_ri:.2g})"


def render_table(table: ResultsTable) -> str:
    """Plain-text grid: one line per problem and budget, mean (std) RI per algorithm."""
    algos = table.algorithms
    header = ["problem", "budget", *algos]
    lines = [header]
    for problem, budget in sorted({(r.problem, r.budget) for r in table.rows}):
        lines.append([problem, str(budget),
                      *[_fmt_cell(table.cell(problem, budget, a)) for a in algos]])
    for b in sorted(table.avg_rank):
        lines.append(["avg rank", str(b), *[f"{table.avg_rank[b][a]:.2f}" for a in algos]])
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(l, widths)).rstrip()
                     for l in lines) + "\n"


def _write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_reports(results: Sequence[RunResult], out_dir, traces: Optional[Dict] = None) -> ResultsTable:
    """Write runs.csv, report.csv, ranks.csv, phase_freq.csv and table.txt."""
    os.makedirs(out_dir, exist_ok=True)
    table = aggregate(results)
    _write(os.path.join(out_dir, "runs.csv"), runs_to_csv(results))
    _write(os.path.join(out_dir, "report.csv"), report_csv(table))
    _write(os.path.join(out_dir, "ranks.csv"), ranks_csv(table))
    _write(os.path.join(out_dir, "table.txt"), render_table(table))
    if traces is None:
        traces = {}
        for r in results:
            if r.trace is not None:
                traces.setdefault(r.algorithm, []).append(r.trace)
    if traces:
        freq = {a: phase_frequencies(ts) for a, ts in traces.items()}
        _write(os.path.join(out_dir, "phase_freq.csv"), phase_csv(freq))
    return table

