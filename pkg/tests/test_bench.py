import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cobrapp.bench import (BrokenOptimum, FixedSelector, GreedyErrorSelector, RandomSelector,
                           RunResult, aggregate, parse_selector, phase_frequencies, rank_scores,
                           read_runs_csv, ri, run_grid, trace_filename, write_reports)
from cobrapp.cobra import read_trace_csv
from cobrapp.mdp import StateVector
from cobrapp.problems import ProblemSpec


def test_ri_examples():
    assert ri(10.0, 0.0, 10.0) == 1.0
    assert ri(10.0, 0.0, 1.0) == 10.0
    assert ri(None, 0.0, None) is None
    assert ri(10.0, 0.0, 0.0) == 1e12
    with pytest.raises(BrokenOptimum):
        ri(10.0, 0.0, -1e-3)


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100), st.floats(1e-3, 100), st.floats(1e-3, 100), st.floats(-1e3, 1e3))
def test_ri_shift_invariance(f_star, gap_best, extra, c):
    f_best = f_star + gap_best
    f0 = f_best + extra
    a = ri(f0, f_star, f_best)
    b = ri(f0 + c, f_star + c, f_best + c)
    assert b == pytest.approx(a, rel=1e-9)


def _state(errors):
    pm = np.zeros((11, 8))
    pm[:, 0] = errors
    return StateVector(pm, np.zeros(2))


def test_baseline_selectors():
    rng = np.random.default_rng(0)
    assert all(FixedSelector(0).select(None, None, rng) == 0 for _ in range(20))
    errs = np.full(11, 0.5)
    errs[4] = 0.1
    assert GreedyErrorSelector().select(_state(errs), None, rng) == 4
    assert GreedyErrorSelector().select(_state(np.zeros(11)), None, rng) == 0
    with pytest.raises(ValueError):
        FixedSelector(11)
    assert parse_selector("fixed:3").name == "fixed:3"
    assert parse_selector("random").name == "random"
    with pytest.raises(ValueError):
        parse_selector("learned")


def test_random_selector_uniform():
    rng = np.random.default_rng(1)
    sel = RandomSelector()
    counts = np.bincount([sel.select(None, None, rng) for _ in range(11000)], minlength=11)
    assert stats.chisquare(counts).pvalue > 0.01


def test_rank_examples():
    assert rank_scores([2.0, 1.0]).tolist() == [1.0, 2.0]
    assert rank_scores([1.0, 1.0]).tolist() == [1.5, 1.5]
    assert rank_scores([None, 0.5, 3.0]).tolist() == [3.0, 2.0, 1.0]
    assert rank_scores([None, None, 3.0]).tolist() == [2.5, 2.5, 1.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(0, 1e6)), min_size=1, max_size=12))
def test_ranks_are_tie_averaged_permutations(scores):
    r = rank_scores(scores)
    n = len(scores)
    assert r.sum() == pytest.approx(n * (n + 1) / 2)
    key = [-np.inf if s is None else s for s in scores]
    for i in range(n):
        above = sum(k > key[i] for k in key)
        equal = sum(k == key[i] for k in key)
        assert r[i] == pytest.approx(above + (equal + 1) / 2)


def _run(algo, problem, ri_value, rep=0, budget=100):
    best = None if ri_value is None else 1.0
    return RunResult(problem, budget, algo, rep, 0, 10.0, 0.0, best, ri_value, budget)


def test_aggregate_two_algorithms():
    runs = [_run("a", "p", 2.0), _run("b", "p", 1.0)]
    t = aggregate(runs)
    assert t.cell("p", 100, "a").rank == 1.0 and t.cell("p", 100, "b").rank == 2.0
    assert t.avg_rank[100] == {"a": 1.0, "b": 2.0}


def test_aggregate_none_cell_ranks_last():
    runs = [_run("a", "p", None), _run("a", "p", None, rep=1), _run("b", "p", 0.5)]
    t = aggregate(runs)
    cell = t.cell("p", 100, "a")
    assert cell.mean_ri is None and cell.n_feasible == 0 and cell.n_runs == 2
    assert cell.rank == 2.0


def test_aggregate_mean_std_and_missing_cell():
    runs = [_run("a", "p", v, rep=i) for i, v in enumerate([1.0, 3.0, None])]
    runs.append(_run("b", "p", 1.0))
    cell = aggregate(runs).cell("p", 100, "a")
    assert cell.mean_ri == 2.0 and cell.std_ri == 1.0 and cell.n_feasible == 2
    with pytest.raises(ValueError):
        aggregate(runs + [_run("a", "q", 1.0)])


def test_phase_frequencies():
    h = phase_frequencies([[2] * 9])
    assert h[:, 2].tolist() == [3, 3, 3] and h.sum() == 9
    h = phase_frequencies([[2] * 10, [2] * 7])
    assert np.all(h[:, [i for i in range(11) if i != 2]] == 0)
    mixed = phase_frequencies([list(range(11)) * 2, [5, 5, 1, 0]])
    assert mixed.sum(axis=1).tolist() == [8 + 2, 7 + 1, 7 + 1]


def test_grid_reports_match_brute_force(tmp_path):
    specs = [ProblemSpec.parse("sphere:1:2"), ProblemSpec.parse("linear_slope:2:2")]
    sels = [FixedSelector(0), RandomSelector()]
    trace_dir = tmp_path / "traces"
    os.makedirs(trace_dir)
    results = run_grid(specs, sels, [14], 2, seed=3, trace_dir=str(trace_dir))
    table = write_reports(results, tmp_path)
    for name in ("runs.csv", "report.csv", "ranks.csv", "table.txt", "phase_freq.csv"):
        assert (tmp_path / name).exists()
    runs = read_runs_csv(tmp_path / "runs.csv")
    assert len(runs) == 8
    # paired designs: both algorithms see the same run seed per repeat
    seeds = {(r.problem, r.repeat): set() for r in runs}
    for r in runs:
        seeds[(r.problem, r.repeat)].add(r.seed)
    assert all(len(s) == 1 for s in seeds.values())
    for r in runs:
        rows = read_trace_csv(trace_dir / trace_filename(r.problem, r.budget, r.algorithm, r.repeat))
        assert rows[-1]["fes"] == r.fes == 14
        if r.best_f is not None:
            assert rows[-1]["best_feasible"]
            assert rows[-1]["best_f"] == pytest.approx(r.best_f, rel=1e-15)
            assert r.ri == pytest.approx(ri(r.f0, r.f_star, r.best_f), rel=1e-12)
    for row in table.rows:
        vals = [r.ri for r in runs if (r.problem, r.algorithm) == (row.problem, row.algorithm)
                and r.ri is not None]
        if vals:
            assert row.mean_ri == pytest.approx(np.mean(vals), rel=1e-12)
            assert row.std_ri == pytest.approx(np.std(vals), rel=1e-9, abs=1e-12)
