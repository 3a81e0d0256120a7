"""Command line entry points: ``train``, ``run``, ``bench`` and ``report``.

Settings come from a TOML file with sections [problem] [cobra] [dqn] [train]
[bench]; command line flags override file values. Every command that writes
files also writes ``config.toml``, the effective configuration, next to its
outputs. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from typing import List, Optional

import tomli
import tomli_w

from . import bench
from .cobra import CobraConfig, read_trace_csv, run_cobra
from .policy import CheckpointError, load_checkpoint, save_checkpoint
from .problems import TEST_FAMILIES, TRAIN_FAMILIES, ProblemSpec, default_n0, make_problem
from .trainer import TrainConfig, train_policy, write_epochs_csv

log = logging.getLogger("cobrapp")

DEFAULTS = {
    "problem": {
        "dim": 10,
        "instances": [1, 2, 3, 4, 5, 6],
        "train_families": [f.value for f in TRAIN_FAMILIES],
        "test_families": [f.value for f in TEST_FAMILIES],
        "train": [],  # explicit problem specs; override the family grid when non-empty
        "test": [],
    },
    "cobra": {"restarts": 5, "margin_grow": 2.0, "margin_shrink": 0.5, "margin_floor": 1e-6,
              "simplex_step": 0.05},
    "dqn": {"batch": 1024, "gamma": 0.95, "lr": 1e-3, "train_interval": 1,
            "target_sync_interval": 500, "buffer_capacity": 10_000, "eps_start": 1.0,
            "eps_decay": 0.995, "eps_floor": 0.01, "feature_extractor": True},
    "train": {"epochs": 10, "budget": 100, "seed": 0, "fresh_designs": True},
    "bench": {"suite": "test", "algos": ["learned", "random", "fixed:0", "greedy-error"],
              "budgets": [100, 150, 200], "repeats": 5, "seed": 0},
}
# keys that may be set but have no default (resolved per problem when absent)
OPTIONAL = {"cobra": {"margin", "inner_budget", "duplicate_tol", "margin_cap", "n0"}}


class UsageError(Exception):
    pass


def load_config(path: Optional[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    for section, values in doc.items():
        if section not in cfg or not isinstance(values, dict):
            raise UsageError(f"{path}: unknown section [{section}]")
        allowed = set(cfg[section]) | OPTIONAL.get(section, set())
        for key, value in values.items():
            if key not in allowed:
                raise UsageError(f"{path}: unknown key {section}.{key}")
            cfg[section][key] = value
    return cfg


def override(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg[section][key] = value


def write_snapshot(cfg: dict, out_dir: str, name: str = "config.toml") -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "wb") as fh:
        tomli_w.dump(cfg, fh)


def cobra_config(cfg: dict) -> CobraConfig:
    values = {k: v for k, v in cfg["cobra"].items() if k != "n0"}
    try:
        return CobraConfig(**values)
    except TypeError as exc:
        raise UsageError(f"bad [cobra] section: {exc}") from exc


def _specs(names, families, instances, dim) -> List[ProblemSpec]:
    try:
        if names:
            return [ProblemSpec.parse(s) for s in names]
        return [ProblemSpec(f, i, dim) for f in families for i in instances]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def suite(cfg: dict, name: str) -> List[ProblemSpec]:
    p = cfg["problem"]
    if name == "train":
        return _specs(p["train"], p["train_families"], p["instances"], p["dim"])
    if name == "test":
        return _specs(p["test"], p["test_families"], p["instances"], p["dim"])
    return _specs([s for s in name.split(",") if s.strip()], None, None, None)


def train_config(cfg: dict, checkpoint: Optional[str]) -> TrainConfig:
    d, t = cfg["dqn"], cfg["train"]
    try:
        return TrainConfig(
            train_set=tuple(suite(cfg, "train")), max_epochs=int(t["epochs"]),
            budget=int(t["budget"]), n0=cfg["cobra"].get("n0"), batch=int(d["batch"]),
            gamma=float(d["gamma"]), lr=float(d["lr"]), train_interval=int(d["train_interval"]),
            target_sync_interval=int(d["target_sync_interval"]),
            buffer_capacity=int(d["buffer_capacity"]), eps_start=float(d["eps_start"]),
            eps_decay=float(d["eps_decay"]), eps_floor=float(d["eps_floor"]),
            feature_extractor=bool(d["feature_extractor"]), seed=int(t["seed"]),
            fresh_designs=bool(t["fresh_designs"]),
            checkpoint=checkpoint, cobra=cobra_config(cfg),
        ).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_policy(path: str):
    if not os.path.isfile(path):
        raise UsageError(f"policy checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def _selectors(names: List[str], policy: Optional[str]):
    net = _load_policy(policy) if policy and any(n.strip() == "learned" for n in names) else None
    try:
        return [bench.parse_selector(n, net) for n in names]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    override(cfg, "train", "seed", args.seed)
    override(cfg, "train", "epochs", args.epochs)
    override(cfg, "train", "budget", args.budget)
    override(cfg, "dqn", "batch", args.batch)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "policy.json")
    tcfg = train_config(cfg, ckpt)
    write_snapshot(cfg, args.out)
    epochs_csv = os.path.join(args.out, "epochs.csv")
    net, reports = train_policy(tcfg, epochs_csv)
    write_epochs_csv(reports, epochs_csv)
    save_checkpoint(net, net.meta, ckpt)
    for r in reports:
        print(f"epoch={r.epoch} return={r.total_return:g} epsilon={r.epsilon:.4f}")
    print(f"checkpoint={ckpt}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if (args.policy is None) == (args.baseline is None):
        raise UsageError("give exactly one of --policy or --baseline")
    if args.policy is not None:
        selector = bench.LearnedSelector(_load_policy(args.policy))
    else:
        selector = _selectors([args.baseline], None)[0]
    try:
        spec = ProblemSpec.parse(args.problem)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    budget = args.budget if args.budget is not None else int(cfg["train"]["budget"])
    problem = make_problem(spec)
    n0 = cfg["cobra"].get("n0")
    if budget <= (default_n0(spec.dim, budget) if n0 is None else n0):
        raise UsageError(f"budget {budget} leaves no optimization steps")
    try:
        cobra = cobra_config(cfg).resolve(problem)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    trace = run_cobra(problem, selector, budget, cobra, args.seed, n0)
    if args.trace:
        out_dir = os.path.dirname(os.path.abspath(args.trace))
        os.makedirs(out_dir, exist_ok=True)
        trace.write_csv(args.trace)
        cfg["run"] = {"problem": str(spec), "budget": budget, "seed": args.seed,
                      "selector": selector.name if args.policy is None else args.policy}
        write_snapshot(cfg, out_dir, os.path.splitext(os.path.basename(args.trace))[0] + ".config.toml")
    best = trace.best_feasible_f
    value = bench.trace_ri(trace)
    print(f"best_f={'none' if best is None else repr(best)} feasible={best is not None} "
          f"RI={'none' if value is None else repr(value)} fes={trace.final_fes} "
          f"steps={len(trace.steps)}")
    return 0


def _split_list(text: Optional[str]):
    if text is None:
        return None
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    b = cfg["bench"]
    override(cfg, "bench", "suite", args.suite)
    override(cfg, "bench", "algos", _split_list(args.algos))
    if args.budgets is not None:
        try:
            b["budgets"] = [int(v) for v in _split_list(args.budgets)]
        except ValueError as exc:
            raise UsageError(f"bad --budgets: {exc}") from exc
    override(cfg, "bench", "repeats", args.repeats)
    override(cfg, "bench", "seed", args.seed)
    override(cfg, "problem", "dim", args.dim)
    if not b["algos"]:
        raise UsageError("empty algorithm list")
    if not b["budgets"] or b["repeats"] < 1:
        raise UsageError("need at least one budget and one repeat")
    if "learned" in b["algos"] and not args.policy:
        raise UsageError("the learned algorithm needs --policy")
    specs = suite(cfg, b["suite"])
    if not specs:
        raise UsageError("empty problem suite")
    selectors = _selectors(b["algos"], args.policy)
    if args.policy:
        cfg["bench"]["policy"] = os.path.abspath(args.policy)
    write_snapshot(cfg, args.out)
    trace_dir = os.path.join(args.out, "traces")
    os.makedirs(trace_dir, exist_ok=True)
    results = bench.run_grid(specs, selectors, b["budgets"], int(b["repeats"]), int(b["seed"]),
                             cobra_config(cfg), cfg["cobra"].get("n0"), trace_dir)
    table = bench.write_reports(results, args.out)
    sys.stdout.write(bench.render_table(table))
    return 0


def cmd_report(args) -> int:
    runs_path = os.path.join(args.runs, "runs.csv")
    if not os.path.isfile(runs_path):
        raise UsageError(f"no runs.csv in {args.runs}")
    results = bench.read_runs_csv(runs_path)
    traces = {}
    for r in results:
        path = os.path.join(args.runs, "traces", bench.trace_filename(r.problem, r.budget,
                                                                       r.algorithm, r.repeat))
        if os.path.isfile(path):
            traces.setdefault(r.algorithm, []).append([row["action"] for row in read_trace_csv(path)])
    table = bench.write_reports(results, args.runs, traces)
    sys.stdout.write(bench.render_table(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cobrapp", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a selection policy")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--out", default="results/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="one optimization run")
    p.add_argument("--config")
    p.add_argument("--policy")
    p.add_argument("--baseline")
    p.add_argument("--problem", required=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="benchmark grid with reports")
    p.add_argument("--config")
    p.add_argument("--suite", help="train, test, or comma-separated problem specs")
    p.add_argument("--algos", help="comma-separated: learned, random, fixed:K, greedy-error")
    p.add_argument("--budgets", help="comma-separated budgets")
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--policy")
    p.add_argument("--out", default="results/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="re-aggregate a bench directory")
    p.add_argument("--runs", required=True, help="bench output directory")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
