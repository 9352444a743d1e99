# bench_cli.py
# Evaluation harness and command-line entry point.
#
# Run: python3 bench_cli.py <subcommand> --domain {sr,lm,grs,sv} [options]
#
#   solve         Partition Refinement Search, optional snapshot CSV
#   evaluate      Monte-Carlo cost and goal rate of one parameter vector
#   oracle        exact partitions of a small-horizon strategy tree (CSV)
#   heatmap       mean cost over a grid of a two-parameter domain (CSV)
#   baseline      RCompliant: uniformly drawn parameter vectors
#   filter-check  Spaceship Repair posteriors against the closed form
#
# Evaluations use common random numbers: episode i of seed s always draws
# from np.random.default_rng([s, i]), so policies compared under one seed
# face the same initial states and the same noise. With --workers N the
# episodes (or heatmap cells, or baseline trials) run in N processes and the
# numbers do not change.
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, IO, List, Optional, Sequence, Tuple
import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np
from tqdm.auto import tqdm

import bsq_preference as bp
import domains
import gpomdp_core as gc
import interval_algebra as ia
import prs_solver as prs
import strategy_oracle as so

logger = logging.getLogger(__name__)


def _positive_env_int(name: str, default: int) -> int:
    try:
        return max(1, int(os.getenv(name, str(default))))
    except ValueError:
        return default


def _positive_env_float(name: str, default: float) -> float:
    try:
        value = float(os.getenv(name, str(default)))
    except ValueError:
        return default
    return value if value > 0 else default


EVAL_RUNS = _positive_env_int("BSQ_EVAL_RUNS", 2000)
EVAL_WORKERS = _positive_env_int("BSQ_EVAL_WORKERS", 8)
HEATMAP_STEP = _positive_env_float("BSQ_HEATMAP_STEP", 0.02)
HEATMAP_RUNS = 300
EPISODE_BLOCKS = 4  # episode blocks per worker
FILTER_TOLERANCE = 1e-9


@dataclass(frozen=True)
class EvalReport:
    theta: Tuple[float, ...]
    runs: int
    mean_cost: float
    stdev: float
    goal_rate: float
    goal_stderr: float
    seed: int
    horizon: int

    @property
    def cost_stderr(self) -> float:
        return self.stdev / math.sqrt(self.runs)

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["theta"] = list(self.theta)
        doc["cost_stderr"] = self.cost_stderr
        return doc


@dataclass(frozen=True)
class AggregateReport:
    """Mean ± standard deviation across trials."""

    trials: int
    mean_cost: float
    mean_cost_std: float
    goal_rate: float
    goal_rate_std: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class HeatmapGrid:
    names: Tuple[str, str]
    step: float
    horizon: int
    runs: int
    seed: int
    cells: List[Tuple[float, float, float, float]] = field(default_factory=list)  # t1, t2, cost, goal


def _progress(progress: bool, total: int, desc: str):
    return tqdm(total=total, desc=desc, disable=not progress, leave=False, dynamic_ncols=True)


def _fan_out(fn: Callable[..., Any], jobs: Sequence[Tuple[Any, ...]], workers: int,
             progress: bool, desc: str) -> List[Any]:
    """``fn(*job)`` for every job, returned in job order.

    With ``workers > 1`` the jobs run in a process pool; results do not depend
    on which process ran them.
    """
    if workers < 1:
        raise ValueError(f"workers must be at least 1, got {workers}")
    results: List[Any] = [None] * len(jobs)
    with _progress(progress, len(jobs), desc) as bar:
        if workers == 1 or len(jobs) <= 1:
            for k, job in enumerate(jobs):
                results[k] = fn(*job)
                bar.update()
            return results
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as executor:
            futures = {executor.submit(fn, *job): k for k, job in enumerate(jobs)}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
                bar.update()
    return results


def _episodes(model: gc.GPomdp, pref: bp.BsqPreference, theta: Tuple[float, ...], horizon: int,
              seed: int, start: int, stop: int, bar: Any = None) -> Tuple[np.ndarray, np.ndarray]:
    """Costs and goal flags of episodes ``start..stop-1`` under ``seed``."""
    policy = pref.policy(theta)
    costs = np.empty(stop - start)
    goals = np.empty(stop - start)
    for k, i in enumerate(range(start, stop)):
        record = gc.rollout(model, policy, horizon, np.random.default_rng([seed, i]))
        costs[k] = record.cost
        goals[k] = record.reached_goal
        if bar is not None:
            bar.update()
    return costs, goals


def evaluate_policy(model: gc.GPomdp, pref: bp.BsqPreference, theta: Sequence[float],
                    horizon: int, runs: int = EVAL_RUNS, seed: int = 0,
                    progress: bool = False, workers: int = 1) -> EvalReport:
    if runs < 1:
        raise ValueError(f"runs must be at least 1, got {runs}")
    theta = pref.policy(theta).theta
    if workers == 1:
        with _progress(progress, runs, "evaluate") as bar:
            costs, goals = _episodes(model, pref, theta, horizon, seed, 0, runs, bar)
    else:
        bounds = np.linspace(0, runs, min(runs, EPISODE_BLOCKS * workers) + 1).astype(int)
        jobs = [(model, pref, theta, horizon, seed, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        blocks = _fan_out(_episodes, jobs, workers, progress, "evaluate")
        costs = np.concatenate([c for c, _ in blocks])
        goals = np.concatenate([g for _, g in blocks])
    goal_rate = float(goals.mean())
    return EvalReport(
        theta=theta,
        runs=runs,
        mean_cost=float(costs.mean()),
        stdev=float(costs.std(ddof=1)) if runs > 1 else 0.0,
        goal_rate=goal_rate,
        goal_stderr=math.sqrt(goal_rate * (1.0 - goal_rate) / runs),
        seed=seed,
        horizon=horizon,
    )


def rcompliant_baseline(model: gc.GPomdp, pref: bp.BsqPreference, horizon: int,
                        trials: int = 10, runs: int = EVAL_RUNS, seed: int = 0,
                        progress: bool = False, workers: int = 1) -> List[EvalReport]:
    """Evaluate ``trials`` parameter vectors drawn uniformly from the domain box.

    Every trial reuses the episode set of ``seed``.
    """
    rng = np.random.default_rng(seed)
    full = pref.space.full()
    thetas = [ia.sample_uniform(full, rng) for _ in range(trials)]
    jobs = [(model, pref, theta, horizon, runs, seed) for theta in thetas]
    return _fan_out(evaluate_policy, jobs, workers, progress, "baseline")


def aggregate_reports(reports: Sequence[EvalReport]) -> AggregateReport:
    if not reports:
        raise ValueError("nothing to aggregate")
    costs = np.array([r.mean_cost for r in reports])
    goals = np.array([r.goal_rate for r in reports])
    ddof = 1 if len(reports) > 1 else 0
    return AggregateReport(
        trials=len(reports),
        mean_cost=float(costs.mean()),
        mean_cost_std=float(costs.std(ddof=ddof)),
        goal_rate=float(goals.mean()),
        goal_rate_std=float(goals.std(ddof=ddof)),
    )


def grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    """lo..hi inclusive in increments of ``step``."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    count = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(count), 12).clip(lo, hi)


def _heat_cell(model: gc.GPomdp, pref: bp.BsqPreference, x: float, y: float, horizon: int,
               runs: int, seed: int) -> Tuple[float, float, float, float]:
    rep = evaluate_policy(model, pref, (x, y), horizon, runs, seed)
    return float(x), float(y), rep.mean_cost, rep.goal_rate


def heatmap_sweep(model: gc.GPomdp, pref: bp.BsqPreference, horizon: int,
                  step: float = HEATMAP_STEP, runs_per_cell: int = HEATMAP_RUNS,
                  seed: int = 0, progress: bool = False, workers: int = 1) -> HeatmapGrid:
    if pref.n_params != 2:
        raise ValueError(f"heatmaps need a two-parameter preference, {pref.name} has {pref.n_params}")
    (n1, lo1, hi1), (n2, lo2, hi2) = pref.space.dims
    xs, ys = grid_axis(lo1, hi1, step), grid_axis(lo2, hi2, step)
    grid = HeatmapGrid((n1, n2), step, horizon, runs_per_cell, seed)
    jobs = [(model, pref, float(x), float(y), horizon, runs_per_cell, seed) for x in xs for y in ys]
    grid.cells.extend(_fan_out(_heat_cell, jobs, workers, progress, "heatmap"))
    return grid


# --------------------------------------------------------------------------- #
# CSV / JSON writers
# --------------------------------------------------------------------------- #
def write_eval_csv(reports: Sequence[EvalReport], names: Sequence[str], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(list(names) + ["mean_cost", "stdev", "goal_rate", "runs", "seed"])
    for r in reports:
        writer.writerow([repr(t) for t in r.theta] + [
            repr(r.mean_cost), repr(r.stdev), repr(r.goal_rate), r.runs, r.seed,
        ])


def write_heatmap_csv(grid: HeatmapGrid, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow([grid.names[0], grid.names[1], "mean_cost", "goal_rate"])
    for x, y, cost, goal in grid.cells:
        writer.writerow([repr(x), repr(y), repr(cost), repr(goal)])


def _open_out(path: Optional[str]):
    if path in (None, "-"):
        return _Stdout()
    return open(path, "w", encoding="utf-8", newline="")


class _Stdout:
    def __enter__(self) -> IO[str]:
        return sys.stdout

    def __exit__(self, *exc: Any) -> None:
        sys.stdout.flush()


def _emit(path: Optional[str], writer, *args: Any) -> None:
    with _open_out(path) as fh:
        writer(*args, fh)
    if path not in (None, "-"):
        print(f"wrote {path}")


def _write_json(path: str, doc: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    print(f"wrote {path}")


# --------------------------------------------------------------------------- #
# Command line
# --------------------------------------------------------------------------- #
def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--domain", required=True, help="sr, lm, grs, sv or a long domain name")
    parser.add_argument("--config", help="domain config JSON (defaults to domain_files/<domain>.json)")
    parser.add_argument("--pref", help="preference DSL file (defaults to domain_files/<domain>.bsq)")
    parser.add_argument("--horizon", type=int, help="override the config horizon")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument("--quiet", "-q", action="store_true", help="no progress bars")


def _workers(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workers", type=int, default=EVAL_WORKERS,
                        help="evaluation processes (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench_cli", description="BSQ preference solver benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run Partition Refinement Search")
    _common(p)
    p.add_argument("--selector", default="epsilon_greedy",
                   help=f"one of {', '.join(prs.SELECTORS)} (short forms accepted)")
    p.add_argument("--iters", type=int, help="iteration budget")
    p.add_argument("--seconds", type=float, help="wall-clock budget")
    p.add_argument("--workers", type=int, default=prs.DEFAULT_WORKERS)
    p.add_argument("--e0", type=float, default=0.3)
    p.add_argument("--e-min", type=float, default=0.01)
    p.add_argument("--min-samples", type=int, default=5)
    p.add_argument("--snapshot-period", type=float, default=prs.SNAPSHOT_SECONDS)
    p.add_argument("--snapshot-csv", help="write snapshot history here")
    p.add_argument("--solver-config", help="solver settings JSON; flags given explicitly win")
    p.add_argument("--boltzmann-paper-sign", "--boltzmann-inverted-sign", dest="boltzmann_inverted_sign",
                   action="store_true",
                   help="weight partitions by exp(+mean/e_r) instead of exp(-mean/e_r)")
    p.add_argument("--eval-runs", type=int, default=0,
                   help="evaluate a point of the returned partition with this many runs")
    p.add_argument("--json", help="write the result summary as JSON")

    p = sub.add_parser("evaluate", help="Monte-Carlo evaluation of one parameter vector")
    _common(p)
    p.add_argument("--theta", type=float, nargs="+", required=True)
    p.add_argument("--runs", type=int, default=EVAL_RUNS)
    _workers(p)
    p.add_argument("--csv", help="eval CSV path")
    p.add_argument("--json", help="report JSON path")

    p = sub.add_parser("oracle", help="exact partitions of the strategy tree")
    _common(p)
    p.add_argument("--csv", help="partitions CSV path (stdout if omitted)")
    p.add_argument("--node-budget", type=int, default=so.NODE_BUDGET)
    p.add_argument("--unpruned", action="store_true", help="also build the unpruned tree and report pruning")

    p = sub.add_parser("heatmap", help="mean cost over a parameter grid")
    _common(p)
    p.add_argument("--step", type=float, default=HEATMAP_STEP)
    p.add_argument("--runs", type=int, default=HEATMAP_RUNS, help="rollouts per cell")
    _workers(p)
    p.add_argument("--csv", help="heatmap CSV path (stdout if omitted)")

    p = sub.add_parser("baseline", help="RCompliant baseline")
    _common(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--runs", type=int, default=EVAL_RUNS)
    _workers(p)
    p.add_argument("--csv", help="per-trial eval CSV path")
    p.add_argument("--json", help="per-trial and aggregate JSON path")

    p = sub.add_parser("filter-check", help="compare filtering with the closed form")
    _common(p)
    p.add_argument("--max-len", type=int, default=10)
    return parser


def _solver_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> prs.SolverConfig:
    doc: Dict[str, Any] = {}
    if args.solver_config:
        with open(args.solver_config, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise prs.SolverConfigError(f"{args.solver_config}: expected a JSON object")
    flags = {
        "selector": ("selector", args.selector),
        "iterations": ("iters", args.iters),
        "seconds": ("seconds", args.seconds),
        "workers": ("workers", args.workers),
        "e0": ("e0", args.e0),
        "e_min": ("e_min", args.e_min),
        "min_samples": ("min_samples", args.min_samples),
        "snapshot_period": ("snapshot_period", args.snapshot_period),
        "seed": ("seed", args.seed),
    }
    for key, (dest, value) in flags.items():
        if value is not None and (key not in doc or value != parser.get_default(dest)):
            doc[key] = value
    if args.boltzmann_inverted_sign:
        doc["inverted_sign"] = True
    return prs.SolverConfig.from_dict(doc)


def _cmd_solve(args, model, pref, horizon, parser) -> int:
    cfg = _solver_config(args, parser)
    result = prs.prs_solve(model, pref, horizon, cfg)
    best = result.best
    print(f"best partition: {best.interval.dump(' u ')}")
    print(f"mean cost {best.mean:.4f} over {best.count} samples, goal rate {best.goal_rate:.3f}")
    print(f"{len(result.partitions)} partitions, {result.total_samples} samples, {result.workers} worker(s)")
    summary: Dict[str, Any] = {
        "domain": model.name, "horizon": horizon, "selector": cfg.selector, "seed": cfg.seed,
        "best_interval": best.interval.dump(" u "), "best_mean_cost": best.mean,
        "best_goal_rate": best.goal_rate, "best_samples": best.count,
        "partitions": len(result.partitions), "total_samples": result.total_samples,
    }
    if args.eval_runs > 0:
        theta = ia.sample_uniform(best.interval, np.random.default_rng(cfg.seed))
        report = evaluate_policy(model, pref, theta, horizon, args.eval_runs, cfg.seed,
                                 progress=not args.quiet, workers=cfg.workers)
        print(f"evaluation at {_fmt_theta(theta)}: cost {report.mean_cost:.4f} ± "
              f"{report.cost_stderr:.4f}, goal rate {report.goal_rate:.4f} ± {report.goal_stderr:.4f}")
        summary["evaluation"] = report.to_dict()
    if args.snapshot_csv:
        _emit(args.snapshot_csv, prs.write_snapshots_csv, result.history)
    if args.json:
        _write_json(args.json, summary)
    return 0


def _fmt_theta(theta: Sequence[float]) -> str:
    return "(" + ", ".join(f"{t:.4f}" for t in theta) + ")"


def _cmd_evaluate(args, model, pref, horizon, parser) -> int:
    if len(args.theta) != pref.n_params:
        parser.error(f"--theta needs {pref.n_params} values for {pref.name}")
    report = evaluate_policy(model, pref, args.theta, horizon, args.runs, args.seed,
                             progress=not args.quiet, workers=args.workers)
    print(f"{pref.name} at {_fmt_theta(report.theta)}: cost {report.mean_cost:.4f} ± "
          f"{report.cost_stderr:.4f}, goal rate {report.goal_rate:.4f} ± {report.goal_stderr:.4f} "
          f"({report.runs} runs, H={horizon})")
    if args.csv:
        _emit(args.csv, write_eval_csv, [report], pref.space.names)
    if args.json:
        _write_json(args.json, report.to_dict())
    return 0


def _cmd_oracle(args, model, pref, horizon, parser) -> int:
    tree = so.build_tree(model, pref, horizon, node_budget=args.node_budget)
    parts = so.enumerate_braids(tree)
    stats = tree.stats
    print(f"tree: {stats.belief_nodes} belief nodes, {stats.action_nodes} action nodes, "
          f"{stats.leaves} leaves, {len(parts)} partitions", file=sys.stderr)
    if args.unpruned:
        full = so.build_tree(model, pref, horizon, prune=False, node_budget=args.node_budget)
        print(f"unpruned leaves {full.stats.leaves}, pruned fraction "
              f"{so.pruned_fraction(tree, full):.4f}", file=sys.stderr)
    try:
        best = so.oracle_optimum(parts)
        print(f"optimum: {best.interval.dump(' u ')} cost {best.expected_cost:.6f} "
              f"goal {best.goal_probability:.6f}", file=sys.stderr)
    except so.NoSolutionError as exc:
        print(f"optimum: none ({exc})", file=sys.stderr)
    _emit(args.csv, so.write_partitions_csv, parts)
    return 0


def _cmd_heatmap(args, model, pref, horizon, parser) -> int:
    grid = heatmap_sweep(model, pref, horizon, args.step, args.runs, args.seed,
                         progress=not args.quiet, workers=args.workers)
    _emit(args.csv, write_heatmap_csv, grid)
    return 0


def _cmd_baseline(args, model, pref, horizon, parser) -> int:
    reports = rcompliant_baseline(model, pref, horizon, args.trials, args.runs, args.seed,
                                  progress=not args.quiet, workers=args.workers)
    agg = aggregate_reports(reports)
    print(f"RCompliant over {agg.trials} trials: cost {agg.mean_cost:.4f} ± {agg.mean_cost_std:.4f}, "
          f"goal rate {agg.goal_rate:.4f} ± {agg.goal_rate_std:.4f}")
    if args.csv:
        _emit(args.csv, write_eval_csv, reports, pref.space.names)
    if args.json:
        _write_json(args.json, {"trials": [r.to_dict() for r in reports], "aggregate": agg.to_dict()})
    return 0


def _cmd_filter_check(args, model, pref, horizon, parser) -> int:
    if model.name != "spaceship_repair":
        parser.error("filter-check only applies to the spaceship_repair domain")
    check = domains.sr_filter_check(model, args.cfg, args.max_len)
    print(f"{check.sequences} observation sequences up to length {args.max_len}: "
          f"max deviation robot {check.max_dev_robot:.3g}, ship {check.max_dev_ship:.3g}")
    if check.max_deviation >= FILTER_TOLERANCE:
        print(f"error: deviation exceeds {FILTER_TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "solve": _cmd_solve,
    "evaluate": _cmd_evaluate,
    "oracle": _cmd_oracle,
    "heatmap": _cmd_heatmap,
    "baseline": _cmd_baseline,
    "filter-check": _cmd_filter_check,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        model, pref, cfg = domains.load_domain(args.domain, args.config, args.pref, args.horizon)
        args.cfg = cfg
        return COMMANDS[args.command](args, model, pref, model.horizon, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(cli_main())
