# prs_solver.py
# Partition Refinement Search over a preference's parameter domain.
#
# The live pool of partitions always tiles the domain. Each iteration picks a
# partition, draws a parameter vector inside it, rolls the policy out once and
# cuts the partition along the rollout's leaf interval: the part inside keeps
# the old statistics plus the new cost, the part outside carries a copy of the
# old statistics. The hypothesised optimum is the argmin of the live means,
# preferring partitions that reached the goal at least once.
#
# With more than one worker the pool is sharded after a warm-up phase; each
# worker owns its shard and publishes its best partition into a Manager-held
# incumbent guarded by a Lock. Only the tiling and non-emptiness invariants
# are guaranteed across workers, not run-to-run identical output.
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import Manager
from typing import IO, Any, Callable, Dict, List, Optional, Sequence, Tuple
import csv
import logging
import math
import os
import time

import numpy as np
from scipy.special import softmax

import bsq_preference as bp
import gpomdp_core as gc
import interval_algebra as ia

logger = logging.getLogger(__name__)

SELECTORS = ("epsilon_greedy", "boltzmann", "local_thompson", "max_confidence", "global_thompson")
SELECTOR_ALIASES = {
    "epsilon": "epsilon_greedy",
    "greedy": "epsilon_greedy",
    "softmax": "boltzmann",
    "thompson": "local_thompson",
    "local": "local_thompson",
    "global": "global_thompson",
    "confidence": "max_confidence",
}
SNAPSHOT_COLUMNS = [
    "elapsed_s", "best_mean_cost", "best_goal_rate", "n_partitions", "total_samples", "best_interval",
]
DEFAULT_ITERATIONS = 100_000
# Snapshots per run in iteration-budget mode.
SNAPSHOTS_PER_RUN = 120


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


DEFAULT_WORKERS = _positive_env_int("BSQ_PRS_WORKERS", 8)
SNAPSHOT_SECONDS = _positive_env_float("BSQ_PRS_SNAPSHOT_SECONDS", 12.5)
DEBUG_CHECKS = os.getenv("BSQ_PRS_DEBUG", "").strip().lower() in ("1", "true", "yes", "on")


class RefinementError(ValueError):
    """A leaf interval missed the partition whose sample produced it."""


class InvariantError(ValueError):
    """The live pool stopped tiling the domain, or a sample escaped its leaf."""


class SolverConfigError(ValueError):
    """Solver settings are inconsistent or the budget is empty."""


# --------------------------------------------------------------------------- #
# Statistics and partitions
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class RunningStats:
    """Welford aggregate of observed costs."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, value: float) -> "RunningStats":
        count = self.count + 1
        delta = value - self.mean
        mean = self.mean + delta / count
        return RunningStats(count, mean, self.m2 + delta * (value - mean))

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def stdev(self) -> float:
        return math.sqrt(max(self.variance, 0.0))


@dataclass(frozen=True)
class Partition:
    interval: ia.IntervalSet
    stats: RunningStats = RunningStats()
    goal_count: int = 0

    @property
    def count(self) -> int:
        return self.stats.count

    @property
    def mean(self) -> float:
        return self.stats.mean if self.stats.count else math.inf

    @property
    def goal_rate(self) -> float:
        return self.goal_count / self.stats.count if self.stats.count else 0.0

    @property
    def is_solution(self) -> bool:
        return self.goal_count > 0

    def rank_key(self) -> Tuple:
        return (not self.is_solution, self.mean, self.interval.sort_key())


def refine(part: Partition, leaf: ia.IntervalSet, cost: float,
           reached_goal: bool) -> Tuple[Partition, Optional[Partition]]:
    kept = ia.intersect(part.interval, leaf)
    if kept.is_empty:
        raise RefinementError(f"leaf interval {leaf} is disjoint from partition {part.interval}")
    rest = ia.subtract(part.interval, leaf)
    inside = Partition(kept, part.stats.push(float(cost)), part.goal_count + int(bool(reached_goal)))
    outside = None if rest.is_empty else Partition(rest, part.stats, part.goal_count)
    return inside, outside


class PartitionPool:
    """Live partitions with their statistics mirrored into numpy arrays."""

    def __init__(self, parts: Sequence[Partition] = ()):
        self.parts: List[Partition] = []
        self._cap = 0
        self._grow(max(16, len(parts)))
        for p in parts:
            self.append(p)

    _ARRAYS = (("means", math.inf, float), ("stdevs", 0.0, float),
               ("counts", 0, np.int64), ("solution", False, bool))

    def _grow(self, cap: int) -> None:
        n = len(self.parts)
        for name, fill, dtype in self._ARRAYS:
            arr = np.full(cap, fill, dtype=dtype)
            if n:
                arr[:n] = getattr(self, name)[:n]
            setattr(self, name, arr)
        self._cap = cap

    def _mirror(self, i: int, part: Partition) -> None:
        self.means[i] = part.mean
        self.stdevs[i] = part.stats.stdev
        self.counts[i] = part.count
        self.solution[i] = part.is_solution

    def append(self, part: Partition) -> None:
        if len(self.parts) == self._cap:
            self._grow(2 * self._cap)
        self.parts.append(part)
        self._mirror(len(self.parts) - 1, part)

    def set(self, i: int, part: Partition) -> None:
        self.parts[i] = part
        self._mirror(i, part)

    def __len__(self) -> int:
        return len(self.parts)

    def __getitem__(self, i: int) -> Partition:
        return self.parts[i]

    def view(self, name: str) -> np.ndarray:
        return getattr(self, name)[:len(self.parts)]

    def canonical_min(self, candidates: np.ndarray) -> int:
        if len(candidates) == 1:
            return int(candidates[0])
        return int(min(candidates, key=lambda i: self.parts[i].interval.sort_key()))

    def argmin(self, values: np.ndarray) -> int:
        return self.canonical_min(np.flatnonzero(values == values.min()))

    def best_index(self) -> int:
        """X_opt: solutions before non-solutions, then lowest mean."""
        solution = self.view("solution")
        pool = np.flatnonzero(solution) if solution.any() else np.arange(len(self.parts))
        means = self.view("means")[pool]
        return self.canonical_min(pool[means == means.min()])


# --------------------------------------------------------------------------- #
# Selection
# --------------------------------------------------------------------------- #
def exploration_rate(elapsed_fraction: float, cfg: "SolverConfig") -> float:
    frac = min(max(float(elapsed_fraction), 0.0), 1.0)
    return max(cfg.e_min, cfg.e0 * (1.0 - frac))


def boltzmann_weights(means: np.ndarray, e_r: float, inverted_sign: bool = False) -> np.ndarray:
    """Selection probabilities proportional to exp(-mean / e_r).

    ``inverted_sign`` uses exp(+mean / e_r), which favours costly partitions.
    """
    sign = 1.0 if inverted_sign else -1.0
    return softmax(sign * np.asarray(means, dtype=float) / e_r)


def select_partition(pool: Any, selector: str, e_r: float, global_best: float,
                     rng: np.random.Generator, min_samples: int = 5,
                     inverted_sign: bool = False) -> List[int]:
    """Indices of the partitions to sample next (one, except for global_thompson)."""
    if not isinstance(pool, PartitionPool):
        pool = PartitionPool(pool)
    n = len(pool)
    if n == 0:
        raise ValueError("cannot select from an empty pool")
    selector = SELECTOR_ALIASES.get(selector, selector)
    counts = pool.view("counts")
    starving = np.flatnonzero(counts < min_samples)
    if selector == "global_thompson":
        draws = _thompson_draws(pool, e_r, rng)
        chosen = set(np.flatnonzero(draws < global_best).tolist()) | set(starving.tolist())
        if not chosen:
            return [pool.argmin(draws)]
        return sorted(chosen)
    if len(starving):
        return [int(starving[rng.integers(len(starving))])]
    means = pool.view("means")
    if selector == "epsilon_greedy":
        if rng.random() < e_r:
            return [int(rng.integers(n))]
        return [pool.best_index()]
    if selector == "boltzmann":
        return [int(rng.choice(n, p=boltzmann_weights(means, e_r, inverted_sign)))]
    if selector == "local_thompson":
        return [pool.argmin(_thompson_draws(pool, e_r, rng))]
    if selector == "max_confidence":
        if rng.random() < e_r:
            return [int(rng.integers(n))]
        return [pool.argmin(-pool.view("stdevs"))]
    raise SolverConfigError(f"unknown selector {selector!r}")


def _thompson_draws(pool: PartitionPool, e_r: float, rng: np.random.Generator) -> np.ndarray:
    means = pool.view("means")
    sampled = np.isfinite(means)
    # Unsampled partitions draw -inf so they always win.
    draws = np.full(len(means), -np.inf)
    draws[sampled] = rng.normal(means[sampled], pool.view("stdevs")[sampled] * e_r)
    return draws


# --------------------------------------------------------------------------- #
# Configuration and results
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class SolverConfig:
    selector: str = "epsilon_greedy"
    iterations: Optional[int] = None
    seconds: Optional[float] = None
    e0: float = 0.3
    e_min: float = 0.01
    min_samples: int = 5
    workers: int = DEFAULT_WORKERS
    seed: int = 0
    snapshot_period: float = SNAPSHOT_SECONDS
    inverted_sign: bool = False
    debug: bool = DEBUG_CHECKS

    def __post_init__(self) -> None:
        selector = SELECTOR_ALIASES.get(self.selector, self.selector)
        if selector not in SELECTORS:
            raise SolverConfigError(f"unknown selector {self.selector!r} (choose from {', '.join(SELECTORS)})")
        object.__setattr__(self, "selector", selector)
        if self.iterations is None and self.seconds is None:
            object.__setattr__(self, "iterations", DEFAULT_ITERATIONS)
        if self.iterations is not None and int(self.iterations) <= 0:
            raise SolverConfigError("iteration budget must be positive")
        if self.seconds is not None and float(self.seconds) <= 0:
            raise SolverConfigError("time budget must be positive")
        if not self.e0 >= self.e_min > 0:
            raise SolverConfigError(f"need e0 >= e_min > 0, got e0={self.e0}, e_min={self.e_min}")
        if self.min_samples < 1:
            raise SolverConfigError("min_samples must be at least 1")
        if self.workers < 1:
            raise SolverConfigError("workers must be at least 1")
        if not self.snapshot_period > 0:
            raise SolverConfigError("snapshot_period must be positive")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "SolverConfig":
        doc = {k: v for k, v in doc.items() if not str(k).startswith("_")}
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise SolverConfigError(f"unknown solver keys {', '.join(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class Snapshot:
    elapsed_s: float
    best_mean_cost: float
    best_goal_rate: float
    n_partitions: int
    total_samples: int
    best_interval: str


@dataclass
class SolveResult:
    best: Partition
    history: List[Snapshot]
    total_samples: int
    partitions: Tuple[Partition, ...] = field(default=(), repr=False)
    workers: int = 1

    @property
    def best_partition(self) -> Partition:
        return self.best


def write_snapshots_csv(history: Sequence[Snapshot], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(SNAPSHOT_COLUMNS)
    for s in history:
        writer.writerow([
            f"{s.elapsed_s:.3f}", repr(s.best_mean_cost), repr(s.best_goal_rate),
            s.n_partitions, s.total_samples, s.best_interval,
        ])


# --------------------------------------------------------------------------- #
# Search loop
# --------------------------------------------------------------------------- #
class _Search:
    """One select/sample/refine loop over a pool it owns."""

    def __init__(self, model: gc.GPomdp, pref: bp.BsqPreference, horizon: int,
                 cfg: SolverConfig, pool: PartitionPool, rng: np.random.Generator):
        self.model = model
        self.pref = pref
        self.horizon = horizon
        self.cfg = cfg
        self.pool = pool
        self.rng = rng
        self.memo = bp.IntervalMemo(pref)
        self.samples = 0

    def sample(self, index: int) -> None:
        part = self.pool[index]
        theta = ia.sample_uniform(part.interval, self.rng)
        record = gc.rollout(self.model, self.pref.policy(theta), self.horizon, self.rng)
        leaf = bp.leaf_interval(self.pref, record.rule_trace(), self.memo)
        if not ia.contains(leaf, theta):
            raise InvariantError(f"sampled {theta} escaped its leaf interval {leaf}")
        kept, split = refine(part, leaf, record.cost, record.reached_goal)
        self.pool.set(index, kept)
        if split is not None:
            self.pool.append(split)
        self.samples += 1
        if self.cfg.debug:
            problem = ia.tiling_error([p.interval for p in self.pool.parts], self.pref.space)
            if problem is not None:
                raise InvariantError(f"partition pool stopped tiling: {problem}")

    def step(self, e_r: float, global_best: float, limit: int) -> int:
        """Select and sample; returns the number of rollouts spent (at most ``limit``)."""
        chosen = select_partition(self.pool, self.cfg.selector, e_r, global_best, self.rng,
                                  self.cfg.min_samples, self.cfg.inverted_sign)
        for index in chosen[:limit]:
            self.sample(index)
        return min(len(chosen), limit)

    def best(self) -> Partition:
        return self.pool[self.pool.best_index()]


def _check_inputs(model: gc.GPomdp, pref: bp.BsqPreference, horizon: int) -> None:
    if horizon < 1:
        raise SolverConfigError(f"horizon must be at least 1, got {horizon}")
    for rule in pref.rules:
        if rule.action not in model.actions:
            raise gc.InvalidActionError(
                f"preference {pref.name} uses action {rule.action!r} unknown to {model.name}"
            )


def _snapshot(elapsed: float, best: Partition, n_partitions: int, samples: int) -> Snapshot:
    return Snapshot(elapsed, best.mean, best.goal_rate, n_partitions, samples, best.interval.dump(" u "))


def _run_loop(search: _Search, cfg: SolverConfig, iterations: Optional[int],
              deadline: Optional[float], started: float,
              global_best: Callable[[], float],
              on_snapshot: Callable[[float], None]) -> None:
    """Drive ``search`` until its budget runs out, snapshotting on the way."""
    every = max(1, iterations // SNAPSHOTS_PER_RUN) if iterations is not None else None
    next_tick = every
    next_clock = started + cfg.snapshot_period
    ticks = 0
    done = 0
    while True:
        if iterations is not None and done >= iterations:
            break
        if deadline is not None and time.monotonic() >= deadline:
            break
        limit = iterations - done if iterations is not None else len(search.pool) + 1
        frac = done / iterations if iterations is not None else 0.0
        if deadline is not None:
            frac = max(frac, (time.monotonic() - started) / (deadline - started))
        best = global_best() if cfg.selector == "global_thompson" else math.inf
        done += search.step(exploration_rate(frac, cfg), best, limit)
        if deadline is None:
            # Iteration budget: a virtual clock keeps snapshots deterministic.
            while done >= next_tick:
                ticks += 1
                on_snapshot(ticks * cfg.snapshot_period)
                next_tick += every
        elif time.monotonic() >= next_clock:
            on_snapshot(time.monotonic() - started)
            next_clock += cfg.snapshot_period


def prs_solve(model: gc.GPomdp, pref: bp.BsqPreference, horizon: int,
              cfg: SolverConfig) -> SolveResult:
    _check_inputs(model, pref, horizon)
    if cfg.workers > 1:
        return _solve_parallel(model, pref, horizon, cfg)
    rng = np.random.default_rng(cfg.seed)
    search = _Search(model, pref, horizon, cfg, PartitionPool([Partition(pref.space.full())]), rng)
    history: List[Snapshot] = []
    started = time.monotonic()
    deadline = started + cfg.seconds if cfg.seconds is not None else None

    def on_snapshot(elapsed: float) -> None:
        snap = _snapshot(elapsed, search.best(), len(search.pool), search.samples)
        history.append(snap)
        logger.info("prs %s t=%.1fs best=%.4f goal=%.3f partitions=%d samples=%d",
                    model.name, elapsed, snap.best_mean_cost, snap.best_goal_rate,
                    snap.n_partitions, snap.total_samples)

    _run_loop(search, cfg, cfg.iterations, deadline, started, lambda: search.best().mean, on_snapshot)
    best = search.best()
    if not history or history[-1].total_samples != search.samples:
        elapsed = (time.monotonic() - started) if deadline is not None else \
            (len(history) + 1) * cfg.snapshot_period
        on_snapshot(elapsed)
    return SolveResult(best, history, search.samples, tuple(search.pool.parts), 1)


# --------------------------------------------------------------------------- #
# Manager-worker mode
# --------------------------------------------------------------------------- #
def _publish(shared: Any, lock: Any, worker: int, best: Partition) -> None:
    """Compare-and-exchange on the shared incumbent.

    A worker replaces the incumbent when its best ranks lower, or when the
    incumbent is its own earlier best whose statistics have since changed.
    """
    key = (not best.is_solution, best.mean)
    with lock:
        current = shared.get("key")
        if current is None or key < tuple(current) or shared.get("owner") == worker:
            shared.update({
                "key": key, "owner": worker, "mean": best.mean,
                "goal_rate": best.goal_rate, "interval": best.interval.dump(" u "),
            })


def _worker(model: gc.GPomdp, pref: bp.BsqPreference, horizon: int, cfg: SolverConfig,
            shard: List[Partition], worker: int, iterations: Optional[int],
            seconds: Optional[float], shared: Any, lock: Any) -> Tuple[List[Partition], int, List[Snapshot]]:
    rng = np.random.default_rng([cfg.seed, worker + 1])
    search = _Search(model, pref, horizon, cfg, PartitionPool(shard), rng)
    history: List[Snapshot] = []
    started = time.monotonic()
    deadline = started + seconds if seconds is not None else None

    def on_snapshot(elapsed: float) -> None:
        _publish(shared, lock, worker, search.best())
        with lock:
            shared[f"size{worker}"] = (len(search.pool), search.samples)
            state = dict(shared.items())
        if worker == 0:
            sizes = [v for k, v in state.items() if str(k).startswith("size")]
            history.append(Snapshot(
                elapsed, float(state["mean"]), float(state["goal_rate"]),
                sum(s[0] for s in sizes), sum(s[1] for s in sizes), state["interval"],
            ))

    def global_best() -> float:
        best = search.best()
        return min(best.mean, float(shared.get("mean", math.inf)))

    _run_loop(search, cfg, iterations, deadline, started, global_best, on_snapshot)
    _publish(shared, lock, worker, search.best())
    return search.pool.parts, search.samples, history


def _solve_parallel(model: gc.GPomdp, pref: bp.BsqPreference, horizon: int,
                    cfg: SolverConfig) -> SolveResult:
    # Warm-up: grow one pool until every worker can own at least one partition.
    rng = np.random.default_rng(cfg.seed)
    warm = _Search(model, pref, horizon, replace(cfg, workers=1),
                   PartitionPool([Partition(pref.space.full())]), rng)
    cap = cfg.iterations // 10 if cfg.iterations is not None else 10 * cfg.workers * cfg.min_samples
    while len(warm.pool) < cfg.workers and warm.samples < max(cap, 1):
        warm.step(cfg.e0, warm.best().mean, 1)
    order = sorted(range(len(warm.pool)), key=lambda i: warm.pool[i].interval.sort_key())
    workers = min(cfg.workers, len(order))
    shards: List[List[Partition]] = [[] for _ in range(workers)]
    for k, i in enumerate(order):
        shards[k % workers].append(warm.pool[i])
    left = None
    if cfg.iterations is not None:
        left = max(cfg.iterations - warm.samples, workers)
    logger.info("prs %s: %d workers after %d warm-up samples, %d partitions",
                model.name, workers, warm.samples, len(warm.pool))

    with Manager() as manager:
        shared = manager.dict()
        lock = manager.Lock()
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [
                executor.submit(
                    _worker, model, pref, horizon, cfg, shards[w], w,
                    None if left is None else left // workers + (w < left % workers),
                    cfg.seconds, shared, lock,
                )
                for w in range(workers)
            ]
            results = [f.result() for f in futures]

    merged = PartitionPool([p for parts, _, _ in results for p in parts])
    problem = ia.tiling_error([p.interval for p in merged.parts], pref.space)
    if problem is not None:
        raise InvariantError(f"merged worker pools do not tile the domain: {problem}")
    samples = warm.samples + sum(n for _, n, _ in results)
    best = merged[merged.best_index()]
    history = list(results[0][2])
    history.append(_snapshot(
        history[-1].elapsed_s + cfg.snapshot_period if history else cfg.snapshot_period,
        best, len(merged), samples,
    ))
    return SolveResult(best, history, samples, tuple(merged.parts), workers)
