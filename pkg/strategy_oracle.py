# strategy_oracle.py
# Exact small-horizon ground truth for a preference on a model.
#
# The strategy tree alternates belief nodes (one per rule/observation
# history) and rule branches. Every belief node carries two vectors:
#   * ``belief``: the agent's filtered belief, exactly what a rollout
#     computes, used to evaluate the rules;
#   * ``mass``: the unnormalised probability of reaching the node with the
#     true state still outside the goal, used for path probabilities.
# Observation edges are split on goal entry, so a goal-entry edge ends in a
# leaf costing the current depth while the non-goal part continues.
#
# Braids are enumerated by recursive interval splitting: at each belief node
# the incoming region is cut by the rule branches' effective intervals, and
# the observation children of a branch are refined against each other.
from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Iterable, List, Optional, Sequence, Tuple
import csv
import logging
import math
import os

import numpy as np

import bsq_preference as bp
import gpomdp_core as gc
import interval_algebra as ia

logger = logging.getLogger(__name__)


def _positive_env_int(name: str, default: int) -> int:
    try:
        return max(1, int(os.getenv(name, str(default))))
    except ValueError:
        return default


NODE_BUDGET = _positive_env_int("BSQ_ORACLE_NODE_BUDGET", 5_000_000)
PARTITION_COLUMNS = ["interval", "expected_cost", "goal_probability", "leaf_count"]


class NodeBudgetExceeded(ValueError):
    """The strategy tree outgrew the configured node budget."""


class NoSolutionError(ValueError):
    """No partition reaches the goal with positive probability."""


@dataclass(frozen=True)
class Leaf:
    path: Tuple[Tuple[int, str], ...]  # (rule index, observation) per step
    interval: ia.IntervalSet
    path_probability: float
    cost: int
    reached_goal: bool

    @property
    def key(self) -> Tuple:
        return (self.path, self.reached_goal)


@dataclass
class ObservationEdge:
    observation: str
    reached_goal: bool
    probability: float
    child: Optional["BeliefNode"] = None
    leaf: Optional[Leaf] = None


@dataclass
class RuleBranch:
    rule_index: int
    action: str
    effective: ia.IntervalSet  # the rule's effective interval at this belief
    interval: ia.IntervalSet  # ``effective`` cut by the path interval
    edges: List[ObservationEdge] = field(default_factory=list)


@dataclass
class BeliefNode:
    belief: gc.Belief
    mass: np.ndarray = field(repr=False)
    depth: int
    interval: ia.IntervalSet
    path: Tuple[Tuple[int, str], ...] = ()
    branches: List[RuleBranch] = field(default_factory=list)
    leaf: Optional[Leaf] = None


@dataclass
class TreeStats:
    belief_nodes: int = 0
    action_nodes: int = 0
    leaves: int = 0

    @property
    def nodes(self) -> int:
        return self.belief_nodes + self.action_nodes


@dataclass
class StrategyTree:
    model: gc.GPomdp
    pref: bp.BsqPreference
    horizon: int
    root: BeliefNode
    stats: TreeStats
    pruned: bool = True


@dataclass(frozen=True)
class ExactPartition:
    interval: ia.IntervalSet
    leaves: Tuple[Leaf, ...]
    expected_cost: float
    goal_probability: float

    @property
    def leaf_keys(self) -> frozenset:
        return frozenset(l.key for l in self.leaves)

    @property
    def total_probability(self) -> float:
        return math.fsum(l.path_probability for l in self.leaves)


def build_tree(model: gc.GPomdp, pref: bp.BsqPreference, horizon: int,
               prune: bool = True, node_budget: Optional[int] = None) -> StrategyTree:
    if horizon < 0:
        raise ValueError(f"horizon must be non-negative, got {horizon}")
    budget = NODE_BUDGET if node_budget is None else int(node_budget)
    memo = bp.IntervalMemo(pref)
    goal = model.goal_mask
    stats = TreeStats()

    def charge(kind: str) -> None:
        setattr(stats, kind, getattr(stats, kind) + 1)
        if stats.nodes > budget:
            raise NodeBudgetExceeded(
                f"strategy tree for {model.name} at H={horizon} exceeds {budget} nodes"
            )

    def grow(belief: gc.Belief, mass: np.ndarray, depth: int,
             interval: ia.IntervalSet, path: Tuple) -> BeliefNode:
        charge("belief_nodes")
        node = BeliefNode(belief, mass, depth, interval, path)
        if depth == horizon:
            node.leaf = Leaf(path, interval, float(mass.sum()), horizon, False)
            stats.leaves += 1
            return node
        for index, rule in enumerate(pref.rules):
            effective = memo.get(index, belief)
            region = ia.intersect(effective, interval)
            if prune and region.is_empty:
                continue
            charge("action_nodes")
            branch = RuleBranch(index, rule.action, effective, region)
            ai = model.action_index(rule.action)
            predicted = model._predict[ai] @ mass
            for oi, obs in enumerate(model.observations):
                joint = predicted * model.observation_table[ai, :, oi]
                step = path + ((index, obs),)
                reach = float(joint[goal].sum())
                rest = float(joint[~goal].sum())
                if reach > 0.0:
                    leaf = Leaf(step, region, reach, depth + 1, True)
                    branch.edges.append(ObservationEdge(obs, True, reach, leaf=leaf))
                    stats.leaves += 1
                if rest > 0.0:
                    child_belief = gc.belief_update(model, belief, rule.action, obs)
                    child = grow(child_belief, np.where(goal, 0.0, joint), depth + 1, region, step)
                    branch.edges.append(ObservationEdge(obs, False, rest, child=child))
            node.branches.append(branch)
        return node

    root = grow(model.initial_belief, np.array(model.initial_belief.probs), 0,
                pref.space.full(), ())
    logger.info(
        "strategy tree %s H=%d%s: %d belief nodes, %d action nodes, %d leaves",
        model.name, horizon, "" if prune else " (unpruned)",
        stats.belief_nodes, stats.action_nodes, stats.leaves,
    )
    return StrategyTree(model, pref, horizon, root, stats, prune)


def iter_leaves(tree: StrategyTree) -> Iterable[Leaf]:
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if node.leaf is not None:
            yield node.leaf
        for branch in node.branches:
            for edge in branch.edges:
                if edge.leaf is not None:
                    yield edge.leaf
                else:
                    stack.append(edge.child)


def pruned_fraction(pruned: StrategyTree, unpruned: StrategyTree) -> float:
    return 1.0 - pruned.stats.leaves / unpruned.stats.leaves


# --------------------------------------------------------------------------- #
# Braids
# --------------------------------------------------------------------------- #
def _cells(node: BeliefNode, region: ia.IntervalSet) -> List[Tuple[ia.IntervalSet, Tuple[Leaf, ...]]]:
    if node.leaf is not None:
        return [(region, (node.leaf,))]
    out = []
    for branch in node.branches:
        start = ia.intersect(region, branch.effective)
        if start.is_empty:
            continue
        cells: List[Tuple[ia.IntervalSet, Tuple[Leaf, ...]]] = [(start, ())]
        for edge in branch.edges:
            if edge.leaf is not None:
                cells = [(cell, leaves + (edge.leaf,)) for cell, leaves in cells]
            else:
                cells = [
                    (sub, leaves + more)
                    for cell, leaves in cells
                    for sub, more in _cells(edge.child, cell)
                ]
        out.extend(cells)
    return out


def _partition(interval: ia.IntervalSet, leaves: Tuple[Leaf, ...]) -> ExactPartition:
    cost = math.fsum(l.path_probability * l.cost for l in leaves)
    goal = math.fsum(l.path_probability for l in leaves if l.reached_goal)
    return ExactPartition(interval, leaves, cost, goal)


def enumerate_braids(tree: StrategyTree) -> List[ExactPartition]:
    """Every braid of the tree, in canonical interval order."""
    parts = [_partition(cell, leaves) for cell, leaves in _cells(tree.root, tree.pref.space.full())]
    parts.sort(key=lambda p: p.interval.sort_key())
    logger.info("%s H=%d: %d partitions", tree.model.name, tree.horizon, len(parts))
    return parts


def exact_expected_cost(tree: StrategyTree, theta: Sequence[float]) -> Tuple[float, float]:
    """(expected cost, goal probability) of the policy at ``theta``."""
    theta = tuple(float(x) for x in theta)
    if not ia.contains(tree.pref.space.full(), theta):
        raise ia.IntervalError(f"parameter vector {theta} lies outside the domain")
    cost: List[float] = []
    goal: List[float] = []

    def walk(node: BeliefNode) -> None:
        if node.leaf is not None:
            cost.append(node.leaf.path_probability * node.leaf.cost)
            return
        index = bp.fired_rule(tree.pref, node.belief, theta)
        branch = next((b for b in node.branches if b.rule_index == index), None)
        if branch is None:
            raise ValueError(f"rule r{index + 1} fired on a pruned branch at {node.path}")
        for edge in branch.edges:
            if edge.leaf is not None:
                cost.append(edge.leaf.path_probability * edge.leaf.cost)
                goal.append(edge.leaf.path_probability)
            else:
                walk(edge.child)

    walk(tree.root)
    return math.fsum(cost), math.fsum(goal)


def oracle_optimum(partitions: Sequence[ExactPartition]) -> ExactPartition:
    """Cheapest partition that reaches the goal; ties go to the canonical order."""
    feasible = [p for p in partitions if p.goal_probability > 0.0]
    if not feasible:
        raise NoSolutionError("no partition reaches the goal with positive probability")
    return min(feasible, key=lambda p: (p.expected_cost, p.interval.sort_key()))


def proper_subset_braids(partitions: Sequence[ExactPartition]) -> List[Tuple[int, int]]:
    """Index pairs (i, j) where braid i's leaf set is a strict subset of braid j's."""
    keys = [p.leaf_keys for p in partitions]
    return [(i, j) for i, a in enumerate(keys) for j, b in enumerate(keys) if i != j and a < b]


def write_partitions_csv(partitions: Sequence[ExactPartition], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(PARTITION_COLUMNS)
    for p in partitions:
        writer.writerow([
            p.interval.dump(" u "), repr(p.expected_cost), repr(p.goal_probability), len(p.leaves),
        ])
