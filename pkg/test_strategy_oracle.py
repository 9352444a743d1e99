# Run: python3 -m unittest test_strategy_oracle -v
# BSQ_SLOW_TESTS=1 adds the H=4 partition checks.
from __future__ import annotations

import io
import math
import os
import unittest

import numpy as np

import bsq_preference as bp
import domains
import gpomdp_core as gc
import interval_algebra as ia
import strategy_oracle as so

SLOW = os.getenv("BSQ_SLOW_TESTS", "").strip().lower() in ("1", "true", "yes", "on")


def _spaceship(**overrides):
    cfg = domains.SpaceshipRepairConfig(**overrides)
    return domains.build_spaceship_repair(cfg)


class TreeTests(unittest.TestCase):
    def test_horizon_zero_is_a_single_leaf(self):
        model, pref = _spaceship()
        tree = so.build_tree(model, pref, 0)
        self.assertEqual((tree.stats.belief_nodes, tree.stats.action_nodes, tree.stats.leaves), (1, 0, 1))
        (part,) = so.enumerate_braids(tree)
        self.assertEqual(part.interval, pref.space.full())
        self.assertEqual(part.expected_cost, 0.0)

    def test_pruning_removes_a_third_at_horizon_two(self):
        model, pref = _spaceship()
        pruned = so.build_tree(model, pref, 2)
        full = so.build_tree(model, pref, 2, prune=False)
        self.assertEqual(full.stats.leaves, 144)
        self.assertEqual(pruned.stats.leaves, 96)
        self.assertAlmostEqual(so.pruned_fraction(pruned, full), 1.0 / 3.0, places=12)
        self.assertEqual(len(list(so.iter_leaves(pruned))), 96)

    def test_pruning_keeps_the_partitions(self):
        model, pref = _spaceship()
        pruned = so.enumerate_braids(so.build_tree(model, pref, 2))
        full = so.enumerate_braids(so.build_tree(model, pref, 2, prune=False))
        self.assertEqual([p.interval for p in pruned], [p.interval for p in full])
        for a, b in zip(pruned, full):
            self.assertAlmostEqual(a.expected_cost, b.expected_cost, places=12)

    def test_goal_entry_edges_end_in_leaves(self):
        model, pref = _spaceship(station_distance=1)
        tree = so.build_tree(model, pref, 2)
        goal_leaves = [l for l in so.iter_leaves(tree) if l.reached_goal]
        self.assertTrue(goal_leaves)
        self.assertEqual({l.cost for l in goal_leaves}, {1, 2})
        self.assertTrue(all(l.cost == 2 for l in so.iter_leaves(tree) if not l.reached_goal))

    def test_node_budget(self):
        model, pref = _spaceship()
        with self.assertRaises(so.NodeBudgetExceeded):
            so.build_tree(model, pref, 3, node_budget=50)

    def test_negative_horizon(self):
        model, pref = _spaceship()
        with self.assertRaises(ValueError):
            so.build_tree(model, pref, -1)

    def test_catchall_only_preference(self):
        model, _ = _spaceship()
        pref = bp.parse_preference("pref idle(t1 in [0, 1]) { else -> wait; }", model)
        parts = so.enumerate_braids(so.build_tree(model, pref, 3))
        self.assertEqual(len(parts), 1)
        self.assertEqual(parts[0].interval, pref.space.full())
        self.assertAlmostEqual(parts[0].expected_cost, 3.0, places=12)
        self.assertEqual(parts[0].goal_probability, 0.0)


class PartitionTests(unittest.TestCase):
    def check_partitions(self, model, pref, horizon):
        tree = so.build_tree(model, pref, horizon)
        parts = so.enumerate_braids(tree)
        self.assertIsNone(ia.tiling_error([p.interval for p in parts], pref.space))
        self.assertAlmostEqual(math.fsum(ia.volume(p.interval) for p in parts), pref.space.volume(), places=9)
        self.assertEqual(so.proper_subset_braids(parts), [])
        rng = np.random.default_rng(horizon)
        for part in parts:
            self.assertAlmostEqual(part.total_probability, 1.0, places=9)
            for _ in range(10):
                theta = ia.sample_uniform(part.interval, rng)
                cost, goal = so.exact_expected_cost(tree, theta)
                self.assertAlmostEqual(cost, part.expected_cost, delta=1e-12)
                self.assertAlmostEqual(goal, part.goal_probability, delta=1e-12)
        return tree, parts

    def test_spaceship_horizon_two_grid(self):
        model, pref = _spaceship()
        _, parts = self.check_partitions(model, pref, 2)
        breaks = sorted({b.lo[0] for p in parts for b in p.interval.boxes})
        self.assertIn(0.5, breaks)
        self.assertIn(0.6, breaks)
        for p in parts:
            self.assertAlmostEqual(p.expected_cost, 2.0, places=12)

    def test_spaceship_horizon_three(self):
        model, pref = _spaceship()
        self.check_partitions(model, pref, 3)

    def test_short_station_distance(self):
        model, pref = _spaceship(station_distance=2)
        _, parts = self.check_partitions(model, pref, 3)
        costs = {round(p.expected_cost, 9) for p in parts}
        self.assertGreater(len(costs), 1)

    @unittest.skipUnless(SLOW, "set BSQ_SLOW_TESTS=1")
    def test_spaceship_horizon_four(self):
        model, pref = _spaceship()
        self.check_partitions(model, pref, 4)

    def test_horizon_one_cost_is_one(self):
        model, pref = _spaceship(station_distance=1)
        tree = so.build_tree(model, pref, 1)
        for theta in ((0.1, 0.1), (0.9, 0.2), (0.9, 0.9)):
            with self.subTest(theta=theta):
                self.assertAlmostEqual(so.exact_expected_cost(tree, theta)[0], 1.0, places=12)

    def test_point_outside_the_domain(self):
        model, pref = _spaceship()
        tree = so.build_tree(model, pref, 1)
        with self.assertRaises(ia.IntervalError):
            so.exact_expected_cost(tree, (1.0, 0.5))


class OptimumTests(unittest.TestCase):
    def test_optimum_matches_brute_force(self):
        model, pref = _spaceship(station_distance=2)
        tree = so.build_tree(model, pref, 3)
        parts = so.enumerate_braids(tree)
        best = so.oracle_optimum(parts)
        rng = np.random.default_rng(0)
        sweep = []
        for p in parts:
            cost, goal = so.exact_expected_cost(tree, ia.sample_uniform(p.interval, rng))
            if goal > 0:
                sweep.append(cost)
        self.assertAlmostEqual(best.expected_cost, min(sweep), places=12)
        self.assertGreater(best.goal_probability, 0.0)

    def test_commit_region_beats_waiting(self):
        model, pref = _spaceship(station_distance=2)
        tree = so.build_tree(model, pref, 4)
        commit, _ = so.exact_expected_cost(tree, (0.1, 0.5))
        idle, _ = so.exact_expected_cost(tree, (0.95, 0.95))
        self.assertLess(commit, idle)
        self.assertAlmostEqual(idle, 4.0, places=12)

    def test_no_goal_means_no_solution(self):
        model, pref = _spaceship()
        parts = so.enumerate_braids(so.build_tree(model, pref, 2))
        with self.assertRaises(so.NoSolutionError):
            so.oracle_optimum(parts)

    def test_monte_carlo_agrees_with_exact_cost(self):
        model, pref = _spaceship(station_distance=2)
        tree = so.build_tree(model, pref, 4)
        rng = np.random.default_rng(21)
        for theta in ((0.3, 0.8), (0.7, 0.3)):
            exact, _ = so.exact_expected_cost(tree, theta)
            costs = np.array([
                gc.rollout(model, pref.policy(theta), 4, rng).cost for _ in range(20000)
            ])
            stderr = costs.std(ddof=1) / math.sqrt(len(costs))
            self.assertLess(abs(costs.mean() - exact), 4 * stderr + 1e-9, msg=str(theta))

    def test_csv(self):
        model, pref = _spaceship(station_distance=2)
        parts = so.enumerate_braids(so.build_tree(model, pref, 2))
        buf = io.StringIO()
        so.write_partitions_csv(parts, buf)
        lines = buf.getvalue().splitlines()
        self.assertEqual(lines[0], "interval,expected_cost,goal_probability,leaf_count")
        self.assertEqual(len(lines), len(parts) + 1)


if __name__ == "__main__":
    unittest.main()
