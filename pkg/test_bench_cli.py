# Run: python3 -m unittest test_bench_cli -v
# BSQ_SLOW_TESTS=1 adds the Spaceship Repair landscape checks and the solver-against-baseline runs.
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import unittest
from unittest import mock

import numpy as np

import bench_cli as cli
import bsq_preference as bp
import domains
import interval_algebra as ia
import prs_solver as prs
import strategy_oracle as so

SLOW = os.getenv("BSQ_SLOW_TESTS", "").strip().lower() in ("1", "true", "yes", "on")
DOMAIN_NAMES = ("spaceship_repair", "lane_merger", "graph_rock_sample", "store_visit")


def _run(*argv: str):
    """cli_main with captured output: (exit code, stdout, stderr)."""
    with mock.patch("sys.stdout", new_callable=io.StringIO) as out, \
            mock.patch("sys.stderr", new_callable=io.StringIO) as err:
        code = cli.cli_main(list(argv))
    return code, out.getvalue(), err.getvalue()


class CliTests(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name
        self.sr_config = self.path("sr.json")
        with open(self.sr_config, "w", encoding="utf-8") as fh:
            json.dump({"p_r": 0.6, "p_s": 0.75, "station_distance": 2, "horizon": 3}, fh)

    def tearDown(self):
        self._tmp.cleanup()

    def path(self, name: str) -> str:
        return os.path.join(self.tmp, name)

    def read_csv(self, name: str):
        with open(self.path(name), encoding="utf-8", newline="") as fh:
            return list(csv.reader(fh))

    def test_usage_errors(self):
        self.assertEqual(_run()[0], 2)
        self.assertEqual(_run("oracle")[0], 2)
        self.assertEqual(_run("solve", "--domain", "sr", "--iters", "many")[0], 2)

    def test_unknown_domain(self):
        code, _, err = _run("oracle", "--domain", "mars")
        self.assertEqual(code, 1)
        self.assertIn("unknown domain", err)

    def test_bad_horizon_override(self):
        code, _, err = _run("oracle", "--domain", "sr", "--horizon", "0")
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("error:"))

    def test_oracle_writes_partitions(self):
        code, out, err = _run("oracle", "--domain", "sr", "--horizon", "2", "--unpruned",
                              "--csv", self.path("parts.csv"))
        self.assertEqual(code, 0)
        self.assertIn("wrote", out)
        self.assertIn("pruned fraction 0.3333", err)
        self.assertIn("optimum: none", err)
        rows = self.read_csv("parts.csv")
        self.assertEqual(rows[0], ["interval", "expected_cost", "goal_probability", "leaf_count"])
        for row in rows[1:]:
            self.assertAlmostEqual(float(row[1]), 2.0, places=12)

    def test_oracle_to_stdout_reports_the_optimum(self):
        code, out, err = _run("oracle", "--domain", "sr", "--config", self.sr_config)
        self.assertEqual(code, 0)
        self.assertTrue(out.startswith("interval,expected_cost"))
        self.assertIn("optimum: [", err)

    def test_evaluate_checks_theta_arity(self):
        code, _, err = _run("evaluate", "--domain", "sr", "--theta", "0.5", "-q")
        self.assertEqual(code, 2)
        self.assertIn("--theta needs 2 values", err)

    def test_evaluate_outputs(self):
        code, out, _ = _run("evaluate", "--domain", "sr", "--config", self.sr_config,
                            "--theta", "0.1", "0.5", "--runs", "50", "-q", "--workers", "1",
                            "--csv", self.path("eval.csv"), "--json", self.path("eval.json"))
        self.assertEqual(code, 0)
        self.assertIn("50 runs, H=3", out)
        rows = self.read_csv("eval.csv")
        self.assertEqual(rows[0], ["t1", "t2", "mean_cost", "stdev", "goal_rate", "runs", "seed"])
        self.assertEqual(rows[1][:2], ["0.1", "0.5"])
        with open(self.path("eval.json"), encoding="utf-8") as fh:
            doc = json.load(fh)
        self.assertEqual((doc["theta"], doc["runs"], doc["horizon"]), ([0.1, 0.5], 50, 3))
        self.assertAlmostEqual(doc["mean_cost"], float(rows[1][2]))
        self.assertIn("cost_stderr", doc)

    def test_solve_summary(self):
        code, out, _ = _run("solve", "--domain", "sr", "--config", self.sr_config, "-q",
                            "--workers", "1", "--iters", "240", "--snapshot-period", "1",
                            "--eval-runs", "20", "--snapshot-csv", self.path("snaps.csv"),
                            "--json", self.path("solve.json"))
        self.assertEqual(code, 0)
        self.assertIn("best partition:", out)
        with open(self.path("solve.json"), encoding="utf-8") as fh:
            doc = json.load(fh)
        self.assertEqual((doc["total_samples"], doc["selector"], doc["horizon"]), (240, "epsilon_greedy", 3))
        self.assertEqual(doc["evaluation"]["runs"], 20)
        rows = self.read_csv("snaps.csv")
        self.assertEqual(rows[0][0], "elapsed_s")
        self.assertEqual(rows[-1][4], "240")

    def test_solve_rejects_bad_selector(self):
        code, _, err = _run("solve", "--domain", "sr", "--selector", "annealing", "--iters", "10")
        self.assertEqual(code, 1)
        self.assertIn("unknown selector", err)

    def test_solver_config_file_and_explicit_flags(self):
        path = self.path("solver.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"selector": "boltzmann", "iterations": 500, "e0": 0.5}, fh)
        parser = cli.build_parser()
        args = parser.parse_args(["solve", "--domain", "sr", "--solver-config", path,
                                  "--iters", "80", "--workers", "1"])
        cfg = cli._solver_config(args, parser)
        self.assertEqual((cfg.selector, cfg.iterations, cfg.e0, cfg.workers), ("boltzmann", 80, 0.5, 1))

    def test_boltzmann_sign_flag(self):
        parser = cli.build_parser()
        base = ["solve", "--domain", "sr", "--selector", "boltzmann", "--workers", "1"]
        for flags, want in (([], False), (["--boltzmann-paper-sign"], True),
                            (["--boltzmann-inverted-sign"], True)):
            with self.subTest(flags=flags):
                args = parser.parse_args(base + flags)
                self.assertEqual(cli._solver_config(args, parser).inverted_sign, want)
        code, out, _ = _run("solve", "--domain", "sr", "--config", self.sr_config, "-q",
                            "--selector", "boltzmann", "--boltzmann-paper-sign",
                            "--workers", "1", "--iters", "60")
        self.assertEqual(code, 0)
        self.assertIn("best partition:", out)

    def test_evaluate_workers_do_not_change_the_numbers(self):
        rows = []
        for workers in ("1", "3"):
            code, _, _ = _run("evaluate", "--domain", "sr", "--config", self.sr_config, "-q",
                              "--theta", "0.3", "0.6", "--runs", "40", "--workers", workers,
                              "--csv", self.path(f"eval{workers}.csv"))
            self.assertEqual(code, 0)
            rows.append(self.read_csv(f"eval{workers}.csv"))
        self.assertEqual(rows[0], rows[1])
        code, _, err = _run("evaluate", "--domain", "sr", "--theta", "0.3", "0.6", "-q", "--workers", "0")
        self.assertEqual(code, 1)
        self.assertIn("workers", err)

    def test_heatmap_at_horizon_one(self):
        with open(self.sr_config, "w", encoding="utf-8") as fh:
            json.dump({"station_distance": 1, "horizon": 1}, fh)
        code, _, _ = _run("heatmap", "--domain", "sr", "--config", self.sr_config, "-q",
                          "--step", "0.5", "--runs", "5", "--workers", "1", "--csv", self.path("heat.csv"))
        self.assertEqual(code, 0)
        rows = self.read_csv("heat.csv")
        self.assertEqual(rows[0], ["t1", "t2", "mean_cost", "goal_rate"])
        self.assertEqual(len(rows), 10)
        self.assertTrue(all(float(r[2]) == 1.0 for r in rows[1:]))

    def test_baseline_json(self):
        code, out, _ = _run("baseline", "--domain", "sr", "--config", self.sr_config, "-q",
                            "--trials", "3", "--runs", "20", "--workers", "1", "--json", self.path("base.json"))
        self.assertEqual(code, 0)
        self.assertIn("RCompliant over 3 trials", out)
        with open(self.path("base.json"), encoding="utf-8") as fh:
            doc = json.load(fh)
        self.assertEqual(len(doc["trials"]), 3)
        self.assertEqual(doc["aggregate"]["trials"], 3)

    def test_filter_check(self):
        code, out, _ = _run("filter-check", "--domain", "sr", "--max-len", "3")
        self.assertEqual(code, 0)
        self.assertIn(f"{4 + 16 + 64} observation sequences", out)
        self.assertEqual(_run("filter-check", "--domain", "lm")[0], 2)


class EvaluationTests(unittest.TestCase):
    def setUp(self):
        self.model, self.pref = domains.build_spaceship_repair(domains.SpaceshipRepairConfig(station_distance=2))

    def test_same_seed_same_report(self):
        a = cli.evaluate_policy(self.model, self.pref, (0.3, 0.6), 4, runs=200, seed=3)
        b = cli.evaluate_policy(self.model, self.pref, (0.3, 0.6), 4, runs=200, seed=3)
        self.assertEqual(a, b)
        self.assertGreater(a.goal_rate, 0.0)
        self.assertLessEqual(a.mean_cost, 4.0)

    def test_common_random_numbers(self):
        # Points of one braid share their policy tree, so the episodes match exactly.
        parts = so.enumerate_braids(so.build_tree(self.model, self.pref, 4))
        part = max(parts, key=lambda p: ia.volume(p.interval))
        rng = np.random.default_rng(8)
        a, b = (
            cli.evaluate_policy(self.model, self.pref, ia.sample_uniform(part.interval, rng), 4,
                                runs=100, seed=1)
            for _ in range(2)
        )
        self.assertNotEqual(a.theta, b.theta)
        self.assertEqual((a.mean_cost, a.goal_rate), (b.mean_cost, b.goal_rate))

    def test_parallel_runs_match_serial_runs(self):
        serial = cli.evaluate_policy(self.model, self.pref, (0.3, 0.6), 4, runs=61, seed=5)
        self.assertEqual(cli.evaluate_policy(self.model, self.pref, (0.3, 0.6), 4, runs=61, seed=5, workers=3),
                         serial)
        self.assertEqual(
            cli.rcompliant_baseline(self.model, self.pref, 3, trials=3, runs=10, seed=2, workers=2),
            cli.rcompliant_baseline(self.model, self.pref, 3, trials=3, runs=10, seed=2))
        self.assertEqual(
            cli.heatmap_sweep(self.model, self.pref, 3, step=0.5, runs_per_cell=8, workers=2).cells,
            cli.heatmap_sweep(self.model, self.pref, 3, step=0.5, runs_per_cell=8).cells)
        with self.assertRaises(ValueError):
            cli.evaluate_policy(self.model, self.pref, (0.3, 0.6), 4, runs=10, workers=0)

    def test_baseline_reaches_the_goal_on_every_domain(self):
        for name in DOMAIN_NAMES:
            with self.subTest(domain=name):
                model, pref, _ = domains.load_domain(name)
                agg = cli.aggregate_reports(
                    cli.rcompliant_baseline(model, pref, model.horizon, trials=10, runs=50, seed=0))
                self.assertGreater(agg.goal_rate, 0.0)

    def test_runs_must_be_positive(self):
        with self.assertRaises(ValueError):
            cli.evaluate_policy(self.model, self.pref, (0.5, 0.5), 4, runs=0)

    def test_aggregate(self):
        reports = [
            cli.EvalReport((0.1, 0.1), 10, cost, 0.0, goal, 0.0, 0, 4)
            for cost, goal in ((2.0, 1.0), (4.0, 0.5))
        ]
        agg = cli.aggregate_reports(reports)
        self.assertEqual((agg.trials, agg.mean_cost, agg.goal_rate), (2, 3.0, 0.75))
        self.assertAlmostEqual(agg.mean_cost_std, np.std([2.0, 4.0], ddof=1))
        self.assertEqual(cli.aggregate_reports(reports[:1]).mean_cost_std, 0.0)
        with self.assertRaises(ValueError):
            cli.aggregate_reports([])

    def test_baseline_draws_inside_the_domain(self):
        reports = cli.rcompliant_baseline(self.model, self.pref, 3, trials=4, runs=10, seed=2)
        self.assertEqual(len(reports), 4)
        for r in reports:
            self.assertIn(r.theta, self.pref.space.full())

    def test_grid_axis(self):
        np.testing.assert_allclose(cli.grid_axis(0.0, 1.0, 0.25), [0.0, 0.25, 0.5, 0.75, 1.0])
        self.assertEqual(len(cli.grid_axis(0.0, 1.0, 0.02)), 51)
        self.assertEqual(cli.grid_axis(0.0, 1.0, 0.02)[-1], 1.0)
        with self.assertRaises(ValueError):
            cli.grid_axis(0.0, 1.0, 0.0)

    def test_heatmap_needs_two_parameters(self):
        pref = bp.parse_preference("pref p(t1 in [0, 1]) { else -> wait; }", self.model)
        with self.assertRaises(ValueError):
            cli.heatmap_sweep(self.model, pref, 2, step=0.5, runs_per_cell=1)


def _combined_se(*errors: float) -> float:
    return math.sqrt(sum(e * e for e in errors))


@unittest.skipUnless(SLOW, "set BSQ_SLOW_TESTS=1")
class SpaceshipBenchmarkTests(unittest.TestCase):
    def setUp(self):
        self.model, self.pref, _ = domains.load_domain("sr")

    def test_commit_plateaus_beat_the_centre(self):
        centre = [
            cli.evaluate_policy(self.model, self.pref, (t1, t1 - 0.25), 12, runs=1000, workers=8)
            for t1 in (0.6, 0.65, 0.7, 0.75)
        ]
        centre_cost = float(np.mean([r.mean_cost for r in centre]))
        for theta in ((0.1, 0.5), (0.9, 0.05)):
            with self.subTest(theta=theta):
                plateau = cli.evaluate_policy(self.model, self.pref, theta, 12, runs=1000, workers=8)
                self.assertLess(plateau.mean_cost + 3 * plateau.cost_stderr, centre_cost)

    def test_cost_steps_along_the_diagonal(self):
        t1s = np.round(np.arange(0.30, 0.99, 0.02), 12)
        reports = [
            cli.evaluate_policy(self.model, self.pref, (t1, t1 - 0.25), 12, runs=1000, workers=8)
            for t1 in t1s
        ]
        steps = [
            (t1s[k] + t1s[k + 1]) / 2
            for k in range(len(reports) - 1)
            if abs(reports[k + 1].mean_cost - reports[k].mean_cost)
            > 3 * _combined_se(reports[k].cost_stderr, reports[k + 1].cost_stderr)
        ]
        for where in (0.6, 0.8):
            with self.subTest(transition=where):
                self.assertTrue(any(abs(s - where) <= 0.05 for s in steps), msg=f"steps at {steps}")

    def test_goal_rate_anchor_at_long_horizon(self):
        model, pref, _ = domains.load_domain("sr", horizon=100)
        result = prs.prs_solve(model, pref, 100, prs.SolverConfig(seconds=60.0, workers=8, seed=0))
        theta = ia.sample_uniform(result.best.interval, np.random.default_rng(0))
        solved = cli.evaluate_policy(model, pref, theta, 100, runs=2000, seed=1, workers=8)
        baseline = cli.aggregate_reports(
            cli.rcompliant_baseline(model, pref, 100, trials=10, runs=2000, seed=1, workers=8))
        self.assertGreaterEqual(solved.goal_rate, 0.70)
        self.assertLessEqual(solved.goal_rate, 0.75)
        self.assertLessEqual(solved.mean_cost, 0.9 * baseline.mean_cost)


@unittest.skipUnless(SLOW, "set BSQ_SLOW_TESTS=1")
class SolverDominanceTests(unittest.TestCase):
    def test_every_selector_beats_the_baseline_on_every_domain(self):
        for name in DOMAIN_NAMES:
            model, pref, _ = domains.load_domain(name)
            horizon = model.horizon
            baseline = cli.aggregate_reports(
                cli.rcompliant_baseline(model, pref, horizon, trials=10, runs=2000, seed=1, workers=8))
            base_cost_se = baseline.mean_cost_std / math.sqrt(baseline.trials)
            base_goal_se = baseline.goal_rate_std / math.sqrt(baseline.trials)
            for selector in prs.SELECTORS:
                with self.subTest(domain=name, selector=selector):
                    cfg = prs.SolverConfig(selector=selector, seconds=60.0, workers=8, seed=0)
                    result = prs.prs_solve(model, pref, horizon, cfg)
                    theta = ia.sample_uniform(result.best.interval, np.random.default_rng(0))
                    solved = cli.evaluate_policy(model, pref, theta, horizon, runs=2000, seed=1, workers=8)
                    self.assertLess(
                        solved.mean_cost + 3 * _combined_se(solved.cost_stderr, base_cost_se),
                        baseline.mean_cost)
                    self.assertGreater(
                        solved.goal_rate - 3 * _combined_se(solved.goal_stderr, base_goal_se),
                        baseline.goal_rate)


if __name__ == "__main__":
    unittest.main()
