# Run: python3 -m unittest test_bsq_preference -v
from __future__ import annotations

import unittest

import numpy as np

import bsq_preference as bp
import domains
import gpomdp_core as gc
import interval_algebra as ia


def _spaceship():
    model, pref = domains.build_spaceship_repair(domains.SpaceshipRepairConfig())
    return model, pref


def _box(space: ia.ParamSpace, lo, hi) -> ia.IntervalSet:
    return ia.IntervalSet.from_boxes(space, [ia.Box(tuple(lo), tuple(hi))])


def _reachable_beliefs(model, action: str, depth: int, rng, count: int):
    out = [model.initial_belief]
    for _ in range(count):
        b = model.initial_belief
        for _ in range(int(rng.integers(1, depth + 1))):
            likelihood = gc.observation_likelihood(model, b, action)
            names = [o for o, p in likelihood.items() if p > 0]
            probs = np.array([likelihood[o] for o in names])
            obs = names[int(rng.choice(len(names), p=probs / probs.sum()))]
            b = gc.belief_update(model, b, action, obs)
        out.append(b)
    return out


class ParseTests(unittest.TestCase):
    def setUp(self):
        self.model, self.pref = _spaceship()

    def parse(self, text):
        return bp.parse_preference(text, self.model)

    def test_default_preference(self):
        self.assertEqual(self.pref.name, "spaceship_repair")
        self.assertEqual(self.pref.space.names, ("t1", "t2"))
        self.assertEqual([r.action for r in self.pref.rules], ["repair(robot)", "repair(ship)", "wait"])
        self.assertIsNone(self.pref.rules[-1].condition)
        self.assertEqual(self.pref.rules[0].condition.atoms[0].param, "t1")

    def test_printed_preference_parses_back(self):
        again = self.parse(bp.format_preference(self.pref))
        self.assertEqual(again, self.pref)

    def test_describe(self):
        lines = bp.describe(self.pref).splitlines()
        self.assertEqual(lines[0], "r1: if P[broken(robot)] > t1 -> repair(robot)")
        self.assertEqual(lines[-1], "r3: else -> wait")

    def test_for_loop_unrolls_in_declared_order(self):
        pref = self.parse("""
            pref p(params: t1 in [0, 1]) {
              for c in COMPONENTS { if P[broken(c)] > t1 -> repair(c); }
              else -> wait;
            }""")
        self.assertEqual([r.action for r in pref.rules], ["repair(robot)", "repair(ship)", "wait"])

    def test_condition_quantifiers_pick_the_connective(self):
        pref = self.parse("""
            pref p(t1 in [0, 1]) {
              if forall c in COMPONENTS: P[broken(c)] > t1 -> wait;
              elif exists c in COMPONENTS: P[broken(c)] > t1 -> repair(robot);
              else -> repair(ship);
            }""")
        first, second = pref.rules[0].condition, pref.rules[1].condition
        self.assertEqual((first.connective, len(first.atoms)), ("and", 2))
        self.assertEqual((second.connective, len(second.atoms)), ("or", 2))

    def test_literal_threshold(self):
        pref = self.parse("pref p() { if P[broken(robot)] >= 0.5 -> wait; else -> repair(ship); }")
        self.assertEqual(pref.n_params, 0)
        self.assertEqual(bp.fired_rule(pref, self.model.initial_belief, ()), 0)

    def test_syntax_errors(self):
        bad = {
            "missing else": "pref p(t1 in [0, 1]) { if P[broken(robot)] > t1 -> wait; }",
            "elif first": "pref p(t1 in [0, 1]) { elif P[broken(robot)] > t1 -> wait; else -> wait; }",
            "second if": ("pref p(t1 in [0, 1]) { if P[broken(robot)] > t1 -> wait;"
                          " if P[broken(ship)] > t1 -> wait; else -> wait; }"),
            "else not last": ("pref p(t1 in [0, 1]) { else -> wait;"
                              " elif P[broken(ship)] > t1 -> wait; }"),
            "equality bound": "pref p(t1 in [0, 1]) { if P[broken(robot)] == 0.5 -> wait; else -> wait; }",
            "undeclared": "pref p(t1 in [0, 1]) { if P[broken(robot)] > t9 -> wait; else -> wait; }",
            "mixed connectives": ("pref p(t1 in [0, 1]) { if P[broken(robot)] > t1 and P[broken(ship)] > t1"
                                  " or P[broken(ship)] > 0.2 -> wait; else -> wait; }"),
            "inverted domain": "pref p(t1 in [1, 0]) { else -> wait; }",
            "clash": "pref p(robot in [0, 1]) { else -> wait; }",
            "param inside query": "pref p(t1 in [0, 1]) { if P[rlocation() > t1] > 0.5 -> wait; else -> wait; }",
        }
        for label, text in bad.items():
            with self.subTest(label), self.assertRaises(bp.PreferenceSyntaxError):
                self.parse(text)

    def test_unknown_names(self):
        bad = (
            "pref p(t1 in [0, 1]) { if P[broken(robot)] > t1 -> fly; else -> wait; }",
            "pref p(t1 in [0, 1]) { if P[fuel()] > t1 -> wait; else -> wait; }",
            "pref p(t1 in [0, 1]) { if P[broken(robot) and rlocation() > t1] == 1 -> wait; else -> wait; }",
        )
        for text in bad:
            with self.subTest(text=text), self.assertRaises(bp.UnknownSymbolError):
                self.parse(text)


class EvaluationTests(unittest.TestCase):
    def setUp(self):
        self.model, self.pref = _spaceship()
        self.space = self.pref.space
        self.b0 = self.model.initial_belief

    def test_rule_selection_at_initial_belief(self):
        cases = {(0.3, 0.9): 0, (0.7, 0.2): 1, (0.7, 0.7): 2, (0.5, 0.1): 1, (0.0, 0.0): 0}
        for theta, want in cases.items():
            with self.subTest(theta=theta):
                self.assertEqual(bp.fired_rule(self.pref, self.b0, theta), want)

    def test_effective_intervals_at_initial_belief(self):
        got = bp.effective_intervals(self.pref, self.b0)
        self.assertEqual(got[0], _box(self.space, (0.0, 0.0), (0.5, 1.0)))
        self.assertEqual(got[1], _box(self.space, (0.5, 0.0), (1.0, 0.5)))
        self.assertEqual(got[2], _box(self.space, (0.5, 0.5), (1.0, 1.0)))
        self.assertEqual(bp.effective_interval(self.pref, self.b0, 1), got[1])

    def test_posterior_breakpoint_is_exact(self):
        # One "broken" reading of the robot sensor gives exactly p_r.
        b = gc.belief_update(self.model, self.b0, "wait", "o_TF")
        got = bp.effective_interval(self.pref, b, 0)
        self.assertEqual(got, _box(self.space, (0.0, 0.0), (0.6, 1.0)))

    def test_select_rule(self):
        index, action, region = bp.select_rule(self.pref, self.b0, (0.7, 0.2))
        self.assertEqual((index, action), (1, "repair(ship)"))
        self.assertIn((0.7, 0.2), region)

    def test_policy_arity(self):
        with self.assertRaises(ValueError):
            self.pref.policy((0.5,))
        self.assertEqual(self.pref.policy((0.1, 0.1))(self.b0), (0, "repair(robot)"))

    def test_intervals_tile_and_match_rule_firing(self):
        rng = np.random.default_rng(5)
        memo = bp.IntervalMemo(self.pref)
        for b in _reachable_beliefs(self.model, "wait", 6, rng, 25):
            parts = bp.effective_intervals(self.pref, b)
            self.assertIsNone(ia.tiling_error([p for p in parts if not p.is_empty], self.space))
            for i in range(len(parts)):
                self.assertEqual(memo.get(i, b), parts[i])
            for theta in rng.random((20, 2)):
                fired = bp.fired_rule(self.pref, b, theta)
                for i, part in enumerate(parts):
                    self.assertEqual(ia.contains(part, theta), i == fired)

    def test_leaf_interval_holds_the_sampled_point(self):
        model = self.model.with_horizon(8)
        rng = np.random.default_rng(9)
        memo = bp.IntervalMemo(self.pref)
        for _ in range(30):
            theta = tuple(rng.random(2))
            record = gc.rollout(model, self.pref.policy(theta), 8, rng)
            leaf = bp.leaf_interval(self.pref, record.rule_trace(), memo)
            self.assertIn(theta, leaf)
            self.assertEqual(leaf, bp.leaf_interval(self.pref, record.rule_trace()))

    def test_observable_query_constrains_parameter(self):
        pref = bp.parse_preference("""
            pref p(params: k in [-5, 5]) {
              if P[rlocation() > k] == 1 -> wait;
              else -> repair(robot);
            }""", self.model)
        atom = pref.rules[0].condition.atoms[0]
        self.assertEqual(atom.kind, "observable")
        got = bp.effective_interval(pref, self.b0, 0)
        self.assertEqual(got, _box(pref.space, (-5.0,), (0.0,)))
        self.assertEqual(bp.fired_rule(pref, self.b0, (-0.5,)), 0)
        self.assertEqual(bp.fired_rule(pref, self.b0, (0.0,)), 1)

    def test_observable_query_with_split_support(self):
        pref = bp.parse_preference("""
            pref p(params: k in [-5, 5]) {
              if P[rlocation() >= k] == 1 -> wait;
              else -> repair(robot);
            }""", self.model)
        b = gc.Belief(np.where(
            np.isin(self.model.features["rlocation()"], (-2, 1)) & ~self.model.goal_mask, 1.0, 0.0))
        b = gc.Belief(b.probs / b.probs.sum())
        # Holds in every support state only when k < -2.
        got = bp.effective_interval(pref, b, 0)
        self.assertEqual(got, _box(pref.space, (-5.0,), (-2.0,)))
        self.assertFalse(bp.eval_atom(pref.rules[0].condition.atoms[0], b, (0.0,)))


def _rollout_beliefs(model, pref, count: int, rng, horizon: int = 20):
    """Distinct beliefs met while rolling out uniformly drawn parameter vectors."""
    seen = {}
    full = pref.space.full()
    for _ in range(50 * count):
        if len(seen) >= count:
            break
        record = gc.rollout(model, pref.policy(ia.sample_uniform(full, rng)),
                            min(horizon, model.horizon), rng)
        for step in record.steps:
            seen.setdefault(step.belief.key(), step.belief)
    return list(seen.values())[:count]


def _random_theta(pref, belief, rng):
    """A uniform draw, sometimes moved onto a query value of the belief."""
    theta = list(ia.sample_uniform(pref.space.full(), rng))
    atoms = [a for r in pref.rules if r.condition is not None for a in r.condition.atoms
             if a.param is not None]
    if atoms and rng.random() < 0.3:
        atom = atoms[int(rng.integers(len(atoms)))]
        lo, hi = pref.space.dims[atom.param_index][1:]
        q = bp.atom_query(atom, belief)
        if lo <= q < hi:
            theta[atom.param_index] = q
    return tuple(theta)


DOMAIN_NAMES = ("spaceship_repair", "lane_merger", "graph_rock_sample", "store_visit")


class CompoundIntervalTests(unittest.TestCase):
    def test_catchall_interval(self):
        model, pref = _spaceship()
        b0 = model.initial_belief
        self.assertEqual(bp.interval_of_compound(None, b0, pref.space), pref.space.full())
        with self.assertRaises(ValueError):
            bp.interval_of_compound(None, b0)
        first = pref.rules[0].condition
        self.assertEqual(bp.interval_of_compound(first, b0), bp.interval_of_compound(first, b0, pref.space))

    def test_random_conditions_match_their_intervals(self):
        rng = np.random.default_rng(23)
        for name in DOMAIN_NAMES:
            model, pref, _ = domains.load_domain(name)
            atoms = [a for r in pref.rules if r.condition is not None for a in r.condition.atoms]
            beliefs = _rollout_beliefs(model, pref, 50, rng)
            with self.subTest(domain=name):
                for _ in range(2500):
                    picks = rng.choice(len(atoms), size=int(rng.integers(1, 5)))
                    condition = bp.CompoundBsq(
                        "and" if rng.random() < 0.5 else "or",
                        tuple(atoms[int(i)] for i in picks), pref.space)
                    b = beliefs[int(rng.integers(len(beliefs)))]
                    theta = _random_theta(pref, b, rng)
                    self.assertEqual(
                        bp.eval_compound(condition, b, theta),
                        ia.contains(bp.interval_of_compound(condition, b), theta),
                        msg=f"{bp.condition_text(condition)} at {theta}",
                    )


class DomainPreferenceTests(unittest.TestCase):
    def test_printed_preferences_parse_back(self):
        for name in DOMAIN_NAMES:
            with self.subTest(domain=name):
                model, pref, _ = domains.load_domain(name)
                self.assertEqual(bp.parse_preference(bp.format_preference(pref), model), pref)

    def test_intervals_tile_at_reachable_beliefs(self):
        rng = np.random.default_rng(31)
        for name in DOMAIN_NAMES:
            model, pref, _ = domains.load_domain(name)
            beliefs = _rollout_beliefs(model, pref, 100, rng)
            with self.subTest(domain=name):
                self.assertEqual(len(beliefs), 100)
                for b in beliefs:
                    parts = bp.effective_intervals(pref, b)
                    self.assertIsNone(ia.tiling_error([p for p in parts if not p.is_empty], pref.space))
                    theta = _random_theta(pref, b, rng)
                    fired = bp.fired_rule(pref, b, theta)
                    self.assertIn(theta, parts[fired])

    def test_rule_count_follows_the_rocks(self):
        cfg = domains.GraphRockSampleConfig(rocks=(("r1", "w2", "basalt"), ("r2", "w5", "granite")))
        _, pref = domains.build_graph_rock_sample(cfg)
        self.assertEqual(len(pref.rules), 9)
        self.assertEqual(pref.rules[-1].action, "goto(dropoff)")

    def test_every_shipped_preference_parses(self):
        rule_counts = {"spaceship_repair": 3, "lane_merger": 3, "graph_rock_sample": 13, "store_visit": 12}
        for name, count in rule_counts.items():
            with self.subTest(domain=name):
                model, pref, _ = domains.load_domain(name)
                self.assertEqual(len(pref.rules), count)
                self.assertIsNone(pref.rules[-1].condition)
                for rule in pref.rules:
                    self.assertIn(rule.action, model.actions)
                parts = bp.effective_intervals(pref, model.initial_belief)
                self.assertIsNone(ia.tiling_error([p for p in parts if not p.is_empty], pref.space))


if __name__ == "__main__":
    unittest.main()
