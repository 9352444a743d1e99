# gpomdp_core.py
# Finite goal-oriented POMDPs: construction from a relational vocabulary,
# exact Bayes filtering, simulation steps and policy rollouts.
#
# States, actions and observations are enumerated once at build time and
# every table is materialised: transitions as one sparse row-stochastic
# matrix per action, observations as a dense (action, next state, obs)
# array. Beliefs are read-only probability vectors over the enumerated
# states. Goal states are sinks and cost nothing; every other step costs 1.
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple
import json
import logging

import numpy as np
from scipy import sparse

import state_formula as sf

logger = logging.getLogger(__name__)

ROW_TOL = 1e-9


class ModelError(ValueError):
    """A model's tables or initial belief violate the gPOMDP invariants."""


class ImpossibleObservationError(ValueError):
    """An observation has zero likelihood under the current belief and action."""


class InvalidActionError(ValueError):
    """A policy chose an action the model does not define."""


@dataclass(frozen=True, eq=False)
class Belief:
    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.probs, dtype=float, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 0.0)

    def key(self) -> bytes:
        return self.probs.tobytes()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Belief) and np.array_equal(self.probs, other.probs)

    def __hash__(self) -> int:
        return hash(self.key())


class GPomdp:
    """An immutable, fully enumerated gPOMDP."""

    def __init__(
        self,
        name: str,
        variables: Sequence[Tuple[str, Sequence[Any]]],
        states: Sequence[Tuple[Any, ...]],
        actions: Sequence[str],
        observations: Sequence[str],
        transitions: Sequence[sparse.csr_array],
        observation_table: np.ndarray,
        goal_text: str,
        horizon: int,
        initial_belief: Belief,
        vocabulary: sf.Vocabulary,
        features: Mapping[str, np.ndarray],
        statics: Optional[Mapping[str, Any]] = None,
        static_functions: Iterable[str] = (),
    ):
        self.name = name
        self.variables = tuple((str(v), tuple(dom)) for v, dom in variables)
        self.states = tuple(tuple(s) for s in states)
        self.actions = tuple(actions)
        self.observations = tuple(observations)
        self.transitions = tuple(sparse.csr_array(t) for t in transitions)
        self.observation_table = np.asarray(observation_table, dtype=float)
        self.goal_text = goal_text
        self.horizon = int(horizon)
        self.initial_belief = initial_belief
        self.vocabulary = vocabulary
        self.features = {k: _frozen(v) for k, v in features.items()}
        self.statics = dict(statics or {})
        self.static_functions = frozenset(static_functions)
        self._action_ids = {a: i for i, a in enumerate(self.actions)}
        self._obs_ids = {o: i for i, o in enumerate(self.observations)}
        self._predict = tuple(t.T.tocsr() for t in self.transitions)
        self._masks: Dict[Any, np.ndarray] = {}
        self.goal_mask = _frozen(sf.evaluate_formula(
            sf.parse_formula(goal_text, vocabulary), self
        ).copy())
        validate_model(self)
        logger.debug(
            "model %s: %d states, %d actions, %d observations, H=%d",
            name, self.n_states, len(self.actions), len(self.observations), self.horizon,
        )

    @property
    def n_states(self) -> int:
        return len(self.states)

    def action_index(self, action: str) -> int:
        try:
            return self._action_ids[action]
        except KeyError:
            raise InvalidActionError(f"model {self.name!r} has no action {action!r}") from None

    def observation_index(self, observation: str) -> int:
        try:
            return self._obs_ids[observation]
        except KeyError:
            raise ImpossibleObservationError(
                f"model {self.name!r} has no observation {observation!r}"
            ) from None

    def state_index(self, state: Tuple[Any, ...]) -> int:
        try:
            return self.states.index(tuple(state))
        except ValueError:
            raise ModelError(f"unknown state {state!r}") from None

    def state_dict(self, index: int) -> Dict[str, Any]:
        return {v: x for (v, _), x in zip(self.variables, self.states[index])}

    def with_horizon(self, horizon: int) -> "GPomdp":
        clone = object.__new__(GPomdp)
        clone.__dict__.update(self.__dict__)
        clone.horizon = int(horizon)
        clone._masks = self._masks
        return clone

    def __getstate__(self) -> Dict[str, Any]:
        state = dict(self.__dict__)
        state["_masks"] = {}
        return state


def _frozen(arr: Any) -> np.ndarray:
    out = np.asarray(arr)
    if out.flags.writeable:
        out = out.copy()
        out.setflags(write=False)
    return out


def validate_model(model: GPomdp) -> None:
    n, n_actions, n_obs = model.n_states, len(model.actions), len(model.observations)
    if model.horizon < 0:
        raise ModelError(f"horizon must be non-negative, got {model.horizon}")
    if len(model.transitions) != n_actions:
        raise ModelError("one transition matrix per action is required")
    if model.observation_table.shape != (n_actions, n, n_obs):
        raise ModelError(
            f"observation table shape {model.observation_table.shape} != {(n_actions, n, n_obs)}"
        )
    for a, t in zip(model.actions, model.transitions):
        if t.shape != (n, n):
            raise ModelError(f"transition matrix for {a!r} has shape {t.shape}")
        if (t.data < 0).any():
            raise ModelError(f"negative transition probability under {a!r}")
        rows = np.asarray(t.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(rows - 1.0) > ROW_TOL)
        if len(bad):
            raise ModelError(
                f"T(s,{a},.) sums to {rows[bad[0]]:.12g} at state {model.states[bad[0]]}"
            )
        for g in np.flatnonzero(model.goal_mask):
            if abs(t[g, g] - 1.0) > ROW_TOL:
                raise ModelError(f"goal state {model.states[g]} is not a sink under {a!r}")
    if (model.observation_table < 0).any():
        raise ModelError("negative observation probability")
    sums = model.observation_table.sum(axis=2)
    if np.any(np.abs(sums - 1.0) > ROW_TOL):
        a, s = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)[0]
        raise ModelError(
            f"Ω({model.states[s]},{model.actions[a]},.) sums to {sums[a, s]:.12g}"
        )
    b0 = model.initial_belief.probs
    if b0.shape != (n,) or (b0 < 0).any() or abs(b0.sum() - 1.0) > ROW_TOL:
        raise ModelError("initial belief must be a distribution over the states")
    if b0[model.goal_mask].sum() > 0:
        raise ModelError("initial belief puts mass on goal states")


# --------------------------------------------------------------------------- #
# Construction from a relational description
# --------------------------------------------------------------------------- #
def build_model(
    name: str,
    variables: Sequence[Tuple[str, Sequence[Any]]],
    states: Sequence[Tuple[Any, ...]],
    actions: Sequence[str],
    observations: Sequence[str],
    transition: Callable[[Dict[str, Any], str], Iterable[Tuple[Tuple[Any, ...], float]]],
    observe: Callable[[Dict[str, Any], str], Iterable[Tuple[str, float]]],
    goal: str,
    horizon: int,
    initial: Mapping[Tuple[Any, ...], float],
    constant_sets: Optional[Mapping[str, Sequence[Any]]] = None,
    symbols: Iterable[str] = (),
    observable_functions: Iterable[str] = (),
    derived: Optional[Mapping[str, Callable[[Dict[str, Any]], Any]]] = None,
    statics: Optional[Mapping[str, Any]] = None,
    static_functions: Iterable[str] = (),
) -> GPomdp:
    """Ground a relational description into dense tables.

    ``transition(state, action)`` yields ``(next_state, prob)`` pairs and
    ``observe(next_state, action)`` yields ``(observation, prob)`` pairs;
    both receive states as ``{variable: value}`` dicts. ``derived`` maps a
    ground atom (e.g. ``"distance(r1)"``) to a function of the state dict.
    The callables are used here only and are not kept on the model.
    """
    states = [tuple(s) for s in states]
    index = {s: i for i, s in enumerate(states)}
    names = [v for v, _ in variables]
    dicts = [dict(zip(names, s)) for s in states]
    obs_index = {o: i for i, o in enumerate(observations)}

    matrices = []
    omega = np.zeros((len(actions), len(states), len(observations)))
    for ai, action in enumerate(actions):
        rows: List[int] = []
        cols: List[int] = []
        data: List[float] = []
        for si, sd in enumerate(dicts):
            for nxt, p in transition(sd, action):
                if p <= 0.0:
                    continue
                try:
                    cols.append(index[tuple(nxt)])
                except KeyError:
                    raise ModelError(f"{name}: {action} from {states[si]} leads to unknown {nxt}") from None
                rows.append(si)
                data.append(float(p))
            for o, p in observe(sd, action):
                omega[ai, si, obs_index[o]] += float(p)
        matrices.append(sparse.csr_array(
            (data, (rows, cols)), shape=(len(states), len(states))
        ))

    features: Dict[str, np.ndarray] = {}
    for pos, var in enumerate(names):
        features[var] = np.array([s[pos] for s in states])
    for key, fn in (derived or {}).items():
        features[key] = np.array([fn(sd) for sd in dicts])
    statics = dict(statics or {})
    functions = {k.split("(", 1)[0] for k in list(features) + list(statics)}
    functions |= set(static_functions)
    constant_sets = {k: tuple(v) for k, v in (constant_sets or {}).items()}
    all_symbols = set(symbols) | {
        c for values in constant_sets.values() for c in values if isinstance(c, str)
    }
    vocabulary = sf.Vocabulary(
        constant_sets=constant_sets,
        symbols=frozenset(all_symbols),
        functions=frozenset(functions),
        observable_functions=frozenset(observable_functions),
        actions=tuple(actions),
    )
    b0 = np.zeros(len(states))
    for s, p in initial.items():
        b0[index[tuple(s)]] += p
    return GPomdp(
        name, variables, states, actions, observations, matrices, omega,
        goal, horizon, Belief(b0), vocabulary, features, statics, static_functions,
    )


# --------------------------------------------------------------------------- #
# Filtering
# --------------------------------------------------------------------------- #
def formula_mask(model: GPomdp, formula: Any) -> np.ndarray:
    mask = model._masks.get(formula)
    if mask is None:
        if sf.params_in(formula):
            raise sf.FormulaError("a belief query formula cannot mention parameters")
        mask = _frozen(sf.evaluate_formula(formula, model).copy())
        model._masks[formula] = mask
    return mask


def belief_query(model: GPomdp, belief: Belief, formula: Any) -> float:
    """Pr⟦φ⟧_b: the belief mass on states satisfying ``formula``."""
    if isinstance(formula, str):
        formula = sf.parse_formula(formula, model.vocabulary)
    return float(belief.probs[formula_mask(model, formula)].sum())


def predict(model: GPomdp, belief: Belief, action: str) -> np.ndarray:
    return model._predict[model.action_index(action)] @ belief.probs


def belief_update(model: GPomdp, belief: Belief, action: str, observation: str) -> Belief:
    ai = model.action_index(action)
    oi = model.observation_index(observation)
    post = (model._predict[ai] @ belief.probs) * model.observation_table[ai, :, oi]
    z = post.sum()
    if not z > 0.0:
        raise ImpossibleObservationError(
            f"observation {observation!r} is impossible after {action!r} under this belief"
        )
    return Belief(post / z)


def belief_update_seq(model: GPomdp, belief: Belief, trace: Iterable[Tuple[str, str]]) -> Belief:
    for action, observation in trace:
        belief = belief_update(model, belief, action, observation)
    return belief


def belief_update_many(model: GPomdp, beliefs: np.ndarray, action: str, observation: str) -> np.ndarray:
    """Filter a stack of beliefs (one per row) through the same step."""
    ai = model.action_index(action)
    oi = model.observation_index(observation)
    post = (model._predict[ai] @ np.asarray(beliefs, dtype=float).T).T
    post = post * model.observation_table[ai, :, oi]
    z = post.sum(axis=1, keepdims=True)
    if np.any(~(z > 0.0)):
        raise ImpossibleObservationError(
            f"observation {observation!r} is impossible after {action!r} for some rows"
        )
    return post / z


def observation_likelihood(model: GPomdp, belief: Belief, action: str) -> Dict[str, float]:
    ai = model.action_index(action)
    dist = (model._predict[ai] @ belief.probs) @ model.observation_table[ai]
    return {o: float(p) for o, p in zip(model.observations, dist)}


# --------------------------------------------------------------------------- #
# Simulation
# --------------------------------------------------------------------------- #
def _draw(rng: np.random.Generator, weights: np.ndarray) -> int:
    cum = np.cumsum(weights)
    k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(k, len(weights) - 1)


def sample_initial_state(model: GPomdp, rng: np.random.Generator) -> int:
    return _draw(rng, model.initial_belief.probs)


def step_simulate(model: GPomdp, state: int, action: str,
                  rng: np.random.Generator) -> Tuple[int, str]:
    ai = model.action_index(action)
    t = model.transitions[ai]
    lo, hi = t.indptr[state], t.indptr[state + 1]
    nxt = int(t.indices[lo + _draw(rng, t.data[lo:hi])])
    o = _draw(rng, model.observation_table[ai, nxt])
    return nxt, model.observations[o]


class Step(NamedTuple):
    rule_index: int
    belief: Belief
    action: str
    observation: str


@dataclass(frozen=True)
class TrajectoryRecord:
    steps: Tuple[Step, ...]
    goal_time: Optional[int]
    horizon: int
    states: Tuple[int, ...] = field(default=(), compare=False)

    @property
    def reached_goal(self) -> bool:
        return self.goal_time is not None

    @property
    def cost(self) -> int:
        return self.goal_time if self.goal_time is not None else self.horizon

    @property
    def leaf_key(self) -> Tuple[Tuple[int, str], ...]:
        return tuple((s.rule_index, s.observation) for s in self.steps)

    def rule_trace(self) -> List[Tuple[int, Belief]]:
        return [(s.rule_index, s.belief) for s in self.steps]


Policy = Callable[[Belief], Tuple[int, str]]


def rollout(model: GPomdp, policy: Policy, horizon: int,
            rng: np.random.Generator) -> TrajectoryRecord:
    """One episode: hidden start from b₀, then act, simulate and filter.

    Stops at goal entry or after ``horizon`` steps.
    """
    if horizon < 1:
        raise ValueError(f"rollout horizon must be at least 1, got {horizon}")
    state = sample_initial_state(model, rng)
    belief = model.initial_belief
    steps: List[Step] = []
    visited = [state]
    goal_time = None
    for t in range(1, horizon + 1):
        rule, action = policy(belief)
        if action not in model._action_ids:
            raise InvalidActionError(f"policy chose unknown action {action!r}")
        state, obs = step_simulate(model, state, action, rng)
        steps.append(Step(rule, belief, action, obs))
        visited.append(state)
        if model.goal_mask[state]:
            goal_time = t
            break
        belief = belief_update(model, belief, action, obs)
    return TrajectoryRecord(tuple(steps), goal_time, horizon, tuple(visited))


# --------------------------------------------------------------------------- #
# Serialisation
# --------------------------------------------------------------------------- #
def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    return value


def model_to_dict(model: GPomdp) -> Dict[str, Any]:
    var_names = {v for v, _ in model.variables}
    transitions = []
    for a, t in zip(model.actions, model.transitions):
        coo = t.tocoo()
        transitions.extend(
            [a, int(r), int(c), float(p)] for r, c, p in zip(coo.row, coo.col, coo.data)
        )
    observation_fn = [
        [model.actions[a], int(s), model.observations[o], float(model.observation_table[a, s, o])]
        for a, s, o in zip(*np.nonzero(model.observation_table))
    ]
    vocab = model.vocabulary
    return {
        "name": model.name,
        "horizon": model.horizon,
        "variables": [{"name": v, "domain": [_plain(x) for x in dom]} for v, dom in model.variables],
        "states": [[_plain(x) for x in s] for s in model.states],
        "actions": list(model.actions),
        "observations": list(model.observations),
        "goal": model.goal_text,
        "initial_belief": [[int(i), float(model.initial_belief.probs[i])]
                           for i in model.initial_belief.support()],
        "transitions": transitions,
        "observation_fn": observation_fn,
        "constant_sets": {k: [_plain(x) for x in v] for k, v in vocab.constant_sets.items()},
        "symbols": sorted(vocab.symbols),
        "observable_functions": sorted(vocab.observable_functions),
        "derived": {k: [_plain(x) for x in v.tolist()]
                    for k, v in model.features.items() if k not in var_names},
        "statics": {k: _plain(v) for k, v in model.statics.items()},
        "static_functions": sorted(model.static_functions),
    }


def model_from_dict(doc: Mapping[str, Any]) -> GPomdp:
    try:
        states = [tuple(s) for s in doc["states"]]
        actions = list(doc["actions"])
        observations = list(doc["observations"])
        n = len(states)
        a_ids = {a: i for i, a in enumerate(actions)}
        o_ids = {o: i for i, o in enumerate(observations)}
        rows: List[List[Tuple[int, int, float]]] = [[] for _ in actions]
        for a, s, s2, p in doc["transitions"]:
            rows[a_ids[a]].append((s, s2, p))
        matrices = []
        for triplets in rows:
            r, c, p = zip(*triplets) if triplets else ((), (), ())
            matrices.append(sparse.csr_array((list(p), (list(r), list(c))), shape=(n, n)))
        omega = np.zeros((len(actions), n, len(observations)))
        for a, s, o, p in doc["observation_fn"]:
            omega[a_ids[a], s, o_ids[o]] += p
        b0 = np.zeros(n)
        for i, p in doc["initial_belief"]:
            b0[i] = p
        variables = [(v["name"], tuple(v["domain"])) for v in doc["variables"]]
        features = {v: np.array([s[pos] for s in states]) for pos, (v, _) in enumerate(variables)}
        features.update({k: np.array(v) for k, v in doc.get("derived", {}).items()})
        statics = dict(doc.get("statics", {}))
        static_functions = list(doc.get("static_functions", []))
        constant_sets = {k: tuple(v) for k, v in doc.get("constant_sets", {}).items()}
        functions = {k.split("(", 1)[0] for k in list(features) + list(statics)} | set(static_functions)
        vocabulary = sf.Vocabulary(
            constant_sets=constant_sets,
            symbols=frozenset(doc.get("symbols", [])),
            functions=frozenset(functions),
            observable_functions=frozenset(doc.get("observable_functions", [])),
            actions=tuple(actions),
        )
        return GPomdp(
            doc["name"], variables, states, actions, observations, matrices, omega,
            doc["goal"], doc["horizon"], Belief(b0), vocabulary, features, statics,
            static_functions,
        )
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model document: {exc}") from exc


def save_model(model: GPomdp, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path: str) -> GPomdp:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
