# domains.py
# The four benchmark gPOMDPs and their shipped preferences.
#
# Each domain is a frozen config dataclass (loaded from domain_files/<name>.json,
# keys starting with "_" are comments) plus a builder that grounds the
# relational description through gpomdp_core.build_model and parses the
# matching domain_files/<name>.bsq preference against the built model.
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Callable, Dict, Iterator, List, Mapping, NamedTuple, Optional, Tuple
import itertools
import json
import logging
import os

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

import bsq_preference as bp
import gpomdp_core as gc
from gpomdp_core import GPomdp

logger = logging.getLogger(__name__)

DOMAIN_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "domain_files")


class DomainConfigError(ValueError):
    """A domain config is malformed or violates the domain's invariants."""


def _require(ok: bool, message: str) -> None:
    if not ok:
        raise DomainConfigError(message)


class _Config:
    """from_dict/to_dict shared by the domain configs."""

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]):
        if not isinstance(doc, Mapping):
            raise DomainConfigError(f"{cls.__name__}: expected a JSON object")
        doc = {k: v for k, v in doc.items() if not str(k).startswith("_")}
        unknown = sorted(set(doc) - {f.name for f in fields(cls)})
        if unknown:
            raise DomainConfigError(f"{cls.__name__}: unknown keys {', '.join(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DomainConfigError):
                raise
            raise DomainConfigError(f"{cls.__name__}: {exc}") from exc

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))


def _cells(value: Any) -> Tuple[Tuple[int, int], ...]:
    return tuple((int(x), int(y)) for x, y in value)


def _named_cells(value: Any) -> Tuple[Tuple[str, Tuple[int, int]], ...]:
    """A JSON object or a sequence of pairs as ((name, (x, y)), ...)."""
    pairs = value.items() if isinstance(value, Mapping) else value
    return tuple((str(name), (int(cell[0]), int(cell[1]))) for name, cell in pairs)


# --------------------------------------------------------------------------- #
# Spaceship Repair
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class SpaceshipRepairConfig(_Config):
    p_r: float = 0.6
    p_s: float = 0.75
    station_distance: int = 5
    horizon: int = 12

    def __post_init__(self) -> None:
        for name in ("p_r", "p_s"):
            value = float(getattr(self, name))
            _require(0.5 < value <= 1.0, f"{name} must be in (0.5, 1], got {value}")
            object.__setattr__(self, name, value)
        _require(int(self.station_distance) >= 1, "station_distance must be at least 1")
        _require(int(self.horizon) >= 1, "horizon must be at least 1")
        object.__setattr__(self, "station_distance", int(self.station_distance))
        object.__setattr__(self, "horizon", int(self.horizon))


COMPONENTS = ("robot", "ship")


def build_spaceship_repair(cfg: SpaceshipRepairConfig,
                           pref_text: Optional[str] = None) -> Tuple[GPomdp, bp.BsqPreference]:
    d = cfg.station_distance
    locations = tuple(range(-d, d + 1))
    variables = [
        ("broken(robot)", (True, False)),
        ("broken(ship)", (True, False)),
        ("rlocation()", locations),
    ]
    states = list(itertools.product((True, False), (True, False), locations))

    def at_goal(sd: Dict[str, Any]) -> bool:
        loc = sd["rlocation()"]
        return (sd["broken(robot)"] and loc == -d) or (sd["broken(ship)"] and loc == d)

    def transition(sd: Dict[str, Any], action: str):
        robot, ship, loc = sd["broken(robot)"], sd["broken(ship)"], sd["rlocation()"]
        if not at_goal(sd):
            if action == "repair(robot)":
                loc = max(loc - 1, -d)
            elif action == "repair(ship)":
                loc = min(loc + 1, d)
        yield (robot, ship, loc), 1.0

    def observe(sd: Dict[str, Any], action: str):
        # Readings ignore action and location; "T" reads as broken.
        p_rt = cfg.p_r if sd["broken(robot)"] else 1.0 - cfg.p_r
        p_st = cfg.p_s if sd["broken(ship)"] else 1.0 - cfg.p_s
        for r, pr in (("T", p_rt), ("F", 1.0 - p_rt)):
            for s, ps in (("T", p_st), ("F", 1.0 - p_st)):
                yield f"o_{r}{s}", pr * ps

    goal = (f"(broken(robot) and rlocation() == {-d}) "
            f"or (broken(ship) and rlocation() == {d})")
    model = gc.build_model(
        "spaceship_repair", variables, states,
        actions=("repair(robot)", "repair(ship)", "wait"),
        observations=("o_TT", "o_TF", "o_FT", "o_FF"),
        transition=transition, observe=observe, goal=goal, horizon=cfg.horizon,
        initial={(r, s, 0): 0.25 for r in (True, False) for s in (True, False)},
        constant_sets={"COMPONENTS": COMPONENTS},
        observable_functions=("rlocation",),
    )
    return model, _preference(model, "spaceship_repair", pref_text)


def sr_closed_form(d_r: Any, p_r: float) -> Any:
    """Pr[broken] after readings whose broken-minus-working count is ``d_r``.

    Works elementwise on arrays of counts.
    """
    hit = np.power(float(p_r), d_r)
    miss = np.power(1.0 - float(p_r), d_r)
    return hit / (hit + miss)


class FilterCheck(NamedTuple):
    sequences: int
    max_dev_robot: float
    max_dev_ship: float

    @property
    def max_deviation(self) -> float:
        return max(self.max_dev_robot, self.max_dev_ship)


# Rows per belief_update_many call while walking observation sequences.
_FILTER_CHUNK = 4096


def sr_filter_check(model: GPomdp, cfg: SpaceshipRepairConfig,
                    max_len: int = 10, action: str = "wait") -> FilterCheck:
    """Filter every observation sequence up to ``max_len`` and compare both
    component marginals against the closed form."""
    robot = np.asarray(model.features["broken(robot)"], dtype=bool)
    ship = np.asarray(model.features["broken(ship)"], dtype=bool)
    steps = {
        o: (1 if o[2] == "T" else -1, 1 if o[3] == "T" else -1)
        for o in model.observations
    }
    worst = [0.0, 0.0]
    count = 0

    def walk(beliefs: np.ndarray, d_r: np.ndarray, d_s: np.ndarray, left: int) -> None:
        nonlocal count
        posts, counts_r, counts_s = [], [], []
        for obs, (step_r, step_s) in steps.items():
            post = gc.belief_update_many(model, beliefs, action, obs)
            nr, ns = d_r + step_r, d_s + step_s
            count += len(post)
            worst[0] = max(worst[0], float(np.max(np.abs(
                post[:, robot].sum(axis=1) - sr_closed_form(nr, cfg.p_r)))))
            worst[1] = max(worst[1], float(np.max(np.abs(
                post[:, ship].sum(axis=1) - sr_closed_form(ns, cfg.p_s)))))
            posts.append(post)
            counts_r.append(nr)
            counts_s.append(ns)
        if left > 1:
            post = np.concatenate(posts)
            nr, ns = np.concatenate(counts_r), np.concatenate(counts_s)
            for lo in range(0, len(post), _FILTER_CHUNK):
                hi = lo + _FILTER_CHUNK
                walk(post[lo:hi], nr[lo:hi], ns[lo:hi], left - 1)

    if max_len > 0:
        zero = np.zeros(1, dtype=int)
        walk(model.initial_belief.probs[None, :], zero, zero, max_len)
    logger.info("filter check: %d sequences, max deviation %.3g", count, max(worst))
    return FilterCheck(count, worst[0], worst[1])


# --------------------------------------------------------------------------- #
# Lane Merger
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class LaneMergerConfig(_Config):
    road_length: int = 20
    merge_deadline: int = 14
    agent_start: int = 0
    agent_start_speed: int = 1
    max_speed: int = 3
    other_positions: Tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    other_speeds: Tuple[int, ...] = (1, 2, 3)
    other_speed_change: float = 0.1
    zone_accuracies: Tuple[float, float, float] = (0.85, 0.9, 0.85)
    horizon: int = 30

    def __post_init__(self) -> None:
        for name in ("road_length", "merge_deadline", "agent_start",
                     "agent_start_speed", "max_speed", "horizon"):
            object.__setattr__(self, name, int(getattr(self, name)))
        object.__setattr__(self, "other_positions", tuple(int(x) for x in self.other_positions))
        object.__setattr__(self, "other_speeds", tuple(int(x) for x in self.other_speeds))
        object.__setattr__(self, "zone_accuracies", tuple(float(x) for x in self.zone_accuracies))
        object.__setattr__(self, "other_speed_change", float(self.other_speed_change))
        _require(0 < self.merge_deadline < self.road_length,
                 "merge_deadline must lie strictly inside the road")
        _require(self.max_speed >= 1, "max_speed must be at least 1")
        _require(0 <= self.agent_start < self.merge_deadline, "agent_start must precede the deadline")
        _require(0 <= self.agent_start_speed <= self.max_speed, "agent_start_speed out of range")
        _require(bool(self.other_positions) and all(
            0 <= x < self.road_length for x in self.other_positions), "other_positions must be on the road")
        _require(bool(self.other_speeds) and all(
            0 <= v <= self.max_speed for v in self.other_speeds), "other_speeds out of range")
        _require(0.0 <= self.other_speed_change <= 1.0, "other_speed_change must be a probability")
        _require(len(self.zone_accuracies) == 3 and all(
            0.5 <= a <= 1.0 for a in self.zone_accuracies), "zone_accuracies needs three values in [0.5, 1]")
        _require(self.horizon >= 1, "horizon must be at least 1")


# Detector zones as (lo, hi) offsets of the other car relative to the agent.
LM_ZONES = ((-4, -2), (-1, 1), (2, 4))
LM_SINKS = ("merged", "crashed")


def _lm_gap_ok(agent: int, agent_speed: int, other: int, other_speed: int) -> bool:
    return agent > other + other_speed + 2 or agent + agent_speed + 2 < other


def build_lane_merger(cfg: LaneMergerConfig,
                      pref_text: Optional[str] = None) -> Tuple[GPomdp, bp.BsqPreference]:
    speeds = tuple(range(cfg.max_speed + 1))
    agent_locs = tuple(range(cfg.merge_deadline))
    other_locs = tuple(range(cfg.road_length))
    sentinel = -1
    variables = [
        ("loc(agent)", agent_locs + (sentinel,)),
        ("speed(agent)", speeds + (sentinel,)),
        ("loc(other)", other_locs + (sentinel,)),
        ("speed(other)", speeds + (sentinel,)),
        ("status()", ("driving",) + LM_SINKS),
    ]
    states = [s + ("driving",) for s in itertools.product(agent_locs, speeds, other_locs, speeds)]
    sinks = {k: (sentinel, sentinel, sentinel, sentinel, k) for k in LM_SINKS}
    states.extend(sinks.values())

    def other_moves(loc: int, speed: int):
        change = cfg.other_speed_change
        options = [(speed, 1.0 - change)]
        options.append((min(speed + 1, cfg.max_speed), change / 2))
        options.append((max(speed - 1, 0), change / 2))
        for v, p in options:
            yield min(loc + v, cfg.road_length - 1), v, p

    def transition(sd: Dict[str, Any], action: str):
        if sd["status()"] != "driving":
            yield sinks[sd["status()"]], 1.0
            return
        loc, speed = sd["loc(agent)"], sd["speed(agent)"]
        oloc, ospeed = sd["loc(other)"], sd["speed(other)"]
        if action == "merge":
            ok = _lm_gap_ok(loc, speed, oloc, ospeed)
            yield sinks["merged" if ok else "crashed"], 1.0
            return
        if action == "speed_up":
            speed = min(speed + 1, cfg.max_speed)
        elif action == "slow_down":
            speed = max(speed - 1, 0)
        loc += speed
        if loc >= cfg.merge_deadline:
            yield sinks["crashed"], 1.0
            return
        for nloc, nspeed, p in other_moves(oloc, ospeed):
            yield (loc, speed, nloc, nspeed, "driving"), p

    labels = ["z" + "".join(bits) for bits in itertools.product("01", repeat=3)]

    def observe(sd: Dict[str, Any], action: str):
        if sd["status()"] != "driving":
            yield sd["status()"], 1.0
            return
        gap = sd["loc(other)"] - sd["loc(agent)"]
        truth = [lo <= gap <= hi for lo, hi in LM_ZONES]
        for label in labels:
            p = 1.0
            for bit, hit, acc in zip(label[1:], truth, cfg.zone_accuracies):
                p *= acc if (bit == "1") == hit else 1.0 - acc
            yield label, p

    start = [(cfg.agent_start, cfg.agent_start_speed, x, v, "driving")
             for x in cfg.other_positions for v in cfg.other_speeds]
    model = gc.build_model(
        "lane_merger", variables, states,
        actions=("speed_up", "slow_down", "keep_speed", "merge"),
        observations=tuple(labels) + LM_SINKS,
        transition=transition, observe=observe,
        goal="status() == merged", horizon=cfg.horizon,
        initial={s: 1.0 / len(start) for s in start},
        constant_sets={"CARS": ("agent", "other"), "STATUSES": ("driving",) + LM_SINKS},
        observable_functions=("loc(agent)", "speed(agent)", "status"),
    )
    return model, _preference(model, "lane_merger", pref_text)


# --------------------------------------------------------------------------- #
# Graph Rock Sample
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class GraphRockSampleConfig(_Config):
    waypoints: Tuple[str, ...] = ("w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7")
    edges: Tuple[Tuple[str, str], ...] = (
        ("w0", "w1"), ("w1", "w2"), ("w2", "w3"), ("w1", "w4"), ("w4", "w5"),
        ("w5", "w6"), ("w3", "w7"), ("w6", "w7"), ("w2", "w5"),
    )
    rocks: Tuple[Tuple[str, str, str], ...] = (
        ("r1", "w2", "basalt"), ("r2", "w5", "basalt"), ("r3", "w6", "granite"),
    )
    safe_prior: float = 0.5
    d0: float = 4.0
    start: str = "w0"
    dropoff: str = "w7"
    horizon: int = 40

    def __post_init__(self) -> None:
        rocks = []
        for rock in self.rocks:
            if isinstance(rock, Mapping):
                rock = (rock.get("name"), rock.get("waypoint"), rock.get("type"))
            rocks.append(tuple(str(x) for x in rock))
        object.__setattr__(self, "rocks", tuple(rocks))
        object.__setattr__(self, "waypoints", tuple(str(w) for w in self.waypoints))
        object.__setattr__(self, "edges", tuple((str(a), str(b)) for a, b in self.edges))
        object.__setattr__(self, "safe_prior", float(self.safe_prior))
        object.__setattr__(self, "d0", float(self.d0))
        object.__setattr__(self, "horizon", int(self.horizon))
        wps = set(self.waypoints)
        _require(len(wps) == len(self.waypoints) and bool(wps), "waypoints must be unique and non-empty")
        for a, b in self.edges:
            _require(a in wps and b in wps, f"edge {a}-{b} names an unknown waypoint")
        _require(self.start in wps, f"start {self.start!r} is not a waypoint")
        _require(self.dropoff in wps, f"dropoff {self.dropoff!r} is not a waypoint")
        _require(self.start != self.dropoff, "start and dropoff must differ")
        names = [r[0] for r in self.rocks]
        _require(bool(names) and len(set(names)) == len(names), "rock names must be unique and non-empty")
        for name, wp, _ in self.rocks:
            _require(wp in wps, f"rock {name} sits on unknown waypoint {wp!r}")
        _require(0.0 < self.safe_prior < 1.0, "safe_prior must be in (0, 1)")
        _require(self.d0 > 0.0, "d0 must be positive")
        _require(self.horizon >= 1, "horizon must be at least 1")
        dist, _ = self.shortest_paths()
        _require(bool(np.isfinite(dist).all()), "waypoint graph must be connected")

    @property
    def types(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(r[2] for r in self.rocks))

    def shortest_paths(self) -> Tuple[np.ndarray, np.ndarray]:
        index = {w: i for i, w in enumerate(self.waypoints)}
        n = len(self.waypoints)
        rows = [index[a] for a, _ in self.edges]
        cols = [index[b] for _, b in self.edges]
        adj = sparse.csr_array((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        return csgraph.shortest_path(adj, directed=False, unweighted=True,
                                     return_predecessors=True)

    def to_dict(self) -> Dict[str, Any]:
        doc = super().to_dict()
        doc["rocks"] = [{"name": n, "waypoint": w, "type": t} for n, w, t in self.rocks]
        return doc


def scan_accuracy(distance: float, d0: float) -> float:
    return 0.5 + 0.5 * 2.0 ** (-float(distance) / d0)


def build_graph_rock_sample(cfg: GraphRockSampleConfig,
                            pref_text: Optional[str] = None) -> Tuple[GPomdp, bp.BsqPreference]:
    wps = cfg.waypoints
    wp_index = {w: i for i, w in enumerate(wps)}
    dist, pred = cfg.shortest_paths()
    rocks = cfg.rocks
    types = cfg.types
    rock_wp = {name: wp for name, wp, _ in rocks}
    rock_type = {name: t for name, _, t in rocks}

    def next_hop(here: str, target: str) -> str:
        u, v = wp_index[here], wp_index[target]
        if u == v:
            return here
        while pred[u, v] != u:
            v = pred[u, v]
        return wps[v]

    def hops(here: str, rock: str) -> int:
        return int(dist[wp_index[here], wp_index[rock_wp[rock]]])

    variables = [("at()", wps)]
    variables += [(f"safe({r})", (True, False)) for r, _, _ in rocks]
    variables += [(f"collected({t})", (False, True)) for t in types]
    variables += [("broken()", (False, True))]
    names = [v for v, _ in variables]
    states = list(itertools.product(*(dom for _, dom in variables)))

    def at_goal(sd: Dict[str, Any]) -> bool:
        if sd["at()"] != cfg.dropoff or sd["broken()"]:
            return False
        return all(
            sd[f"collected({t})"] or not any(sd[f"safe({r})"] for r in rock_type if rock_type[r] == t)
            for t in types
        )

    def transition(sd: Dict[str, Any], action: str):
        nxt = dict(sd)
        if not (sd["broken()"] or at_goal(sd)):
            verb, arg = action[:-1].split("(", 1)
            if verb == "goto":
                target = cfg.dropoff if arg == "dropoff" else rock_wp[arg]
                nxt["at()"] = next_hop(sd["at()"], target)
            elif verb == "sample" and sd["at()"] == rock_wp[arg]:
                if sd[f"safe({arg})"]:
                    nxt[f"collected({rock_type[arg]})"] = True
                else:
                    nxt["broken()"] = True
        yield tuple(nxt[v] for v in names), 1.0

    def observe(sd: Dict[str, Any], action: str):
        if not action.startswith("scan("):
            yield "none", 1.0
            return
        rock = action[5:-1]
        acc = scan_accuracy(hops(sd["at()"], rock), cfg.d0)
        truth = "safe" if sd[f"safe({rock})"] else "unsafe"
        yield truth, acc
        yield ("unsafe" if truth == "safe" else "safe"), 1.0 - acc

    derived: Dict[str, Callable[[Dict[str, Any]], Any]] = {}
    for r, wp, _ in rocks:
        derived[f"loc({r})"] = lambda sd, wp=wp: sd["at()"] == wp
        derived[f"distance({r})"] = lambda sd, r=r: hops(sd["at()"], r)
    for t in types:
        derived[f"needed({t})"] = lambda sd, t=t: not sd[f"collected({t})"]

    initial: Dict[Tuple[Any, ...], float] = {}
    for bits in itertools.product((True, False), repeat=len(rocks)):
        p = float(np.prod([cfg.safe_prior if b else 1.0 - cfg.safe_prior for b in bits]))
        initial[(cfg.start,) + bits + (False,) * len(types) + (False,)] = p

    goal = (f"at() == {cfg.dropoff} and not broken() and "
            "(forall t in TYPES: (collected(t) or not (exists r in ROCKS: (type(r, t) and safe(r)))))")
    actions = [f"goto({r})" for r, _, _ in rocks] + ["goto(dropoff)"]
    actions += [f"sample({r})" for r, _, _ in rocks] + [f"scan({r})" for r, _, _ in rocks]
    model = gc.build_model(
        "graph_rock_sample", variables, states, actions,
        observations=("none", "safe", "unsafe"),
        transition=transition, observe=observe, goal=goal, horizon=cfg.horizon,
        initial=initial,
        constant_sets={"WAYPOINTS": wps, "ROCKS": tuple(r for r, _, _ in rocks), "TYPES": types},
        symbols=("dropoff",),
        observable_functions=("distance", "loc", "type", "at"),
        derived=derived,
        statics={f"type({r},{t})": True for r, _, t in rocks},
        static_functions=("type",),
    )
    return model, _preference(model, "graph_rock_sample", pref_text)


# --------------------------------------------------------------------------- #
# Store Visit
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class StoreVisitConfig(_Config):
    width: int = 4
    height: int = 4
    unsafe: Tuple[Tuple[int, int], ...] = ((1, 2), (2, 1))
    banks: Tuple[Tuple[str, Tuple[int, int]], ...] = (("bank1", (0, 0)),)
    stores: Tuple[Tuple[str, Tuple[int, int]], ...] = (("store1", (2, 3)),)
    start_cells: Tuple[Tuple[int, int], ...] = ((0, 1), (1, 0), (3, 0), (0, 3))
    scan_accuracy: float = 0.85
    horizon: int = 40

    def __post_init__(self) -> None:
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "unsafe", _cells(self.unsafe))
        object.__setattr__(self, "start_cells", _cells(self.start_cells))
        object.__setattr__(self, "banks", _named_cells(self.banks))
        object.__setattr__(self, "stores", _named_cells(self.stores))
        object.__setattr__(self, "scan_accuracy", float(self.scan_accuracy))
        object.__setattr__(self, "horizon", int(self.horizon))
        _require(self.width >= 1 and self.height >= 1, "grid must be at least 1x1")
        _require(bool(self.banks) and bool(self.stores), "need at least one bank and one store")
        names = [n for n, _ in self.banks + self.stores]
        _require(len(set(names)) == len(names), "bank and store names must be unique")
        for name, cell in self.banks + self.stores:
            _require(self.is_safe(cell), f"{name} must sit on a safe grid cell")
        _require(bool(self.start_cells), "need at least one start cell")
        for cell in self.start_cells:
            _require(self.is_safe(cell), f"start cell {cell} must be safe")
        _require(0.0 < self.scan_accuracy <= 1.0, "scan_accuracy must be in (0, 1]")
        _require(self.horizon >= 1, "horizon must be at least 1")

    @property
    def bank_cells(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(cell for _, cell in self.banks)

    @property
    def store_cells(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(cell for _, cell in self.stores)

    def in_grid(self, cell: Tuple[int, int]) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_safe(self, cell: Tuple[int, int]) -> bool:
        return self.in_grid(cell) and tuple(cell) not in self.unsafe

    def safe_cells(self) -> List[Tuple[int, int]]:
        return [(x, y) for x in range(self.width) for y in range(self.height) if self.is_safe((x, y))]

    def signature(self, cell: Tuple[int, int]) -> str:
        """Blocked bits for left/right/down/up plus the building letter."""
        x, y = cell
        bits = "".join(
            "0" if self.is_safe(c) else "1"
            for c in ((x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1))
        )
        if tuple(cell) in self.bank_cells:
            return bits + "b"
        if tuple(cell) in self.store_cells:
            return bits + "s"
        return bits + "-"

    def to_dict(self) -> Dict[str, Any]:
        doc = super().to_dict()
        doc["banks"] = {name: list(cell) for name, cell in self.banks}
        doc["stores"] = {name: list(cell) for name, cell in self.stores}
        return doc


SV_MOVES = {"left": (-1, 0), "right": (1, 0), "down": (0, -1), "up": (0, 1)}


def build_store_visit(cfg: StoreVisitConfig,
                      pref_text: Optional[str] = None) -> Tuple[GPomdp, bp.BsqPreference]:
    cells = cfg.safe_cells()
    bank_cells = set(cfg.bank_cells)
    store_cells = set(cfg.store_cells)
    variables = [
        ("ax()", tuple(range(cfg.width)) + (-1,)),
        ("ay()", tuple(range(cfg.height)) + (-1,)),
        ("vbank()", (False, True)),
        ("status()", ("active", "dead", "done")),
    ]
    states = [(x, y, v, "active") for x, y in cells for v in (False, True)]
    dead, done = (-1, -1, False, "dead"), (-1, -1, True, "done")
    states += [dead, done]
    signatures = sorted({cfg.signature(c) for c in cells})

    def transition(sd: Dict[str, Any], action: str):
        if sd["status()"] != "active":
            yield (sd["ax()"], sd["ay()"], sd["vbank()"], sd["status()"]), 1.0
            return
        x, y, vbank = sd["ax()"], sd["ay()"], sd["vbank()"]
        if action in SV_MOVES:
            dx, dy = SV_MOVES[action]
            cell = (x + dx, y + dy)
            if not cfg.in_grid(cell):
                cell = (x, y)
            if not cfg.is_safe(cell):
                yield dead, 1.0
                return
            x, y = cell
        elif action == "visit":
            if (x, y) in store_cells and vbank:
                yield done, 1.0
                return
            if (x, y) in bank_cells:
                vbank = True
        yield (x, y, vbank, "active"), 1.0

    def observe(sd: Dict[str, Any], action: str):
        if action != "scan" or sd["status()"] != "active":
            yield "none", 1.0
            return
        truth = cfg.signature((sd["ax()"], sd["ay()"]))
        if len(signatures) == 1:
            yield truth, 1.0
            return
        yield truth, cfg.scan_accuracy
        miss = (1.0 - cfg.scan_accuracy) / (len(signatures) - 1)
        for label in signatures:
            if label != truth:
                yield label, miss

    derived = {
        f"loc(agent,{x},{y})": (lambda sd, x=x, y=y: sd["status()"] == "active"
                                and sd["ax()"] == x and sd["ay()"] == y)
        for x in range(cfg.width) for y in range(cfg.height)
    }
    statics: Dict[str, Any] = {}
    for name, (x, y) in cfg.banks:
        statics[f"bank({name})"] = True
        statics[f"loc({name},{x},{y})"] = True
    for name, (x, y) in cfg.stores:
        statics[f"store({name})"] = True
        statics[f"loc({name},{x},{y})"] = True
    for x, y in cells:
        statics[f"is_safe({x},{y})"] = True

    model = gc.build_model(
        "store_visit", variables, states,
        actions=("left", "right", "up", "down", "visit", "scan"),
        observations=("none",) + tuple(signatures),
        transition=transition, observe=observe,
        goal="status() == done", horizon=cfg.horizon,
        initial={(x, y, False, "active"): 1.0 / len(cfg.start_cells) for x, y in cfg.start_cells},
        constant_sets={
            "XS": tuple(range(cfg.width)), "YS": tuple(range(cfg.height)),
            "BANKS": tuple(n for n, _ in cfg.banks), "STORES": tuple(n for n, _ in cfg.stores),
            "STATUSES": ("active", "dead", "done"),
        },
        symbols=("agent",),
        observable_functions=("is_safe", "bank", "store"),
        derived=derived, statics=statics,
        static_functions=("loc", "bank", "store", "is_safe"),
    )
    return model, _preference(model, "store_visit", pref_text)


# --------------------------------------------------------------------------- #
# Registry
# --------------------------------------------------------------------------- #
class DomainEntry(NamedTuple):
    name: str
    config_cls: type
    builder: Callable[..., Tuple[GPomdp, bp.BsqPreference]]


DOMAINS: Dict[str, DomainEntry] = {
    "spaceship_repair": DomainEntry("spaceship_repair", SpaceshipRepairConfig, build_spaceship_repair),
    "lane_merger": DomainEntry("lane_merger", LaneMergerConfig, build_lane_merger),
    "graph_rock_sample": DomainEntry("graph_rock_sample", GraphRockSampleConfig, build_graph_rock_sample),
    "store_visit": DomainEntry("store_visit", StoreVisitConfig, build_store_visit),
}
ALIASES = {"sr": "spaceship_repair", "lm": "lane_merger", "grs": "graph_rock_sample", "sv": "store_visit"}


def domain_entry(name: str) -> DomainEntry:
    key = ALIASES.get(name, name)
    try:
        return DOMAINS[key]
    except KeyError:
        known = ", ".join(sorted(ALIASES) + sorted(DOMAINS))
        raise DomainConfigError(f"unknown domain {name!r} (known: {known})") from None


def default_path(name: str, suffix: str) -> str:
    return os.path.join(DOMAIN_DIR, f"{domain_entry(name).name}.{suffix}")


def _read_text(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _preference(model: GPomdp, name: str, pref_text: Optional[str]) -> bp.BsqPreference:
    if pref_text is None:
        pref_text = _read_text(default_path(name, "bsq"))
    pref = bp.parse_preference(pref_text, model)
    logger.debug("preference %s: %d rules, %d parameters", pref.name, len(pref.rules), pref.n_params)
    return pref


def load_config(name: str, config_path: Optional[str] = None):
    entry = domain_entry(name)
    with open(config_path or default_path(name, "json"), encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DomainConfigError(f"{fh.name}: {exc}") from exc
    return entry.config_cls.from_dict(doc)


def load_domain(name: str, config_path: Optional[str] = None, pref_path: Optional[str] = None,
                horizon: Optional[int] = None) -> Tuple[GPomdp, bp.BsqPreference, Any]:
    """Build ``(model, preference, config)`` for a short or long domain name."""
    entry = domain_entry(name)
    cfg = load_config(name, config_path)
    if horizon is not None:
        cfg = replace(cfg, horizon=int(horizon))
    pref_text = _read_text(pref_path) if pref_path else None
    model, pref = entry.builder(cfg, pref_text)
    logger.info("loaded %s: %d states, %d rules", entry.name, model.n_states, len(pref.rules))
    return model, pref, cfg


def iter_domains() -> Iterator[str]:
    return iter(DOMAINS)
