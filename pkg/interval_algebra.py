# interval_algebra.py
# Exact set algebra over axis-aligned half-open boxes in parameter space.
#
# Every region the solver reasons about is an IntervalSet: the satisfied set of
# a rule condition, a leaf interval, a braid cell, a PRS partition. Values are
# immutable and every operation returns a new canonical set, so sets are safe
# to share between threads and worker processes.
#
# Canonical form:
#   * Boxes are [lo, hi) in every dimension. An empty set holds no boxes.
#   * The region is rasterised onto the grid spanned by its own breakpoints,
#     cut positions that separate identical slabs are dropped, and the covered
#     cells are merged greedily (last axis first) in lexicographic order.
#     The reduced grid depends only on the region, so two sets describing the
#     same region compare equal whatever operations produced them.
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple
import math

import numpy as np


class IntervalError(ValueError):
    """Dimension mismatch, bad constraint, or sampling from an empty set."""


# Comparison of a parameter against a bound. Both strict and non-strict forms
# map onto half-open boxes: "theta < c" and "theta <= c" give [lo, c),
# "theta > c" and "theta >= c" give [c, hi).
BELOW_OPS = ("<", "<=", "≤")
ABOVE_OPS = (">", ">=", "≥")


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


@dataclass(frozen=True)
class ParamSpace:
    """Ordered parameter dimensions ``(name, lo, hi)``; the domain D_Θ."""

    dims: Tuple[Tuple[str, float, float], ...]

    def __post_init__(self) -> None:
        dims = tuple((str(n), float(lo), float(hi)) for n, lo, hi in self.dims)
        seen = set()
        for name, lo, hi in dims:
            if name in seen:
                raise IntervalError(f"duplicate parameter name {name!r}")
            seen.add(name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
                raise IntervalError(
                    f"parameter {name!r} needs finite lo < hi, got [{lo}, {hi}]"
                )
        object.__setattr__(self, "dims", dims)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(d[0] for d in self.dims)

    @property
    def lows(self) -> Tuple[float, ...]:
        return tuple(d[1] for d in self.dims)

    @property
    def highs(self) -> Tuple[float, ...]:
        return tuple(d[2] for d in self.dims)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise IntervalError(f"unknown parameter {name!r}") from None

    def full(self) -> "IntervalSet":
        if not self.dims:
            return IntervalSet(self, (Box((), ()),))
        return IntervalSet(self, (Box(self.lows, self.highs),))

    def empty(self) -> "IntervalSet":
        return IntervalSet(self, ())

    def volume(self) -> float:
        return math.prod(hi - lo for _, lo, hi in self.dims)


@dataclass(frozen=True)
class Box:
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def is_empty(self) -> bool:
        return any(h <= l for l, h in zip(self.lo, self.hi))

    def volume(self) -> float:
        if self.is_empty():
            return 0.0
        return math.prod(h - l for l, h in zip(self.lo, self.hi))

    def contains(self, point: Sequence[float]) -> bool:
        return all(l <= p < h for l, p, h in zip(self.lo, point, self.hi))

    def intersect(self, other: "Box") -> Optional["Box"]:
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        box = Box(lo, hi)
        return None if box.is_empty() else box

    def subtract(self, other: "Box") -> List["Box"]:
        """Dimension sweep: at most two slabs peeled off per axis."""
        inner = self.intersect(other)
        if inner is None:
            return [self]
        lo, hi = list(self.lo), list(self.hi)
        pieces: List[Box] = []
        for d in range(len(lo)):
            if lo[d] < inner.lo[d]:
                cut = list(hi)
                cut[d] = inner.lo[d]
                pieces.append(Box(tuple(lo), tuple(cut)))
                lo[d] = inner.lo[d]
            if inner.hi[d] < hi[d]:
                cut = list(lo)
                cut[d] = inner.hi[d]
                pieces.append(Box(tuple(cut), tuple(hi)))
                hi[d] = inner.hi[d]
        return pieces

    def dump(self) -> str:
        return "x".join(f"[{_fmt(l)},{_fmt(h)})" for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class IntervalSet:
    space: ParamSpace
    boxes: Tuple[Box, ...]

    @classmethod
    def from_boxes(cls, space: ParamSpace, boxes: Iterable[Box]) -> "IntervalSet":
        """Canonical union of ``boxes`` (which may overlap)."""
        return cls(space, _canonical(space, list(boxes)))

    @property
    def is_empty(self) -> bool:
        return not self.boxes

    def sort_key(self) -> Tuple:
        return tuple((b.lo, b.hi) for b in self.boxes)

    def dump(self, sep: str = "\n") -> str:
        if not self.boxes:
            return "{}"
        return sep.join(b.dump() for b in self.boxes)

    def __and__(self, other: "IntervalSet") -> "IntervalSet":
        return intersect(self, other)

    def __or__(self, other: "IntervalSet") -> "IntervalSet":
        return union(self, other)

    def __sub__(self, other: "IntervalSet") -> "IntervalSet":
        return subtract(self, other)

    def __contains__(self, point: Sequence[float]) -> bool:
        return contains(self, point)

    def __str__(self) -> str:
        return self.dump(" u ")


def _canonical(space: ParamSpace, boxes: List[Box]) -> Tuple[Box, ...]:
    boxes = [b for b in boxes if not b.is_empty()]
    if not boxes:
        return ()
    n = space.ndim
    if n == 0:
        return (Box((), ()),)

    cuts = [
        np.unique(np.array([v for b in boxes for v in (b.lo[d], b.hi[d])], dtype=float))
        for d in range(n)
    ]
    grid = np.zeros(tuple(len(c) - 1 for c in cuts), dtype=bool)
    for b in boxes:
        grid[tuple(
            slice(int(np.searchsorted(cuts[d], b.lo[d])),
                  int(np.searchsorted(cuts[d], b.hi[d])))
            for d in range(n)
        )] = True

    # Drop cut positions whose neighbouring slabs are identical.
    for d in range(n):
        if grid.shape[d] < 2:
            continue
        slabs = np.moveaxis(grid, d, 0).reshape(grid.shape[d], -1)
        keep = np.concatenate(([True], np.any(slabs[1:] != slabs[:-1], axis=1)))
        kept = np.flatnonzero(keep)
        grid = np.take(grid, kept, axis=d)
        cuts[d] = np.append(cuts[d][:-1][keep], cuts[d][-1])

    used = np.zeros_like(grid)
    out: List[Box] = []
    for start in zip(*np.nonzero(grid)):
        if used[start]:
            continue
        stop = [s + 1 for s in start]
        for d in reversed(range(n)):
            while stop[d] < grid.shape[d]:
                slab = tuple(
                    slice(stop[k], stop[k] + 1) if k == d else slice(start[k], stop[k])
                    for k in range(n)
                )
                if grid[slab].all() and not used[slab].any():
                    stop[d] += 1
                else:
                    break
        used[tuple(slice(start[k], stop[k]) for k in range(n))] = True
        out.append(Box(
            tuple(float(cuts[k][start[k]]) for k in range(n)),
            tuple(float(cuts[k][stop[k]]) for k in range(n)),
        ))
    out.sort(key=lambda b: (b.lo, b.hi))
    return tuple(out)


def _same_space(a: IntervalSet, b: IntervalSet) -> None:
    if a.space != b.space:
        raise IntervalError(
            f"dimension mismatch: {a.space.names} vs {b.space.names}"
        )


# --------------------------------------------------------------------------- #
# Operations
# --------------------------------------------------------------------------- #
def from_constraint(space: ParamSpace, dim: int, op: str, bound: float) -> IntervalSet:
    if not isinstance(dim, (int, np.integer)) or not 0 <= dim < space.ndim:
        raise IntervalError(f"invalid dimension index {dim!r} for {space.ndim} parameters")
    bound = float(bound)
    if not math.isfinite(bound):
        raise IntervalError(f"constraint bound must be finite, got {bound}")
    _, lo, hi = space.dims[dim]
    if op in BELOW_OPS:
        seg = (lo, min(bound, hi))
    elif op in ABOVE_OPS:
        seg = (max(bound, lo), hi)
    else:
        raise IntervalError(f"unsupported parameter comparison {op!r}")
    if seg[0] >= seg[1]:
        return space.empty()
    lows, highs = list(space.lows), list(space.highs)
    lows[dim], highs[dim] = seg
    return IntervalSet(space, (Box(tuple(lows), tuple(highs)),))


def intersect(a: IntervalSet, b: IntervalSet) -> IntervalSet:
    _same_space(a, b)
    if a.is_empty or b.is_empty:
        return a.space.empty()
    parts = []
    for x in a.boxes:
        for y in b.boxes:
            z = x.intersect(y)
            if z is not None:
                parts.append(z)
    return IntervalSet.from_boxes(a.space, parts)


def union(a: IntervalSet, b: IntervalSet) -> IntervalSet:
    _same_space(a, b)
    return IntervalSet.from_boxes(a.space, a.boxes + b.boxes)


def subtract(a: IntervalSet, b: IntervalSet) -> IntervalSet:
    _same_space(a, b)
    if a.is_empty or b.is_empty:
        return a
    out: List[Box] = []
    for box in a.boxes:
        pieces = [box]
        for cutter in b.boxes:
            pieces = [p for piece in pieces for p in piece.subtract(cutter)]
            if not pieces:
                break
        out.extend(pieces)
    return IntervalSet.from_boxes(a.space, out)


def complement(a: IntervalSet) -> IntervalSet:
    return subtract(a.space.full(), a)


def volume(a: IntervalSet) -> float:
    return math.fsum(b.volume() for b in a.boxes)


def contains(a: IntervalSet, point: Sequence[float]) -> bool:
    if len(point) != a.space.ndim:
        raise IntervalError(
            f"point has {len(point)} coordinates, space has {a.space.ndim}"
        )
    return any(b.contains(point) for b in a.boxes)


def contains_many(a: IntervalSet, points: np.ndarray) -> np.ndarray:
    """Vectorised membership for an ``(m, n)`` array of points."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != a.space.ndim:
        raise IntervalError(f"expected (m, {a.space.ndim}) points, got {pts.shape}")
    hit = np.zeros(len(pts), dtype=bool)
    for b in a.boxes:
        lo, hi = np.asarray(b.lo), np.asarray(b.hi)
        hit |= np.all((pts >= lo) & (pts < hi), axis=1)
    return hit


def sample_uniform(a: IntervalSet, rng: np.random.Generator) -> Tuple[float, ...]:
    weights = np.array([b.volume() for b in a.boxes], dtype=float)
    total = float(weights.sum())
    if total <= 0.0:
        raise IntervalError("cannot sample from an empty or zero-volume interval")
    k = int(rng.choice(len(weights), p=weights / total)) if len(weights) > 1 else 0
    box = a.boxes[k]
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    point = lo + rng.random(len(lo)) * (hi - lo)
    # lo + u*(hi-lo) can round up onto the excluded upper face.
    point = np.where(point < hi, point, np.nextafter(hi, lo))
    return tuple(float(x) for x in point)


def tiling_error(sets: Sequence[IntervalSet], space: ParamSpace,
                 tol: float = 1e-9) -> Optional[str]:
    """None if ``sets`` are nonempty, pairwise disjoint and cover ``space``.

    Otherwise a one-line description of the first violation found.
    """
    total = 0.0
    for i, a in enumerate(sets):
        if a.space != space:
            return f"set {i} lives in {a.space.names}, expected {space.names}"
        if a.is_empty:
            return f"set {i} is empty"
        total += volume(a)
    for i, a in enumerate(sets):
        for j in range(i + 1, len(sets)):
            if not intersect(a, sets[j]).is_empty:
                return f"sets {i} and {j} overlap: {a} / {sets[j]}"
    if abs(total - space.volume()) > tol:
        return f"volumes sum to {total!r}, domain volume is {space.volume()!r}"
    return None
