"""Finite lattices and interaction-range families.

Sites are numbered ``0..N-1`` in row-major order (last coordinate fastest).
A short-range family is built with free boundaries: a translated range is
kept only when every one of its sites lies inside the box.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SHORT_RANGE = "short_range"
MEAN_FIELD = "mean_field"
LATTICE_KINDS = (SHORT_RANGE, MEAN_FIELD)

RANDOM_FIELD = "random_field"
NEAREST_NEIGHBOR = "nearest_neighbor"
PLAQUETTE = "plaquette"
MEAN_FIELD_COMPLETE = "mean_field_complete"
CUSTOM = "custom"
FAMILY_KINDS = (RANDOM_FIELD, NEAREST_NEIGHBOR, PLAQUETTE, MEAN_FIELD_COMPLETE, CUSTOM)

# p implied by each fixed-shape family
_FAMILY_ORDER = {RANDOM_FIELD: 1, NEAREST_NEIGHBOR: 2, PLAQUETTE: 4}


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class LatticeSpec:
    d: int
    L: int
    kind: str = SHORT_RANGE

    @property
    def n_sites(self) -> int:
        if self.kind == MEAN_FIELD:
            return self.L
        return self.L**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        if self.kind == MEAN_FIELD:
            return (self.L,)
        return (self.L,) * self.d

    def index(self, coords: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(coords), self.shape))

    def coords(self, index: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(index, self.shape))


def build_lattice(d: int, L: int, kind: str = SHORT_RANGE) -> LatticeSpec:
    if kind not in LATTICE_KINDS:
        raise GeometryError(f"unknown lattice kind {kind!r}")
    if d < 1 or L < 1:
        raise GeometryError(f"lattice needs d >= 1 and L >= 1, got d={d}, L={L}")
    if kind == MEAN_FIELD:
        d = 1
    return LatticeSpec(d=int(d), L=int(L), kind=kind)


@dataclass(frozen=True)
class CouplingFamily:
    """The support ``B_p`` of one disorder species.

    ``ranges`` is a tuple of sorted site tuples, itself sorted
    lexicographically, so two families with the same content compare and
    serialize identically.
    """

    p: int
    ranges: tuple[tuple[int, ...], ...]
    kind: str
    n_sites: int
    _masks: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        canon = tuple(sorted(tuple(sorted(int(s) for s in r)) for r in self.ranges))
        if len(set(canon)) != len(canon):
            raise GeometryError("interaction ranges must be distinct")
        for r in canon:
            if len(r) != self.p or len(set(r)) != self.p:
                raise GeometryError(f"range {r} does not have {self.p} distinct sites")
            if r and (r[0] < 0 or r[-1] >= self.n_sites):
                raise GeometryError(f"range {r} has a site outside 0..{self.n_sites - 1}")
        if self.kind not in FAMILY_KINDS:
            raise GeometryError(f"unknown family kind {self.kind!r}")
        object.__setattr__(self, "ranges", canon)
        object.__setattr__(self, "_masks", _range_masks(canon, self.n_sites))

    def __len__(self) -> int:
        return len(self.ranges)

    @property
    def masks(self) -> np.ndarray:
        """One bit mask per range (bit i set iff site i is in the range)."""
        return self._masks

    @property
    def sites(self) -> np.ndarray:
        """Ranges as an ``(|B_p|, p)`` integer array."""
        return np.array(self.ranges, dtype=np.int64).reshape(len(self.ranges), self.p)

    def to_json(self) -> dict:
        return {"p": self.p, "kind": self.kind, "ranges": [list(r) for r in self.ranges]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, data: dict, n_sites: int | None = None) -> "CouplingFamily":
        ranges = [tuple(r) for r in data["ranges"]]
        if n_sites is None:
            n_sites = 1 + max((max(r) for r in ranges if r), default=-1)
        return cls(p=int(data["p"]), ranges=tuple(ranges), kind=data["kind"], n_sites=n_sites)


def _range_masks(ranges, n_sites) -> np.ndarray:
    if n_sites > 63:
        # masks only back the enumeration engine, which stops far below this
        return np.zeros(0, dtype=np.uint64)
    out = np.zeros(len(ranges), dtype=np.uint64)
    for k, r in enumerate(ranges):
        m = 0
        for s in r:
            m |= 1 << s
        out[k] = m
    return out


def _translates(lattice: LatticeSpec, offsets: Sequence[Sequence[int]]) -> list[tuple[int, ...]]:
    """All ``i + A`` fully inside the box, for a base shape given by offsets."""
    L, d = lattice.L, lattice.d
    offsets = np.asarray(offsets, dtype=np.int64)
    out = []
    for corner in itertools.product(range(L), repeat=d):
        pts = offsets + np.asarray(corner)
        if np.all((pts >= 0) & (pts < L)):
            out.append(tuple(sorted(lattice.index(pt) for pt in pts)))
    return out


def build_family(lattice: LatticeSpec, kind: str, p: int | None = None) -> CouplingFamily:
    N = lattice.n_sites
    if kind in _FAMILY_ORDER:
        expected = _FAMILY_ORDER[kind]
        if p is None:
            p = expected
        if p != expected:
            raise GeometryError(f"{kind} family requires p={expected}, got p={p}")
        if lattice.kind != SHORT_RANGE and kind != RANDOM_FIELD:
            raise GeometryError(f"{kind} family needs a short-range lattice")
    elif kind == MEAN_FIELD_COMPLETE:
        if p is None or p < 1:
            raise GeometryError("complete family needs a positive p")
    else:
        raise GeometryError(f"cannot build family of kind {kind!r}; use custom_family")
    if p > N:
        raise GeometryError(f"p={p} exceeds the number of sites N={N}")

    d = lattice.d
    if kind == RANDOM_FIELD:
        ranges = [(i,) for i in range(N)]
    elif kind == NEAREST_NEIGHBOR:
        ranges = []
        for a in range(d):
            e = [0] * d
            e[a] = 1
            ranges += _translates(lattice, [[0] * d, e])
    elif kind == PLAQUETTE:
        if d < 2:
            raise GeometryError("plaquettes need d >= 2")
        ranges = []
        for a, b in itertools.combinations(range(d), 2):
            ea = [int(k == a) for k in range(d)]
            eb = [int(k == b) for k in range(d)]
            eab = [x + y for x, y in zip(ea, eb)]
            ranges += _translates(lattice, [[0] * d, ea, eb, eab])
    else:
        ranges = list(itertools.combinations(range(N), p))
    return CouplingFamily(p=p, ranges=tuple(ranges), kind=kind, n_sites=N)


def custom_family(lattice: LatticeSpec, ranges: Iterable[Iterable[int]]) -> CouplingFamily:
    ranges = [tuple(r) for r in ranges]
    sizes = {len(r) for r in ranges}
    if len(sizes) != 1:
        raise GeometryError("custom ranges must all have the same size")
    return CouplingFamily(p=sizes.pop(), ranges=tuple(ranges), kind=CUSTOM, n_sites=lattice.n_sites)


def family_size(family: CouplingFamily) -> int:
    return len(family.ranges)


def expected_family_size(lattice: LatticeSpec, kind: str, p: int | None = None) -> int:
    """Closed-form ``|B_p|`` for the built-in family kinds."""
    L, d, N = lattice.L, lattice.d, lattice.n_sites
    if kind == RANDOM_FIELD:
        return N
    if kind == NEAREST_NEIGHBOR:
        return d * L ** (d - 1) * (L - 1)
    if kind == PLAQUETTE:
        return math.comb(d, 2) * (L - 1) ** 2 * L ** (d - 2)
    if kind == MEAN_FIELD_COMPLETE:
        return math.comb(N, p)
    raise GeometryError(f"no closed form for {kind!r}")
