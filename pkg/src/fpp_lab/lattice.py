"""Geometry of Z^d: points, canonical edges, confinement regions, cylinders and slabs.

Points are plain integer tuples. An edge is stored canonically as its
lexicographically smaller endpoint plus the axis along which it points, so
``Edge`` instances compare and hash as unique keys and sort in canonical order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

Point = tuple  # tuple[int, ...]


class Edge(NamedTuple):
    base: tuple
    axis: int

    @property
    def dim(self) -> int:
        return len(self.base)

    @property
    def tip(self) -> tuple:
        t = list(self.base)
        t[self.axis] += 1
        return tuple(t)

    @property
    def endpoints(self) -> tuple[tuple, tuple]:
        return self.base, self.tip

    @property
    def center(self) -> np.ndarray:
        c = np.asarray(self.base, dtype=float)
        c[self.axis] += 0.5
        return c

    def translate(self, h: Sequence[int]) -> "Edge":
        return Edge(tuple(int(x) + int(y) for x, y in zip(self.base, h)), self.axis)


def as_point(p: Iterable[int]) -> tuple:
    return tuple(int(x) for x in p)


def make_edge(u: Sequence[int], w: Sequence[int]) -> Edge:
    """Canonical edge between two adjacent lattice points."""
    u, w = as_point(u), as_point(w)
    if len(u) != len(w):
        raise ValueError("dimension mismatch")
    diff = [y - x for x, y in zip(u, w)]
    nz = [k for k, dk in enumerate(diff) if dk != 0]
    if len(nz) != 1 or abs(diff[nz[0]]) != 1:
        raise ValueError(f"{u} and {w} are not adjacent")
    k = nz[0]
    return Edge(u, k) if diff[k] == 1 else Edge(w, k)


def neighbors(u: Sequence[int]) -> Iterator[tuple]:
    u = as_point(u)
    for k in range(len(u)):
        for s in (-1, 1):
            w = list(u)
            w[k] += s
            yield tuple(w)


def l1(u: Sequence[int], v: Sequence[int] | None = None) -> int:
    if v is None:
        return int(sum(abs(int(x)) for x in u))
    return int(sum(abs(int(x) - int(y)) for x, y in zip(u, v)))


def l2(u: Sequence[float]) -> float:
    return math.sqrt(sum(float(x) ** 2 for x in u))


def edge_center_distance(e: Edge, f: Edge) -> float:
    """Euclidean distance between the midpoints of two edges."""
    if e.dim != f.dim:
        raise ValueError(f"dimension mismatch: {e.dim} vs {f.dim}")
    if e == f:
        return 0.0
    return float(np.linalg.norm(e.center - f.center))


def edge_centers(edges: Sequence[Edge]) -> np.ndarray:
    """(m, d) array of edge midpoints."""
    if not edges:
        return np.zeros((0, 0))
    c = np.array([e.base for e in edges], dtype=float)
    c[np.arange(len(edges)), [e.axis for e in edges]] += 0.5
    return c


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Box:
    """Axis-aligned box of lattice points, ``lo <= x <= hi`` coordinatewise."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("dimension mismatch")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("empty box")

    @classmethod
    def cube(cls, side: int, d: int, origin: Sequence[int] | None = None) -> "Box":
        o = as_point(origin) if origin is not None else (0,) * d
        return cls(o, tuple(x + side - 1 for x in o))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    def contains(self, u: Sequence[int]) -> bool:
        return all(a <= x <= b for a, x, b in zip(self.lo, u, self.hi))

    def contains_array(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi)), axis=-1)

    def intersect(self, other: "Box") -> "Box":
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        return Box(lo, hi)

    def bounding_box(self) -> "Box":
        return self

    def points(self) -> list[tuple]:
        rng = [range(a, b + 1) for a, b in zip(self.lo, self.hi)]
        return [tuple(p) for p in np.array(np.meshgrid(*rng, indexing="ij")).reshape(self.dim, -1).T.tolist()]


@dataclass(frozen=True)
class ConfinementRegion:
    """l1 ellipse ``{w : |w - source|_1 + |w - sink|_1 <= budget + margin}``.

    ``budget`` is ``(b/a) |source - sink|_1``; ``margin`` is a slack in lattice
    units that never changes which geodesic is found.
    """

    source: tuple
    sink: tuple
    budget: float
    margin: float = 2.0

    @property
    def dim(self) -> int:
        return len(self.source)

    @property
    def extent(self) -> float:
        return self.budget + self.margin

    def contains(self, u: Sequence[int]) -> bool:
        return l1(u, self.source) + l1(u, self.sink) <= self.extent

    def contains_array(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        s = np.abs(pts - np.asarray(self.source)).sum(-1) + np.abs(pts - np.asarray(self.sink)).sum(-1)
        return s <= self.extent

    def bounding_box(self) -> Box:
        # |w - s|_1 + |w - t|_1 >= |s - t|_1 + 2 dist(w_k, [s_k, t_k])
        slack = math.floor((self.extent - l1(self.source, self.sink)) / 2)
        lo, hi = [], []
        for s, t in zip(self.source, self.sink):
            lo.append(min(s, t) - slack)
            hi.append(max(s, t) + slack)
        return Box(tuple(lo), tuple(hi))


def confinement_region(u: Sequence[int], v: Sequence[int], a: float, b: float,
                       margin: float = 2.0) -> ConfinementRegion:
    """Region guaranteed to contain every geodesic vertex between ``u`` and ``v``.

    Any path with passage time at most ``b |u - v|_1`` visits only vertices
    ``w`` with ``|w - u|_1 + |w - v|_1 <= (b/a) |u - v|_1`` when weights are >= a.
    """
    if a <= 0:
        raise ValueError(f"a must be positive, got {a}")
    if b < a:
        raise ValueError(f"need a <= b, got a={a}, b={b}")
    u, v = as_point(u), as_point(v)
    return ConfinementRegion(u, v, (b / a) * l1(u, v), margin)


@dataclass(frozen=True)
class Cylinder:
    """Infinite cylinder of radius ``radius`` around the line through 0 and ``direction``."""

    direction: tuple
    radius: float

    def __post_init__(self):
        if not any(self.direction):
            raise ValueError("cylinder direction must be nonzero")

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return transversal_distance(pts, self.direction)

    def contains(self, w: Sequence[float]) -> bool:
        return bool(self.distance(np.asarray([w], dtype=float))[0] <= self.radius)


def unit(v: Sequence[int]) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("v must be nonzero")
    return v / n


# relative slack for comparisons against slab and cylinder boundaries;
# lattice points on a boundary otherwise fall either side by one ulp
GEOM_TOL = 1e-12


def transversal_distance(pts: np.ndarray, v: Sequence[int]) -> np.ndarray:
    """Distance of each row of ``pts`` to the line through 0 and ``v``.

    Values within rounding of zero are returned as exactly zero.
    """
    vh = unit(v)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    along = pts @ vh
    perp = pts - along[:, None] * vh
    dist = np.sqrt(np.maximum((perp * perp).sum(-1), 0.0))
    scale = np.abs(pts).sum(-1) + 1.0
    dist[dist <= 1e-9 * scale] = 0.0
    return dist


def in_slab(along: np.ndarray, ell: float) -> np.ndarray:
    """``0 <= along <= ell`` with boundary equality included up to rounding."""
    tol = GEOM_TOL * (abs(ell) + 1.0)
    return (along >= -tol) & (along <= ell + tol)


def slab_coordinate(pts: np.ndarray, v: Sequence[int]) -> np.ndarray:
    """Inner product ``(u, v/|v|)`` for each row of ``pts``."""
    return np.atleast_2d(np.asarray(pts, dtype=float)) @ unit(v)


def cylinder_slab_filter(points: Iterable[Sequence[int]], v: Sequence[int], ell: float,
                         r: float) -> set:
    """Points with ``0 <= (u, v_hat) <= ell`` lying in ``cyl(0, v, r)``."""
    vh = unit(v)  # raises on v == 0
    if ell <= 0:
        raise ValueError("ell must be positive")
    if r < 0:
        raise ValueError("r must be non-negative")
    pts = [as_point(p) for p in points]
    if not pts:
        return set()
    arr = np.asarray(pts, dtype=float)
    along = arr @ vh
    dist = transversal_distance(arr, v)
    keep = in_slab(along, ell) & (dist <= r)
    return {p for p, k in zip(pts, keep) if k}
