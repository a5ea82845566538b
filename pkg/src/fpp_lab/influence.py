"""Monte Carlo edge influences p_e = P(e in gamma(0, v)) and the sums built on them."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geodesic import shortest_path
from .lattice import Edge, as_point, edge_centers, l1
from .weights import EdgeEnvironment, WeightDistribution

DEFAULT_EPS_GRID = (0.3, 0.2, 0.1, 0.05, 0.02)
Z95 = 1.959963984540054


def wilson_interval(k, n, z: float = Z95):
    """Wilson score interval for ``k`` successes out of ``n``; vectorized."""
    k = np.asarray(k, dtype=float)
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return np.clip(center - half, 0.0, 1.0), np.clip(center + half, 0.0, 1.0)


def _normalize_ranges(ranges: Iterable[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    out: list[list[int]] = []
    for lo, hi in sorted(ranges):
        if out and lo < out[-1][1]:
            raise ValueError(f"overlapping seed ranges at {lo}")
        if out and lo == out[-1][1]:
            out[-1][1] = hi
        else:
            out.append([lo, hi])
    return tuple((lo, hi) for lo, hi in out)


@dataclass
class InfluenceField:
    """Hit counts of each edge over ``trials`` independent geodesics ``gamma(0, target)``."""

    target: tuple
    trials: int
    hits: dict = field(default_factory=dict)
    seeds: tuple = ()  # half-open ranges of environment seeds used

    @property
    def dim(self) -> int:
        return len(self.target)

    def p_hat(self, e: Edge) -> float:
        return self.hits.get(e, 0) / self.trials

    def edges(self) -> list[Edge]:
        return sorted(self.hits)

    def arrays(self) -> tuple[list[Edge], np.ndarray]:
        es = self.edges()
        return es, np.array([self.hits[e] for e in es], dtype=float) / self.trials

    @property
    def total_hits(self) -> int:
        return int(sum(self.hits.values()))

    @property
    def mean_length(self) -> float:
        return self.total_hits / self.trials

    def merge(self, other: "InfluenceField") -> "InfluenceField":
        if self.target != other.target:
            raise ValueError("cannot merge fields with different targets")
        hits = dict(self.hits)
        for e, k in other.hits.items():
            hits[e] = hits.get(e, 0) + k
        return InfluenceField(self.target, self.trials + other.trials, hits,
                              _normalize_ranges(self.seeds + other.seeds))

    def __eq__(self, other) -> bool:
        if not isinstance(other, InfluenceField):
            return NotImplemented
        return (self.target == other.target and self.trials == other.trials
                and self.hits == other.hits and self.seeds == other.seeds)

    def to_csv(self) -> str:
        es, p = self.arrays()
        lo, hi = wilson_interval(p * self.trials, self.trials) if es else ((), ())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"edge_base_{k}" for k in range(self.dim)] + ["axis", "hits", "trials", "p_hat", "ci_lo", "ci_hi"])
        for e, pe, l, h in zip(es, p, lo, hi):
            w.writerow(list(e.base) + [e.axis, self.hits[e], self.trials, repr(float(pe)), repr(float(l)), repr(float(h))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, target: Sequence[int], seeds=()) -> "InfluenceField":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        d = header.index("axis")
        hits, trials = {}, None
        for r in body:
            e = Edge(tuple(int(x) for x in r[:d]), int(r[d]))
            hits[e] = int(r[d + 1])
            trials = int(r[d + 2])
        return cls(as_point(target), trials or 0, hits, tuple(tuple(s) for s in seeds))

    def metadata(self, dist: WeightDistribution | None = None) -> dict:
        meta = {"v": list(self.target), "d": self.dim, "trials": self.trials,
                "seeds": [list(s) for s in self.seeds]}
        if dist is not None:
            meta["distribution"] = dist.describe()
        return meta


def _influence_chunk(args) -> InfluenceField:
    dist, v, seeds, method = args
    origin = (0,) * len(v)
    hits: dict = {}
    for s in range(*seeds):
        g = shortest_path(EdgeEnvironment(dist, s), origin, v, method=method)
        for e in g.edges:
            hits[e] = hits.get(e, 0) + 1
    return InfluenceField(v, seeds[1] - seeds[0], hits, (seeds,))


def _chunks(lo: int, hi: int, parts: int) -> list[tuple[int, int]]:
    edges = np.linspace(lo, hi, parts + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges, edges[1:]) if b > a]


def estimate_influence(dist: WeightDistribution, v: Sequence[int], trials: int, master_seed: int,
                       offset: int = 0, workers: int = 1, method: str = "dijkstra") -> InfluenceField:
    """Count edge visits of ``gamma(0, v)`` over environments seeded ``master_seed + offset + i``."""
    v = as_point(v)
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if l1(v) < 2:
        raise ValueError("need |v|_1 >= 2")
    lo = master_seed + offset
    if workers <= 1:
        return _influence_chunk((dist, v, (lo, lo + trials), method))
    parts = _chunks(lo, lo + trials, 4 * workers)
    field_ = InfluenceField(v, 0)
    with ProcessPoolExecutor(workers) as ex:
        for part in ex.map(_influence_chunk, [(dist, v, p, method) for p in parts]):
            field_ = field_.merge(part)
    return field_


# ---------------------------------------------------------------------------
# thresholded sets and sums


@dataclass(frozen=True)
class InfluenceSet:
    """``A_eps`` from point estimates, with Wilson-bound variants.

    ``lower`` keeps edges whose 95% lower bound clears ``epsilon``; ``upper``
    those whose upper bound does (among visited edges only).
    """

    epsilon: float
    edges: frozenset
    lower: frozenset
    upper: frozenset

    def __len__(self) -> int:
        return len(self.edges)


def influence_set(field_: InfluenceField, epsilon: float) -> InfluenceSet:
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    es, p = field_.arrays()
    if not es:
        return InfluenceSet(epsilon, frozenset(), frozenset(), frozenset())
    lo, hi = wilson_interval(p * field_.trials, field_.trials)
    pick = lambda mask: frozenset(e for e, m in zip(es, mask) if m)  # noqa: E731
    return InfluenceSet(epsilon, pick(p >= epsilon), pick(lo >= epsilon), pick(hi >= epsilon))


def lp_sum(field_: InfluenceField, beta: float) -> float:
    if beta < 1:
        raise ValueError(f"beta must be >= 1, got {beta}")
    _, p = field_.arrays()
    return float(np.sum(p**beta))


def trivial_count_bound_check(field_: InfluenceField, eps_grid: Sequence[float] = DEFAULT_EPS_GRID) -> bool:
    """Markov bound ``|A_eps| <= sum_e p_e / eps`` on every grid value."""
    if not field_.hits:
        raise ValueError("empty field")
    _, p = field_.arrays()
    total = p.sum()
    # relative slack absorbs the rounding in p_e = hits / trials
    return all(np.count_nonzero(p >= eps) <= total / eps * (1 + 1e-12) for eps in eps_grid)


# ---------------------------------------------------------------------------
# smooth envelopes and the ratio R


class SmoothEnvelope:
    """``q_e = max_{e' in generators} exp(-|e - e'| / log n)``.

    ``values`` holds q on every edge where it is at least ``floor``; ``value``
    evaluates q exactly anywhere.
    """

    def __init__(self, generators: Iterable[Edge], n: float, floor: float = 1e-6):
        self.generators = sorted(set(generators))
        if not self.generators:
            raise ValueError("generators must be non-empty")
        if not n >= 3:
            raise ValueError(f"need n >= 3 so that log n > 1, got {n}")
        self.n = float(n)
        self.scale = math.log(n)
        self.floor = floor
        self.dim = self.generators[0].dim
        self._tree = cKDTree(edge_centers(self.generators))
        self.values = self._materialize()

    def value(self, e: Edge) -> float:
        dist, _ = self._tree.query(e.center)
        return math.exp(-dist / self.scale)

    def value_array(self, edges: Sequence[Edge]) -> np.ndarray:
        if not edges:
            return np.zeros(0)
        dist, _ = self._tree.query(edge_centers(edges))
        return np.exp(-dist / self.scale)

    def _materialize(self) -> dict:
        reach = self.scale * math.log(1.0 / self.floor)
        pad = int(math.ceil(reach)) + 1
        base = np.array([g.base for g in self.generators])
        lo, hi = base.min(0) - pad, base.max(0) + pad
        mesh = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij"), -1)
        pts = mesh.reshape(-1, self.dim)
        out = {}
        for k in range(self.dim):
            centers = pts.astype(float)
            centers[:, k] += 0.5
            dist, _ = self._tree.query(centers, distance_upper_bound=reach + 1e-9)
            ok = np.isfinite(dist)
            q = np.exp(-dist[ok] / self.scale)
            keep = q >= self.floor
            for p, qv in zip(pts[ok][keep].tolist(), q[keep].tolist()):
                out[Edge(tuple(p), k)] = qv
        return out

    def sums(self) -> tuple[float, float]:
        q = np.fromiter(self.values.values(), dtype=float)
        return float(q.sum()), float((q * q).sum())

    @property
    def l2_norm(self) -> float:
        return math.sqrt(self.sums()[1])


def smooth_envelope(generators: Iterable[Edge], n: float, floor: float = 1e-6) -> SmoothEnvelope:
    return SmoothEnvelope(generators, n, floor)


def proposition_ratio(q: SmoothEnvelope, field_: InfluenceField, d: int) -> float:
    """``(sum q p)^d / ((sum q^2)^((d-1)/2) * sum q)``."""
    if q.dim != field_.dim:
        raise ValueError("envelope and field live in different dimensions")
    s1, s2 = q.sums()
    if s1 <= 0:
        raise ValueError("envelope vanishes below its floor")
    es, p = field_.arrays()
    qp = float(np.dot(q.value_array(es), p)) if es else 0.0
    return qp**d / (s2 ** ((d - 1) / 2) * s1)
