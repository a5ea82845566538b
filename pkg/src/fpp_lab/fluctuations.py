"""Transversal fluctuations of geodesics, power-law fits and the nice-edge density probe."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .geodesic import Geodesic
from .lattice import (Box, Edge, as_point, in_slab, make_edge, neighbors, slab_coordinate, transversal_distance,
                      unit)
from .weights import GaussianRepresentation, NiceSet, nice_set


def _slab_distances(g: Geodesic, v: Sequence[int], ell: float) -> np.ndarray:
    pts = g.vertex_array()
    along = slab_coordinate(pts, v)
    dist = transversal_distance(pts, v)
    return dist[in_slab(along, ell)]


def outside_cylinder_count(g: Geodesic, v: Sequence[int], ell: float, r: float) -> int:
    """Vertices with ``0 <= (u, v_hat) <= ell`` farther than ``r`` from the line through 0 and v."""
    unit(v)
    if ell <= 0:
        raise ValueError("ell must be positive")
    if r < 0:
        raise ValueError("r must be non-negative")
    return int(np.count_nonzero(_slab_distances(g, v, ell) > r))


def max_transversal_deviation(g: Geodesic, v: Sequence[int]) -> float:
    return float(transversal_distance(g.vertex_array(), v).max())


def largest_radius_constant(distances: Sequence[np.ndarray], n: float, exponent: float,
                            need: float | None = None) -> float:
    """Supremum of ``c`` with mean #{dist > c n^exponent} >= need (default n/2).

    ``distances`` holds, per trial, the transversal distances of the slab
    vertices. The mean count is a step function of ``r``, so the supremum is
    the K-th largest pooled distance with ``K = ceil(trials * need)``.
    """
    need = n / 2 if need is None else need
    trials = len(distances)
    pooled = np.sort(np.concatenate([np.asarray(x, dtype=float) for x in distances]))[::-1]
    k = math.ceil(trials * need - 1e-9)
    if k <= 0:
        return math.inf
    if k > pooled.size or pooled[k - 1] <= 0:
        return 0.0
    return float(pooled[k - 1] / n**exponent)


@dataclass(frozen=True)
class FluctuationSample:
    v: tuple
    ell: float
    radii: tuple
    outside_counts: tuple
    max_dev: float


def fluctuation_sample(g: Geodesic, v: Sequence[int], ell: float, radii: Sequence[float]) -> FluctuationSample:
    dist = _slab_distances(g, v, ell)
    counts = tuple(int(np.count_nonzero(dist > r)) for r in radii)
    return FluctuationSample(as_point(v), float(ell), tuple(float(r) for r in radii), counts,
                             max_transversal_deviation(g, v))


@dataclass(frozen=True)
class ExponentFit:
    pairs: tuple
    slope: float
    intercept: float
    r_squared: float
    slope_stderr: float

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        dof = len(self.pairs) - 2
        if dof <= 0 or not np.isfinite(self.slope_stderr):
            return (math.nan, math.nan)
        t = stats.t.ppf(0.5 + level / 2, dof)
        return (self.slope - t * self.slope_stderr, self.slope + t * self.slope_stderr)

    def as_dict(self) -> dict:
        lo, hi = self.ci()
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "slope_stderr": self.slope_stderr, "ci95": [lo, hi],
                "pairs": [list(p) for p in self.pairs]}


def fit_exponent(pairs: Sequence[tuple[float, float]]) -> ExponentFit:
    """Least squares of log(statistic) on log(scale)."""
    pairs = tuple((float(x), float(y)) for x, y in pairs)
    if len(pairs) < 3:
        raise ValueError("need at least 3 (scale, statistic) pairs")
    arr = np.asarray(pairs)
    if np.any(arr <= 0):
        raise ValueError("scales and statistics must be positive")
    lx, ly = np.log(arr[:, 0]), np.log(arr[:, 1])
    if np.ptp(lx) == 0:
        raise ValueError("scales must not all coincide")
    res = stats.linregress(lx, ly)
    if np.ptp(ly) == 0:
        r2, slope, stderr = 1.0, 0.0, 0.0
    else:
        r2, slope, stderr = float(res.rvalue**2), float(res.slope), float(res.stderr)
    return ExponentFit(pairs, slope, float(res.intercept), min(max(r2, 0.0), 1.0), stderr)


# ---------------------------------------------------------------------------
# E(ell, r) edges


def slab_cylinder_edges(v: Sequence[int], ell: float, r: float) -> set:
    """Edges with at least one endpoint in ``cyl(0, v, r)`` and ``0 <= (x, v_hat) <= ell``."""
    vh = unit(v)
    d = len(v)
    # the slab-cylinder piece lies within ell + r of the origin along every axis
    ext = int(math.ceil(ell + r)) + 1
    mesh = np.stack(np.meshgrid(*[np.arange(-ext, ext + 1)] * d, indexing="ij"), -1).reshape(-1, d)
    along = mesh @ vh
    dist = transversal_distance(mesh, v)
    inside = mesh[in_slab(along, ell) & (dist <= r)]
    out = set()
    for p in map(tuple, inside.tolist()):
        for q in neighbors(p):
            out.add(make_edge(p, q))
    return out


# ---------------------------------------------------------------------------
# nice-edge density


def path_density_check(env, path: Sequence[Edge], delta: float, rep: GaussianRepresentation | None = None,
                       nice: NiceSet | None = None) -> float:
    """Fraction of ``path`` edges whose weight lies in ``B_delta``."""
    if not path:
        raise ValueError("empty path")
    if not delta > 0:
        raise ValueError("delta must be positive")
    if nice is None:
        nice = nice_set(rep or GaussianRepresentation(env.dist), delta)
    w = np.array([env.weight(e) for e in path])
    return float(np.mean(nice.contains(w)))


def omega_violation_scan(env, region: Box, k_min: int, samples: int, delta: float, seed: int = 0,
                         k_max: int | None = None, rep: GaussianRepresentation | None = None) -> int:
    """Count sampled paths whose ``B_delta`` fraction is below one half.

    Paths are non-backtracking random walks inside ``region`` with length drawn
    uniformly from ``[k_min, k_max]`` (``k_max`` defaults to ``k_min``).
    """
    if k_min < 1:
        raise ValueError("k_min must be at least 1")
    k_max = k_min if k_max is None else k_max
    nice = nice_set(rep or GaussianRepresentation(env.dist), delta)
    d = region.dim
    shape = np.asarray(region.shape)
    good = nice.contains(env.weights_on_box(region))
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(samples):
        k = int(rng.integers(k_min, k_max + 1))
        x = rng.integers(0, shape)
        last = None
        nice_count = 0
        for _step in range(k):
            moves = []
            for ax in range(d):
                for s in (-1, 1):
                    y = x.copy()
                    y[ax] += s
                    if 0 <= y[ax] < shape[ax] and (last is None or not np.array_equal(y, last)):
                        moves.append((ax, s, y))
            ax, s, y = moves[int(rng.integers(len(moves)))]
            base = x if s == 1 else y
            nice_count += bool(good[(ax,) + tuple(base)])
            last, x = x, y
        if nice_count < k / 2:
            violations += 1
    return violations
