"""Independent reference computations used by the tests.

Nothing here imports the numerical kernels under test: normal CDFs come from
mpmath, graph distances from scipy's csgraph, Wilson bounds from the closed
form evaluated in mpmath.
"""
from __future__ import annotations

import itertools
import math

import mpmath as mp
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

mp.mp.dps = 40


def phi_cdf(z) -> mp.mpf:
    return mp.ncdf(z)


def uniform_gplus(a: float, b: float, w: float, tau: float) -> float:
    """g+ for Uniform[a, b] in high precision: a + (b - a) Phi(Phi^-1((w - a)/(b - a)) + tau)."""
    u = mp.mpf(w - a) / (b - a)
    if u <= 0 or u >= 1:
        return float(w)
    z = mp.sqrt(2) * mp.erfinv(2 * u - 1)
    return float(a + (b - a) * mp.ncdf(z + tau))


def uniform_nice_interval(a: float, b: float, delta: float, margin: float = 0.0) -> tuple[float, float, float]:
    """Closed-form B_delta for Uniform[a, b].

    F' = (b - a) phi(z) >= delta on |z| <= z*, so unit windows [z, z + 1]
    fit when z lies in [-z*, z* - 1]. Returns (lo, hi, Gaussian measure).
    """
    target = mp.mpf(delta) * (1 + margin)
    zstar = mp.sqrt(-2 * mp.log(target * mp.sqrt(2 * mp.pi) / (b - a)))
    lo_z, hi_z = -zstar, zstar - 1
    return (float(a + (b - a) * mp.ncdf(lo_z)), float(a + (b - a) * mp.ncdf(hi_z)),
            float(mp.ncdf(hi_z) - mp.ncdf(lo_z)))


def wilson(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    k, n, z = mp.mpf(k), mp.mpf(n), mp.mpf(z)
    p = k / n
    c = (p + z**2 / (2 * n)) / (1 + z**2 / n)
    h = z * mp.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / (1 + z**2 / n)
    return float(max(c - h, 0)), float(min(c + h, 1))


def csgraph_times(weight_fn, box_lo, box_hi, source=None) -> tuple[list, np.ndarray]:
    """Passage times on a box via scipy's Dijkstra: all pairs, or one row when ``source`` is given."""
    d = len(box_lo)
    pts = list(itertools.product(*[range(a, b + 1) for a, b in zip(box_lo, box_hi)]))
    index = {p: i for i, p in enumerate(pts)}
    rows, cols, vals = [], [], []
    for p in pts:
        for k in range(d):
            q = list(p)
            q[k] += 1
            q = tuple(q)
            if q in index:
                w = weight_fn(p, k)
                rows += [index[p], index[q]]
                cols += [index[q], index[p]]
                vals += [w, w]
    g = coo_matrix((vals, (rows, cols)), shape=(len(pts), len(pts))).tocsr()
    if source is None:
        return pts, dijkstra(g, directed=False)
    return pts, dijkstra(g, directed=False, indices=index[tuple(source)])


def all_simple_path_times(weight_fn, box_lo, box_hi, u, v) -> list[float]:
    """Times of every simple path from u to v in the box (tiny boxes only)."""
    d = len(u)

    def nbrs(p):
        for k in range(d):
            for s in (-1, 1):
                q = list(p)
                q[k] += s
                if box_lo[k] <= q[k] <= box_hi[k]:
                    yield tuple(q), (p if s == 1 else tuple(q)), k

    out = []

    def rec(p, seen, t):
        if p == v:
            out.append(t)
            return
        for q, base, k in nbrs(p):
            if q not in seen:
                rec(q, seen | {q}, t + weight_fn(base, k))

    rec(tuple(u), {tuple(u)}, 0.0)
    return out


def envelope_value(generators, e_center, n: float) -> float:
    """max_g exp(-|g - e| / log n) by direct scan."""
    best = 0.0
    for g in generators:
        c = np.asarray(g.base, dtype=float)
        c[g.axis] += 0.5
        best = max(best, math.exp(-float(np.linalg.norm(c - e_center)) / math.log(n)))
    return best


def ols_slope(xs, ys) -> float:
    lx, ly = np.log(xs), np.log(ys)
    return float(np.polyfit(lx, ly, 1)[0])


def point_line_distance(p, v) -> float:
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    lam = p @ v / (v @ v)
    return float(np.linalg.norm(p - lam * v))


def radius_constant_scan(distances, n: float, exponent: float, need: float) -> float:
    """Largest c with mean #{dist > c n^exponent} >= need, scanning every candidate breakpoint."""
    trials = len(distances)
    pooled = np.concatenate(distances)
    best = 0.0
    for r in sorted(set(pooled.tolist())):
        # just below the breakpoint r the strict count includes r itself
        mean = sum(int(np.count_nonzero(x >= r)) for x in distances) / trials
        if mean >= need and r > 0:
            best = max(best, r / n**exponent)
    return best
