"""Coupling experiments: perturbed environments, f-statistics, dyadic levels and tail transfer.

A sample draws one environment ``t``, builds ``t+_e = g+_{tau_e}(t_e)`` and
computes the four passage times ``T(0,v)``, ``T+(0,v)``, ``T(h,v+h)``,
``T+(h,v+h)``. Several inequalities between them hold surely, sample by
sample; ``CouplingRecord.check`` evaluates them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geodesic import Geodesic, shortest_path
from .influence import InfluenceField, SmoothEnvelope
from .lattice import Edge, as_point, l1, l2
from .weights import (EdgeEnvironment, EdgeValues, GaussianRepresentation, NiceSet, WeightDistribution, nice_set,
                      perturb_environment)

# float slack for comparing sums of ~10^3 weights accumulated in different orders
SURE_TOL = 1e-9


@dataclass(frozen=True)
class TauField:
    values: Mapping[Edge, float]

    def __post_init__(self):
        vals = np.fromiter(self.values.values(), dtype=float, count=len(self.values))
        if np.any(~np.isfinite(vals)) or np.any(vals < 0) or np.any(vals > 1):
            raise ValueError("tau values must lie in [0, 1]")
        if not isinstance(self.values, EdgeValues):
            object.__setattr__(self, "values", EdgeValues(self.values))

    @property
    def norm(self) -> float:
        # fsum: independent of insertion order
        return math.sqrt(math.fsum(t * t for t in self.values.values()))

    def __getitem__(self, e: Edge) -> float:
        return self.values.get(e, 0.0)

    @classmethod
    def indicator(cls, edges: Iterable[Edge]) -> "TauField":
        """``|A|^{-1/2}`` on ``A``."""
        edges = set(edges)
        if not edges:
            raise ValueError("empty edge set")
        t = 1.0 / math.sqrt(len(edges))
        return cls({e: t for e in edges})

    @classmethod
    def from_envelope(cls, q: SmoothEnvelope) -> "TauField":
        """``q / |q|_2`` over the materialized envelope."""
        norm = q.l2_norm
        return cls({e: v / norm for e, v in q.values.items()})

    @classmethod
    def zero(cls) -> "TauField":
        return cls({})


def f_statistic(g: Geodesic, tau: TauField) -> float:
    """``f(p) = sum_{e in p} tau_e``."""
    return float(sum(tau.values.get(e, 0.0) for e in g.edges))


def mu_estimate(field_: InfluenceField, tau: TauField) -> float:
    """``sum_e tau_e p_e`` from a field's point estimates."""
    if field_.hits and tau.values:
        k = next(iter(tau.values)).dim
        if k != field_.dim:
            raise ValueError("tau and field live in different dimensions")
    return float(sum(tau.values.get(e, 0.0) * h for e, h in sorted(field_.hits.items())) / field_.trials)


@dataclass(frozen=True)
class CouplingRecord:
    seed: int
    h: tuple
    T0: float
    T0_plus: float
    Th: float
    Th_plus: float
    f_gamma0: float
    f_gamma0_plus: float
    f_gammah: float
    T0_plus_along_gamma0: float  # T+(gamma_0)
    gain: float  # sum of tau_e over e in gamma_0^+ with t_e in B_delta
    delta: float

    def check(self, C0: float, b: float, tol: float = SURE_TOL) -> dict[str, bool]:
        h1 = l1(self.h)
        return {
            "T0_plus>=T0": self.T0_plus >= self.T0 - tol,
            "Th_plus>=Th": self.Th_plus >= self.Th - tol,
            "|T0-Th|<=2b|h|_1": abs(self.T0 - self.Th) <= 2 * b * h1 + tol,
            "Th_plus<=Th+C0*f(gamma_h)": self.Th_plus <= self.Th + C0 * self.f_gammah + tol,
            "T0_plus<=T+(gamma_0)<=T0+C0*f(gamma_0)": (
                self.T0_plus <= self.T0_plus_along_gamma0 + tol
                and self.T0_plus_along_gamma0 <= self.T0 + C0 * self.f_gamma0 + tol),
            "T0_plus>=T0+delta*gain": self.T0_plus >= self.T0 + self.delta * self.gain - tol,
        }

    def row(self) -> dict:
        r = asdict(self)
        r["h"] = " ".join(str(x) for x in self.h)
        return r


def default_delta(rep: GaussianRepresentation, target: float = 0.95) -> float:
    """Largest ``delta`` on a geometric grid with ``G(B_delta) >= target``."""
    for delta in np.geomspace(rep.C0, 1e-6, 400):
        if nice_set(rep, float(delta)).measure >= target:
            return float(delta)
    raise ValueError(f"no delta reaches G(B_delta) >= {target}")


def run_coupling(dist: WeightDistribution, v: Sequence[int], h: Sequence[int], tau: TauField, seed: int,
                 delta: float | None = None, rep: GaussianRepresentation | None = None,
                 nice: NiceSet | None = None, method: str = "dijkstra") -> CouplingRecord:
    rep = rep or GaussianRepresentation(dist)
    if delta is None:
        delta = nice.delta if nice is not None else default_delta(rep)
    nice = nice or nice_set(rep, delta)
    v, h = as_point(v), as_point(h)
    if len(h) != len(v):
        raise ValueError("h and v differ in dimension")
    env = EdgeEnvironment(dist, seed)
    plus = perturb_environment(env, tau.values, rep)
    origin = (0,) * len(v)
    vh = tuple(x + y for x, y in zip(v, h))
    g0 = shortest_path(env, origin, v, method)
    g0p = shortest_path(plus, origin, v, method)
    gh = shortest_path(env, h, vh, method) if any(h) else g0
    ghp = shortest_path(plus, h, vh, method) if any(h) else g0p
    t_along = 0.0
    for e in g0.edges:
        t_along += plus.weight(e)
    gain = 0.0
    for e in g0p.edges:
        if nice.contains(env.weight(e)):
            gain += tau.values.get(e, 0.0)
    return CouplingRecord(int(seed), h, g0.time, g0p.time, gh.time, ghp.time,
                          f_statistic(g0, tau), f_statistic(g0p, tau), f_statistic(gh, tau),
                          t_along, gain, float(delta))


# ---------------------------------------------------------------------------
# dyadic levels and tail transfer


def qualifying_levels(f_samples: Sequence[float], mu: float, k_max: int) -> list[int]:
    """All ``k`` in ``{-1, ..., k_max}`` with empirical ``P(f >= 3^k mu) >= 4^(-k-3)``."""
    f = np.asarray(f_samples, dtype=float)
    if f.size == 0:
        raise ValueError("empty samples")
    if not mu > 0:
        raise ValueError("mu must be positive")
    return [k for k in range(-1, k_max + 1) if np.mean(f >= 3.0**k * mu) >= 4.0 ** (-k - 3)]


def dyadic_level_search(f_samples: Sequence[float], mu: float, k_max: int) -> int | None:
    levels = qualifying_levels(f_samples, mu, k_max)
    return levels[0] if levels else None


C1_GRID = tuple(2.0**-j for j in range(1, 9))


@dataclass
class TailTransferTable:
    t: float
    p0: float
    rows: list = field(default_factory=list)  # dicts: h, c1, applicable, lhs, rhs, passed

    @property
    def passing_c1(self) -> float | None:
        """Largest grid ``c1`` for which every applicable ``h`` passes (non-vacuously for some h)."""
        best = None
        for c1 in C1_GRID:
            rs = [r for r in self.rows if r["c1"] == c1 and r["applicable"]]
            if rs and all(r["passed"] for r in rs):
                best = c1 if best is None else max(best, c1)
        return best


def lemma_tail_transfer_check(dist: WeightDistribution, v: Sequence[int], t: float, h_grid: Sequence[Sequence[int]],
                              tau: TauField, trials: int, seed: int, c1_grid: Sequence[float] = C1_GRID,
                              method: str = "dijkstra") -> TailTransferTable:
    """Estimate ``P(f(gamma_h) >= c1 t)`` against ``c1 P(f(gamma_0) >= t)^{3/2}``.

    Every ``h`` reuses the same environment seeds. The additive ``n^-5`` slack
    is below Monte Carlo resolution and is dropped; rows within one binomial
    standard error of the boundary are flagged ``borderline``.
    """
    v = as_point(v)
    origin = (0,) * len(v)
    seeds = range(seed, seed + trials)
    f0 = np.array([f_statistic(shortest_path(EdgeEnvironment(dist, s), origin, v, method), tau) for s in seeds])
    fh = {}
    for h in map(as_point, h_grid):
        vh = tuple(x + y for x, y in zip(v, h))
        if any(h):
            fh[h] = np.array([f_statistic(shortest_path(EdgeEnvironment(dist, s), h, vh, method), tau)
                              for s in seeds])
        else:
            fh[h] = f0
    return tail_transfer_table(f0, fh, t, c1_grid)


def tail_transfer_table(f0: Sequence[float], fh: Mapping[tuple, Sequence[float]], t: float,
                        c1_grid: Sequence[float] = C1_GRID) -> TailTransferTable:
    """Tail-transfer rows from f-samples that share environment seeds across ``h``."""
    f0 = np.asarray(f0, dtype=float)
    trials = f0.size
    p0 = float(np.mean(f0 >= t))
    table = TailTransferTable(float(t), p0)
    for h, fs in fh.items():
        fs = np.asarray(fs, dtype=float)
        if fs.size != trials:
            raise ValueError("f-samples for every h must share the trials of f0")
        for c1 in c1_grid:
            lhs = float(np.mean(fs >= c1 * t))
            rhs = c1 * p0**1.5
            se = math.sqrt(max(lhs * (1 - lhs), 1.0 / trials) / trials)
            table.rows.append({"h": as_point(h), "c1": c1, "applicable": l2(h) < c1 * t, "lhs": lhs, "rhs": rhs,
                               "passed": lhs >= rhs, "borderline": abs(lhs - rhs) < se})
    return table
