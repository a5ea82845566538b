"""Weight distributions, seeded edge environments and the Gaussian-shift perturbation.

Every distribution here is represented as the push-forward ``F = quantile o Phi``
of a standard normal. Shifting the Gaussian coordinate by ``tau`` gives the
increasing bijection ``g+_tau(w) = F(F^-1(w) + tau)``, which nudges weights up
by at most ``C0 * tau``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numba
import numpy as np
from scipy import optimize, special

from .lattice import Box, ConfinementRegion, Edge

Z_CLAMP = 8.0
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# counter-based per-edge randomness

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)


@numba.njit(cache=True, inline="always")
def _mix64(z):
    # splitmix64 output function
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@numba.njit(cache=True)
def _edge_uniform(seed, coords, axis):
    h = _mix64(seed + _GOLDEN)
    for c in coords:
        h = _mix64((h ^ np.uint64(c)) + _GOLDEN)
    h = _mix64((h ^ np.uint64(axis)) + _GOLDEN)
    h = _mix64(h)
    return np.float64(h >> _S11) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _box_uniforms(seed, lo, shape):
    d = lo.shape[0]
    n = 1
    for k in range(d):
        n *= shape[k]
    out = np.empty((d, n), dtype=np.float64)
    coords = np.empty(d, dtype=np.int64)
    for i in range(n):
        r = i
        for k in range(d - 1, -1, -1):
            coords[k] = lo[k] + r % shape[k]
            r //= shape[k]
        for k in range(d):
            out[k, i] = _edge_uniform(seed, coords, k)
    return out


def _as_seed(seed: int) -> np.uint64:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.uint64(seed)


def edge_uniform(seed: int, e: Edge) -> float:
    """Uniform [0, 1) variate attached to edge ``e`` under ``seed``; a pure function."""
    return float(_edge_uniform(_as_seed(seed), np.asarray(e.base, dtype=np.int64), e.axis))


def box_uniforms(seed: int, box: Box) -> np.ndarray:
    """Uniforms for every edge based in ``box``, shape ``(d, *box.shape)``."""
    lo = np.asarray(box.lo, dtype=np.int64)
    shape = np.asarray(box.shape, dtype=np.int64)
    return _box_uniforms(_as_seed(seed), lo, shape).reshape((box.dim,) + box.shape)


# ---------------------------------------------------------------------------
# distributions


class WeightDistribution:
    """Absolutely continuous law on ``[a, b]`` with density bounded below by ``alpha``."""

    a: float
    b: float

    @property
    def alpha(self) -> float:
        raise NotImplementedError

    def pdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def quantile(self, u):
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.quantile(rng.random(size))

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(WeightDistribution):
    a: float = 1.0
    b: float = 2.0

    def __post_init__(self):
        if not 0 < self.a < self.b:
            raise ValueError(f"need 0 < a < b, got a={self.a}, b={self.b}")

    @property
    def alpha(self) -> float:
        return 1.0 / (self.b - self.a)

    @property
    def mean(self) -> float:
        return 0.5 * (self.a + self.b)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.a) & (x <= self.b), self.alpha, 0.0)

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.a) / (self.b - self.a), 0.0, 1.0)

    def quantile(self, u):
        return self.a + (self.b - self.a) * np.asarray(u, dtype=float)

    def describe(self) -> dict:
        return {"family": "uniform", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class TruncatedLinear(WeightDistribution):
    """Density ``(1 + tilt * (2s - 1)) / (b - a)`` with ``s = (x - a)/(b - a)``, ``|tilt| < 1``."""

    a: float = 1.0
    b: float = 2.0
    tilt: float = 0.5

    def __post_init__(self):
        if not 0 < self.a < self.b:
            raise ValueError(f"need 0 < a < b, got a={self.a}, b={self.b}")
        if not -1 < self.tilt < 1:
            raise ValueError(f"tilt must lie in (-1, 1), got {self.tilt}")

    @property
    def alpha(self) -> float:
        return (1.0 - abs(self.tilt)) / (self.b - self.a)

    @property
    def mean(self) -> float:
        return self.a + (self.b - self.a) * (0.5 + self.tilt / 6.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        s = (x - self.a) / (self.b - self.a)
        val = (1.0 + self.tilt * (2.0 * s - 1.0)) / (self.b - self.a)
        return np.where((s >= 0) & (s <= 1), val, 0.0)

    def cdf(self, x):
        s = np.clip((np.asarray(x, dtype=float) - self.a) / (self.b - self.a), 0.0, 1.0)
        return s * (1.0 + self.tilt * (s - 1.0))

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        c = 1.0 - self.tilt
        # root of tilt s^2 + (1 - tilt) s - u = 0 in the cancellation-free form
        s = 2.0 * u / (c + np.sqrt(c * c + 4.0 * self.tilt * u))
        return self.a + (self.b - self.a) * np.clip(s, 0.0, 1.0)

    def describe(self) -> dict:
        return {"family": "linear", "a": self.a, "b": self.b, "tilt": self.tilt}


def make_distribution(family: str = "uniform", a: float = 1.0, b: float = 2.0, **kw) -> WeightDistribution:
    if family == "uniform":
        return Uniform(a, b)
    if family == "linear":
        return TruncatedLinear(a, b, kw.get("tilt", 0.5))
    raise ValueError(f"unknown distribution family {family!r}")


# ---------------------------------------------------------------------------
# Gaussian representation and the perturbation maps


class GaussianRepresentation:
    """``F = quantile o Phi`` together with a Lipschitz constant ``C0`` for ``F``."""

    def __init__(self, dist: WeightDistribution):
        self.dist = dist
        self.a, self.b = dist.a, dist.b
        # rho >= alpha bounds F' = phi / rho(F) by phi(0) / alpha everywhere
        self.C0 = 1.05 * _INV_SQRT_2PI / dist.alpha
        self._peak = None

    def F(self, z):
        return self.dist.quantile(special.ndtr(np.asarray(z, dtype=float)))

    def Finv(self, w):
        z = special.ndtri(self.dist.cdf(w))
        return np.clip(z, -Z_CLAMP, Z_CLAMP)

    def dF(self, z):
        z = np.asarray(z, dtype=float)
        return np.exp(-0.5 * z * z) * _INV_SQRT_2PI / self.dist.pdf(self.F(z))

    def grid_lipschitz(self, lo: float = -Z_CLAMP, hi: float = Z_CLAMP, num: int = 20001) -> float:
        return float(np.max(self.dF(np.linspace(lo, hi, num))))

    @property
    def peak(self) -> float:
        """Location of the maximum of ``F'`` (which is unimodal for the built-in families)."""
        if self._peak is None:
            res = optimize.minimize_scalar(lambda z: -float(self.dF(z)), bounds=(-Z_CLAMP, Z_CLAMP),
                                           method="bounded", options={"xatol": 1e-12})
            self._peak = float(res.x)
        return self._peak


def _check_tau(tau) -> None:
    t = np.asarray(tau, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
        raise ValueError("tau must lie in [0, 1]")


def gplus_array(rep: GaussianRepresentation, w, tau) -> np.ndarray:
    """Vectorized ``g+_tau(w)``; ``w`` and ``tau`` broadcast together."""
    w = np.asarray(w, dtype=float)
    tau = np.asarray(tau, dtype=float)
    out = rep.F(rep.Finv(w) + tau)
    # pins the stated envelope against last-ulp rounding in F o F^-1
    out = np.maximum(out, w)
    out = np.minimum(out, np.minimum(w + rep.C0 * tau, rep.b))
    return out


def gplus_inverse_array(rep: GaussianRepresentation, w, tau) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = rep.F(rep.Finv(w) - np.asarray(tau, dtype=float))
    return np.maximum(np.minimum(out, w), rep.a)


@dataclass(frozen=True)
class PerturbationMap:
    rep: GaussianRepresentation
    tau: float

    def __post_init__(self):
        _check_tau(self.tau)

    def __call__(self, w):
        return gplus(self, w)

    def inverse(self, w):
        return gplus_inverse_array(self.rep, w, self.tau)


def gplus(pmap: PerturbationMap, w: float | np.ndarray):
    """Apply ``g+_tau``; ``w`` must lie in ``[a, b]``."""
    _check_tau(pmap.tau)
    arr = np.asarray(w, dtype=float)
    if np.any(arr < pmap.rep.a) or np.any(arr > pmap.rep.b):
        raise ValueError(f"w must lie in [{pmap.rep.a}, {pmap.rep.b}]")
    out = gplus_array(pmap.rep, arr, pmap.tau)
    return float(out) if np.ndim(w) == 0 else out


@dataclass(frozen=True)
class NiceSet:
    """Closed interval ``[lo, hi]`` of weights on which ``g+_tau`` gains at least ``delta * tau``."""

    delta: float
    lo: float
    hi: float
    measure: float

    @property
    def empty(self) -> bool:
        return self.hi < self.lo

    def contains(self, w):
        w = np.asarray(w, dtype=float)
        res = (w >= self.lo) & (w <= self.hi)
        return bool(res) if res.ndim == 0 else res

    @property
    def intervals(self) -> list[tuple[float, float]]:
        return [] if self.empty else [(self.lo, self.hi)]


# B_delta is built for a slightly larger delta so the gain survives rounding
_NICE_SET_MARGIN = 1e-6


def nice_set(rep: GaussianRepresentation, delta: float) -> NiceSet:
    """Weights ``F(z)`` with ``min F' >= delta`` on ``[z, z + 1]``.

    For unimodal ``F'`` that window minimum is ``min(F'(z), F'(z+1))`` and the set
    of admissible ``z`` is ``[L, R - 1]`` where ``{F' >= delta} = [L, R]``.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    target = delta * (1.0 + _NICE_SET_MARGIN)
    zp = rep.peak
    dF = lambda z: float(rep.dF(z)) - target  # noqa: E731
    if dF(zp) < 0:
        return NiceSet(delta, math.inf, -math.inf, 0.0)
    lo_z = -Z_CLAMP if dF(-Z_CLAMP) >= 0 else optimize.brentq(dF, -Z_CLAMP, zp, xtol=1e-14)
    hi_z = Z_CLAMP if dF(Z_CLAMP) >= 0 else optimize.brentq(dF, zp, Z_CLAMP, xtol=1e-14)
    lo_z, hi_z = lo_z + 1e-12, hi_z - 1.0 - 1e-12
    if hi_z < lo_z:
        return NiceSet(delta, math.inf, -math.inf, 0.0)
    lo, hi = float(rep.F(lo_z)), float(rep.F(hi_z))
    return NiceSet(delta, lo, hi, float(special.ndtr(hi_z) - special.ndtr(lo_z)))


# ---------------------------------------------------------------------------
# Mermin-Wagner probability transfer


class MWCheck(NamedTuple):
    lhs: float
    rhs: float
    margin_sigmas: float


def verify_mw_inequality(dist: WeightDistribution, tau: Sequence[float], event: Callable[[np.ndarray], np.ndarray],
                         p: float, samples: int, seed: int,
                         rep: GaussianRepresentation | None = None) -> MWCheck:
    """Monte Carlo check of ``P(g+(X) in A) >= exp(-p|tau|^2 / (2(p-1))) P(X in A)^p``.

    Both probabilities come from the same draws of ``X``. The margin is
    ``(lhs - rhs) / sigma`` with sigma from the delta method on the paired indicators.
    """
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    if samples <= 0:
        raise ValueError("samples must be positive")
    tau = np.asarray(tau, dtype=float)
    if tau.ndim != 1 or tau.size == 0:
        raise ValueError("tau must be a non-empty vector")
    _check_tau(tau)
    rep = rep or GaussianRepresentation(dist)
    rng = np.random.default_rng(seed)
    x = dist.sample(rng, (samples, tau.size))
    y = gplus_array(rep, x, tau[None, :])
    ia = np.asarray(event(x), dtype=float)
    ib = np.asarray(event(y), dtype=float)
    prob = ia.mean()
    lhs = ib.mean()
    factor = math.exp(-p * float(tau @ tau) / (2.0 * (p - 1.0)))
    rhs = factor * prob**p
    # delta method on (lhs, P): grad = (1, -factor * p * P^(p-1))
    g = -factor * p * prob ** (p - 1.0)
    cov = np.cov(np.vstack([ib, ia]), bias=True) if samples > 1 else np.zeros((2, 2))
    var = (cov[0, 0] + 2 * g * cov[0, 1] + g * g * cov[1, 1]) / samples
    sigma = math.sqrt(max(var, 0.0))
    diff = lhs - rhs
    if sigma > 0:
        margin = diff / sigma
    else:
        margin = math.inf if diff >= 0 else -math.inf
    return MWCheck(float(lhs), float(rhs), float(margin))


def mw_event_battery(dist: WeightDistribution, n: int) -> list[tuple[str, Callable[[np.ndarray], np.ndarray]]]:
    """Twenty fixed Borel events in ``R^n``: half-spaces, boxes, unions and complements."""
    a, b = dist.a, dist.b
    q = lambda s: a + s * (b - a)  # noqa: E731
    w = np.linspace(1.0, 2.0, n)
    w = w / w.sum()
    alt = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)

    def mean_ge(s):
        return lambda x: x.mean(-1) >= q(s)

    def mean_le(s):
        return lambda x: x.mean(-1) <= q(s)

    def box(lo, hi):
        return lambda x: np.all((x >= q(lo)) & (x <= q(hi)), axis=-1)

    events = [
        ("mean>=0.5", mean_ge(0.5)),
        ("mean>=0.8", mean_ge(0.8)),
        ("mean>=0.95", mean_ge(0.95)),
        ("mean<=0.5", mean_le(0.5)),
        ("mean<=0.2", mean_le(0.2)),
        ("mean<=0.05", mean_le(0.05)),
        ("weighted>=0.6", lambda x: x @ w >= q(0.6)),
        ("weighted<=0.3", lambda x: x @ w <= q(0.3)),
        ("alternating>=0", lambda x: (x - q(0.5)) @ alt >= 0.0),
        ("alternating<=-0.2", lambda x: (x - q(0.5)) @ alt <= -0.2 * (b - a)),
        ("x1>=0.9", lambda x: x[..., 0] >= q(0.9)),
        ("x1<=0.1", lambda x: x[..., 0] <= q(0.1)),
        ("box[0.2,0.6]", box(0.2, 0.6)),
        ("box[0.4,0.9]", box(0.4, 0.9)),
        ("box[0,0.3]", box(0.0, 0.3)),
        ("not box[0.3,0.7]", lambda x: ~box(0.3, 0.7)(x)),
        ("box[0,0.2] | box[0.8,1]", lambda x: box(0.0, 0.2)(x) | box(0.8, 1.0)(x)),
        ("max>=0.9", lambda x: x.max(-1) >= q(0.9)),
        ("min<=0.1", lambda x: x.min(-1) <= q(0.1)),
        ("full", lambda x: np.ones(x.shape[:-1], dtype=bool)),
    ]
    return events


# ---------------------------------------------------------------------------
# environments


@dataclass(frozen=True)
class EdgeEnvironment:
    """IID weights ``t_e ~ dist``; ``t_e`` is a pure function of ``(seed, e)``.

    ``region`` optionally restricts the lattice that geodesic searches may use
    (the full lattice when ``None``).
    """

    dist: WeightDistribution
    seed: int
    region: Box | ConfinementRegion | None = None

    @property
    def a(self) -> float:
        return self.dist.a

    @property
    def b(self) -> float:
        return self.dist.b

    def weight(self, e: Edge) -> float:
        return float(self.dist.quantile(edge_uniform(self.seed, e)))

    def weights_on_box(self, box: Box) -> np.ndarray:
        """Weights of all edges based in ``box``, shape ``(d, *box.shape)``."""
        return self.dist.quantile(box_uniforms(self.seed, box))

    def translated(self, h: Sequence[int]) -> "TranslatedEnvironment":
        return TranslatedEnvironment(self, tuple(int(x) for x in h))


def sample_weight(env, e: Edge) -> float:
    return env.weight(e)


@dataclass(frozen=True)
class TranslatedEnvironment:
    """The environment ``t'_e = t_{e + shift}``; a copy of ``base`` moved by ``-shift``."""

    base: EdgeEnvironment
    shift: tuple
    region: Box | ConfinementRegion | None = None

    @property
    def a(self) -> float:
        return self.base.a

    @property
    def b(self) -> float:
        return self.base.b

    def weight(self, e: Edge) -> float:
        return self.base.weight(e.translate(self.shift))

    def weights_on_box(self, box: Box) -> np.ndarray:
        moved = Box(tuple(x + s for x, s in zip(box.lo, self.shift)),
                    tuple(x + s for x, s in zip(box.hi, self.shift)))
        return self.base.weights_on_box(moved)


@dataclass(frozen=True)
class TableEnvironment:
    """Explicit weights with a default for unlisted edges (mainly for hand-built tests)."""

    table: Mapping[Edge, float]
    default: float
    region: Box | ConfinementRegion | None = None

    @property
    def a(self) -> float:
        return min([self.default, *self.table.values()])

    @property
    def b(self) -> float:
        return max([self.default, *self.table.values()])

    def weight(self, e: Edge) -> float:
        return float(self.table.get(e, self.default))

    def weights_on_box(self, box: Box) -> np.ndarray:
        out = np.full((box.dim,) + box.shape, float(self.default))
        lo = np.asarray(box.lo)
        for e, t in self.table.items():
            if box.contains(e.base):
                out[(e.axis,) + tuple(np.asarray(e.base) - lo)] = t
        return out


class EdgeValues(dict):
    """Edge -> float mapping that also keeps its entries as index arrays.

    Treat as immutable once built; the arrays are not refreshed on mutation.
    """

    def __init__(self, data=()):
        super().__init__(data)
        keys = [e for e, t in self.items() if t != 0]
        d = keys[0].dim if keys else 0
        self.bases = np.array([e.base for e in keys], dtype=np.int64).reshape(len(keys), d)
        self.axes = np.array([e.axis for e in keys], dtype=np.int64)
        self.vals = np.array([self[e] for e in keys], dtype=float)

    def box_indices(self, box: Box):
        """Index tuple into a ``(d, *box.shape)`` array, and the matching values."""
        if not len(self.vals):
            return tuple(np.zeros((box.dim + 1, 0), dtype=np.int64)), np.zeros(0)
        rel = self.bases - np.asarray(box.lo)
        ok = np.all((rel >= 0) & (rel < np.asarray(box.shape)), axis=1)
        return (self.axes[ok],) + tuple(rel[ok].T), self.vals[ok]


@dataclass(frozen=True)
class PerturbedEnvironment:
    """Lazy view ``t+_e = g+_{tau_e}(t_e)`` over a base environment."""

    base: object
    tau: EdgeValues
    rep: GaussianRepresentation
    region: Box | ConfinementRegion | None = field(default=None)

    @property
    def a(self) -> float:
        return self.base.a

    @property
    def b(self) -> float:
        return self.base.b

    def weight(self, e: Edge) -> float:
        t = self.base.weight(e)
        tau = self.tau.get(e, 0.0)
        if tau == 0.0:
            return t
        return float(gplus_array(self.rep, t, tau))

    def weights_on_box(self, box: Box) -> np.ndarray:
        w = self.base.weights_on_box(box)
        idx, taus = self.tau.box_indices(box)
        if taus.size:
            w = w.copy()
            w[idx] = gplus_array(self.rep, w[idx], taus)
        return w


def perturb_environment(env, tau_field: Mapping[Edge, float],
                        rep: GaussianRepresentation | None = None) -> PerturbedEnvironment:
    """Environment view with every weight pushed through ``g+_{tau_e}``; ``env`` is untouched."""
    if not isinstance(tau_field, EdgeValues):
        if tau_field:
            _check_tau(np.fromiter(tau_field.values(), dtype=float))
        tau_field = EdgeValues(tau_field)
    if rep is None:
        rep = GaussianRepresentation(env.dist if hasattr(env, "dist") else env.base.dist)
    return PerturbedEnvironment(env, tau_field, rep, getattr(env, "region", None))
