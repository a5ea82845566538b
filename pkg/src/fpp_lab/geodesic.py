"""Exact geodesics and passage times, plus brute-force oracles for testing.

The search runs on a dense row-major grid over the bounding box of the
confinement region, padded by one blocked layer so neighbour lookups need no
bounds checks.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .lattice import Box, ConfinementRegion, as_point, confinement_region, l1, make_edge, neighbors

INF = math.inf


@dataclass(frozen=True)
class Geodesic:
    vertices: list
    edges: list
    time: float

    def __len__(self) -> int:
        return len(self.edges)

    @property
    def source(self) -> tuple:
        return self.vertices[0]

    @property
    def sink(self) -> tuple:
        return self.vertices[-1]

    def vertex_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.int64)


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, inline="always")
def _less(ka, va, kb, vb):
    return ka < kb or (ka == kb and va < vb)


@numba.njit(cache=True)
def _heap_push(keys, vals, size, k, v):
    if size == keys.shape[0]:
        nk = np.empty(2 * size, dtype=keys.dtype)
        nv = np.empty(2 * size, dtype=vals.dtype)
        nk[:size] = keys
        nv[:size] = vals
        keys, vals = nk, nv
    i = size
    keys[i] = k
    vals[i] = v
    while i > 0:
        parent = (i - 1) >> 1
        if _less(keys[i], vals[i], keys[parent], vals[parent]):
            keys[i], keys[parent] = keys[parent], keys[i]
            vals[i], vals[parent] = vals[parent], vals[i]
            i = parent
        else:
            break
    return keys, vals, size + 1


@numba.njit(cache=True)
def _heap_pop(keys, vals, size):
    k, v = keys[0], vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        c = left
        right = left + 1
        if right < size and _less(keys[right], vals[right], keys[left], vals[left]):
            c = right
        if _less(keys[c], vals[c], keys[i], vals[i]):
            keys[i], keys[c] = keys[c], keys[i]
            vals[i], vals[c] = vals[c], vals[i]
            i = c
        else:
            break
    return k, v, size


@numba.njit(cache=True)
def _dijkstra(weights, allowed, strides, src, dst, skip_a, skip_b):
    """Single-source labels; stops once ``dst`` is settled (``dst < 0``: never).

    Equal-distance predecessors are resolved toward the smallest canonical edge
    key ``base_index * d + axis``. The edge ``skip_a - skip_b`` is ignored.
    """
    d = strides.shape[0]
    n = allowed.shape[0]
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    pkey = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    keys = np.empty(1024, dtype=np.float64)
    vals = np.empty(1024, dtype=np.int64)
    size = 0
    dist[src] = 0.0
    keys, vals, size = _heap_push(keys, vals, size, 0.0, src)
    while size > 0:
        dx, x, size = _heap_pop(keys, vals, size)
        if done[x] or dx > dist[x]:
            continue
        done[x] = True
        if x == dst:
            break
        for k in range(d):
            s = strides[k]
            for sgn in range(2):
                if sgn == 0:
                    y = x + s
                    base = x
                else:
                    y = x - s
                    base = y
                if not allowed[y] or done[y]:
                    continue
                if (x == skip_a and y == skip_b) or (x == skip_b and y == skip_a):
                    continue
                nd = dx + weights[k, base]
                key = base * d + k
                if nd < dist[y]:
                    dist[y] = nd
                    pred[y] = x
                    pkey[y] = key
                    keys, vals, size = _heap_push(keys, vals, size, nd, y)
                elif nd == dist[y] and key < pkey[y]:
                    pred[y] = x
                    pkey[y] = key
    return dist, pred


@numba.njit(cache=True)
def _bidirectional(weights, allowed, strides, src, dst):
    """Bidirectional Dijkstra; returns (best, meet_x, meet_y, pred_f, pred_b)."""
    d = strides.shape[0]
    n = allowed.shape[0]
    df = np.full(n, np.inf)
    db = np.full(n, np.inf)
    pf = np.full(n, -1, dtype=np.int64)
    pb = np.full(n, -1, dtype=np.int64)
    sf = np.zeros(n, dtype=np.bool_)
    sb = np.zeros(n, dtype=np.bool_)
    kf = np.empty(1024, dtype=np.float64)
    vf = np.empty(1024, dtype=np.int64)
    kb = np.empty(1024, dtype=np.float64)
    vb = np.empty(1024, dtype=np.int64)
    nf = 0
    nb = 0
    df[src] = 0.0
    db[dst] = 0.0
    kf, vf, nf = _heap_push(kf, vf, nf, 0.0, src)
    kb, vb, nb = _heap_push(kb, vb, nb, 0.0, dst)
    best = np.inf
    mx = -1
    my = -1
    if src == dst:
        return 0.0, src, src, pf, pb
    while nf > 0 and nb > 0:
        if kf[0] + kb[0] >= best:
            break
        forward = kf[0] <= kb[0]
        if forward:
            dx, x, nf = _heap_pop(kf, vf, nf)
            if sf[x] or dx > df[x]:
                continue
            sf[x] = True
        else:
            dx, x, nb = _heap_pop(kb, vb, nb)
            if sb[x] or dx > db[x]:
                continue
            sb[x] = True
        for k in range(d):
            s = strides[k]
            for sgn in range(2):
                if sgn == 0:
                    y = x + s
                    base = x
                else:
                    y = x - s
                    base = y
                if not allowed[y]:
                    continue
                nd = dx + weights[k, base]
                if forward:
                    if not sf[y] and nd < df[y]:
                        df[y] = nd
                        pf[y] = x
                        kf, vf, nf = _heap_push(kf, vf, nf, nd, y)
                    if db[y] < np.inf and nd + db[y] < best:
                        best = nd + db[y]
                        mx = x
                        my = y
                else:
                    if not sb[y] and nd < db[y]:
                        db[y] = nd
                        pb[y] = x
                        kb, vb, nb = _heap_push(kb, vb, nb, nd, y)
                    if df[y] < np.inf and nd + df[y] < best:
                        best = nd + df[y]
                        mx = y
                        my = x
    return best, mx, my, pf, pb


# ---------------------------------------------------------------------------
# grid preparation


class _Grid:
    """Dense padded grid over a box, with weights and an ``allowed`` mask."""

    def __init__(self, env, box: Box, inside):
        self.box = box
        self.lo = np.asarray(box.lo, dtype=np.int64) - 1
        self.shape = tuple(s + 2 for s in box.shape)
        padded = Box(tuple(self.lo), tuple(self.lo + np.asarray(self.shape) - 1))
        self.d = box.dim
        self.strides = np.array([int(np.prod(self.shape[k + 1:])) for k in range(self.d)], dtype=np.int64)
        w = env.weights_on_box(padded)
        self.weights = np.ascontiguousarray(w.reshape(self.d, -1))
        allowed = np.zeros(self.shape, dtype=bool)
        inner = tuple(slice(1, s - 1) for s in self.shape)
        mesh = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(box.lo, box.hi)], indexing="ij"), -1)
        ok = np.ones(box.shape, dtype=bool)
        for pred in inside:
            ok &= pred.contains_array(mesh)
        allowed[inner] = ok
        self.allowed = allowed.reshape(-1)

    def index(self, p: Sequence[int]) -> int:
        return int(np.dot(np.asarray(p, dtype=np.int64) - self.lo, self.strides))

    def point(self, i: int) -> tuple:
        return tuple(int(c) + int(o) for c, o in zip(np.unravel_index(int(i), self.shape), self.lo))

    def points(self, idx: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(idx), self.shape), -1) + self.lo

    def edge_weight(self, i: int, j: int) -> float:
        diff = j - i
        for k in range(self.d):
            if diff == self.strides[k]:
                return float(self.weights[k, i])
            if diff == -self.strides[k]:
                return float(self.weights[k, j])
        raise ValueError("not adjacent")

    def path_from_pred(self, pred: np.ndarray, src: int, dst: int) -> list[int]:
        path = [dst]
        while path[-1] != src:
            nxt = int(pred[path[-1]])
            if nxt < 0:
                raise RuntimeError("broken predecessor chain")
            path.append(nxt)
        path.reverse()
        return path

    def geodesic(self, path: list[int]) -> Geodesic:
        verts = [self.point(i) for i in path]
        edges = [make_edge(x, y) for x, y in zip(verts, verts[1:])]
        t = 0.0
        for i, j in zip(path, path[1:]):
            t += self.edge_weight(i, j)
        return Geodesic(verts, edges, t)


def _search_grid(env, u: tuple, v: tuple, budget: float | None = None) -> _Grid:
    if budget is None:
        region = confinement_region(u, v, env.a, env.b)
    else:
        region = ConfinementRegion(u, v, budget)
    box = region.bounding_box()
    preds = [region]
    extra = getattr(env, "region", None)
    if extra is not None:
        if not (extra.contains(u) and extra.contains(v)):
            raise ValueError(f"endpoints {u}, {v} lie outside the environment region")
        box = box.intersect(extra.bounding_box())
        preds.append(extra)
    return _Grid(env, box, preds)


def shortest_path(env, u: Sequence[int], v: Sequence[int], method: str = "dijkstra") -> Geodesic:
    """Geodesic from ``u`` to ``v`` inside their confinement region.

    ``method`` is ``"dijkstra"`` (default, deterministic lowest-key tie-breaking)
    or ``"bidirectional"``.
    """
    u, v = as_point(u), as_point(v)
    if len(u) != len(v):
        raise ValueError("dimension mismatch")
    if u == v:
        return Geodesic([u], [], 0.0)
    g = _search_grid(env, u, v)
    src, dst = g.index(u), g.index(v)
    if method == "dijkstra":
        dist, pred = _dijkstra(g.weights, g.allowed, g.strides, src, dst, -1, -1)
        if not np.isfinite(dist[dst]):
            raise ValueError(f"{v} unreachable from {u}")
        path = g.path_from_pred(pred, src, dst)
    elif method == "bidirectional":
        best, mx, my, pf, pb = _bidirectional(g.weights, g.allowed, g.strides, src, dst)
        if not np.isfinite(best):
            raise ValueError(f"{v} unreachable from {u}")
        head = g.path_from_pred(pf, src, mx)
        tail = g.path_from_pred(pb, dst, my)[::-1]
        path = head + tail
    else:
        raise ValueError(f"unknown method {method!r}")
    return g.geodesic(path)


def passage_time(env, u: Sequence[int], v: Sequence[int]) -> float:
    return shortest_path(env, u, v).time


# ---------------------------------------------------------------------------
# oracles and diagnostics


def _region_points(region) -> list[tuple]:
    if isinstance(region, Box):
        return region.points()
    return [as_point(p) for p in region]


def brute_force_passage_time(env, u: Sequence[int], v: Sequence[int], region) -> tuple[float, list]:
    """Exact optimum over paths inside ``region`` (a Box or an iterable of points).

    Up to 16 vertices every simple path is enumerated; up to 10^4 a plain
    Bellman-Ford style label-correcting sweep is used.
    """
    u, v = as_point(u), as_point(v)
    pts = _region_points(region)
    vs = set(pts)
    if u not in vs or v not in vs:
        raise ValueError("endpoints must lie in the region")
    if u == v:
        return 0.0, [u]
    adj = _adjacency(env, region if isinstance(region, Box) else frozenset(vs))
    if len(vs) <= 16:
        return _enumerate_paths(adj, u, v)
    if len(vs) <= 10_000:
        return _label_correcting(adj, u, v)
    raise ValueError(f"region too large for brute force ({len(vs)} vertices)")


def _build_adjacency(env, region) -> dict:
    pts = _region_points(region)
    vs = set(pts)
    return {x: [(y, env.weight(make_edge(x, y))) for y in neighbors(x) if y in vs] for x in pts}


_cached_adjacency = functools.lru_cache(maxsize=8)(_build_adjacency)


def _adjacency(env, region) -> dict:
    try:
        return _cached_adjacency(env, region)
    except TypeError:  # unhashable environment
        return _build_adjacency(env, region)


def _enumerate_paths(adj, u, v):
    best, best_path = INF, None
    # DFS over simple paths, summing in path order from u; a prefix already
    # at least as long as the incumbent cannot improve it (weights are positive)
    stack = [(u, 0.0, (u,))]
    while stack:
        x, t, path = stack.pop()
        if t >= best:
            continue
        if x == v:
            best, best_path = t, list(path)
            continue
        for y, w in adj[x]:
            if y not in path:
                stack.append((y, t + w, path + (y,)))
    return best, best_path


def _label_correcting(adj, u, v):
    dist = {p: INF for p in adj}
    pred = {}
    dist[u] = 0.0
    changed = True
    while changed:
        changed = False
        for x, nbrs in adj.items():
            dx = dist[x]
            if dx == INF:
                continue
            for y, w in nbrs:
                nd = dx + w
                if nd < dist[y]:
                    dist[y] = nd
                    pred[y] = x
                    changed = True
    path = [v]
    while path[-1] != u:
        path.append(pred[path[-1]])
    return dist[v], path[::-1]


def geodesic_tie_diagnostic(env, u: Sequence[int], v: Sequence[int], tol: float) -> bool:
    """True iff some simple path other than the geodesic has time within ``tol`` of it.

    For ``tol < 2a`` this uses forward/backward distance labels: any walk
    through a non-geodesic edge that beats ``T + 2a`` is a simple path. Larger
    tolerances fall back to the second path of Yen's algorithm.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    u, v = as_point(u), as_point(v)
    if u == v:
        return False
    geo = shortest_path(env, u, v)
    T = geo.time
    a = env.a
    if math.isfinite(tol):
        budget = (T + tol) / a + 1e-9
    else:
        budget = (env.b / a) * l1(u, v) + 4
    g = _search_grid(env, u, v, budget)
    if tol < 2 * a:
        return _labels_tie(g, geo, T, tol)
    return _yen_second(g, geo) <= T + tol


def _labels_tie(g: _Grid, geo: Geodesic, T: float, tol: float) -> bool:
    src, dst = g.index(geo.source), g.index(geo.sink)
    du, _ = _dijkstra(g.weights, g.allowed, g.strides, src, -1, -1, -1)
    dv, _ = _dijkstra(g.weights, g.allowed, g.strides, dst, -1, -1, -1)
    on_path = set()
    for x, y in zip(geo.vertices, geo.vertices[1:]):
        i, j = g.index(x), g.index(y)
        on_path.add((min(i, j), max(i, j)))
    thresh = T + tol
    for k in range(g.d):
        s = int(g.strides[k])
        base = np.arange(g.allowed.size - s)
        ok = g.allowed[base] & g.allowed[base + s]
        base = base[ok]
        w = g.weights[k, base]
        via = np.minimum(du[base] + w + dv[base + s], du[base + s] + w + dv[base])
        for i in base[via <= thresh]:
            if (int(i), int(i) + s) not in on_path:
                return True
    return False


def _yen_second(g: _Grid, geo: Geodesic) -> float:
    idx = [g.index(p) for p in geo.vertices]
    best = INF
    root_time = 0.0
    for i in range(len(idx) - 1):
        allowed = g.allowed.copy()
        allowed[idx[:i]] = False
        dist, _ = _dijkstra(g.weights, allowed, g.strides, idx[i], idx[-1], idx[i], idx[i + 1])
        best = min(best, root_time + dist[idx[-1]])
        root_time += g.edge_weight(idx[i], idx[i + 1])
    return best
