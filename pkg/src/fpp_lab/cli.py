"""Experiment orchestration: configs, seeded runs, CSV/JSON artifacts, merging and fits.

Every trial ``i`` (global index, ``trial_offset <= i < trial_offset + trials``)
samples the environment with seed ``master_seed + i``. Raw per-trial data is
reduced in trial order, so the worker count never changes an output byte.
Wall-clock lives in ``timing.json``; every other artifact is a pure function
of the config.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from .fluctuations import fit_exponent
from .geodesic import brute_force_passage_time, shortest_path
from .influence import (DEFAULT_EPS_GRID, InfluenceField, _normalize_ranges, estimate_influence, influence_set,
                        lp_sum, proposition_ratio, smooth_envelope, trivial_count_bound_check)
from .lattice import (Box, Edge, as_point, edge_center_distance, in_slab, l1, l2, slab_coordinate,
                      transversal_distance)
from .perturbation import (SURE_TOL, CouplingRecord, TauField, default_delta, mu_estimate,
                           qualifying_levels, run_coupling, tail_transfer_table)
from .weights import (EdgeEnvironment, GaussianRepresentation, gplus_array, gplus_inverse_array, make_distribution,
                      mw_event_battery, nice_set, verify_mw_inequality)

KINDS = ("influence", "fluctuation", "coupling", "ratio", "validate")
EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2
# pilot fields for tau construction draw seeds far from any trial range
PILOT_SEED_SHIFT = 1 << 40

_POS_GRID = {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}}
_POINT = {"type": "array", "minItems": 2, "items": {"type": "integer"}}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fpp-lab experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "d": {"type": "integer", "minimum": 2},
        "v": _POINT,
        "n_grid": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 2}},
        "distribution": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["uniform", "linear"]},
                "a": {"type": "number", "exclusiveMinimum": 0},
                "b": {"type": "number", "exclusiveMinimum": 0},
                "tilt": {"type": "number", "minimum": -1, "maximum": 1},
            },
        },
        "trials": {"type": "integer", "minimum": 1},
        "trial_offset": {"type": "integer", "minimum": 0},
        "master_seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
        "eps_grid": {"type": "array", "minItems": 1,
                     "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        "beta_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 1}},
        "ell_grid": _POS_GRID,
        "r_grid": _POS_GRID,
        "h_grid": {"type": "array", "minItems": 1, "items": _POINT},
        "tau": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["envelope", "indicator", "zero"]},
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "pilot_trials": {"type": "integer", "minimum": 1},
            },
        },
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "method": {"enum": ["dijkstra", "bidirectional"]},
        "save_paths": {"type": "boolean"},
        "mw_samples": {"type": "integer", "minimum": 1},
        "gplus_samples": {"type": "integer", "minimum": 1},
        "out_dir": {"type": "string", "minLength": 1},
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the JSON path of the offending field."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    d: int = 2
    v: tuple | None = None
    n_grid: tuple | None = None
    distribution: dict = field(default_factory=lambda: {"family": "uniform", "a": 1.0, "b": 2.0})
    trials: int = 100
    trial_offset: int = 0
    master_seed: int = 0
    eps_grid: tuple = DEFAULT_EPS_GRID
    beta_grid: tuple = (1.0, 1.5, 2.0)
    ell_grid: tuple = (1.0,)
    r_grid: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    h_grid: tuple = ((0, 1),)
    tau: dict = field(default_factory=lambda: {"kind": "envelope", "epsilon": 0.05, "pilot_trials": 500})
    delta: float | None = None
    method: str = "dijkstra"
    save_paths: bool = False
    mw_samples: int = 100_000
    gplus_samples: int = 100_000
    out_dir: str = "runs/out"

    # --- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
        errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            raise ConfigError(err.message, err.json_path)
        kw = dict(raw)
        for key in ("v", "n_grid", "eps_grid", "beta_grid", "ell_grid", "r_grid"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        if "h_grid" in kw:
            kw["h_grid"] = tuple(tuple(h) for h in kw["h_grid"])
        if "distribution" in kw:
            kw["distribution"] = {"family": "uniform", "a": 1.0, "b": 2.0, **kw["distribution"]}
        if "tau" in kw:
            kw["tau"] = {"kind": "envelope", "epsilon": 0.05, "pilot_trials": 500, **kw["tau"]}
        if "d" not in kw and kw.get("v") is not None:
            kw["d"] = len(kw["v"])
        if "h_grid" not in kw:
            kw["h_grid"] = ((0, 1) + (0,) * (kw.get("d", 2) - 2),)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}", "$.kind")
        if self.d < 2:
            raise ConfigError("d must be at least 2", "$.d")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1", "$.trials")
        dist = self.distribution
        if not 0 < dist["a"] < dist["b"]:
            raise ConfigError("need 0 < a < b", "$.distribution")
        try:
            self.dist()
        except ValueError as exc:
            raise ConfigError(str(exc), "$.distribution") from exc
        if self.v is not None:
            if len(self.v) != self.d:
                raise ConfigError(f"v has {len(self.v)} coordinates, d = {self.d}", "$.v")
            if l1(self.v) < 2:
                raise ConfigError("need |v|_1 >= 2", "$.v")
        for i, h in enumerate(self.h_grid):
            if len(h) != self.d:
                raise ConfigError(f"h has {len(h)} coordinates, d = {self.d}", f"$.h_grid[{i}]")
        needs_target = self.kind in ("influence", "fluctuation", "ratio", "coupling")
        if needs_target and (self.v is None) == (self.n_grid is None):
            raise ConfigError("give exactly one of v and n_grid", "$")
        if self.kind == "coupling" and self.v is None:
            raise ConfigError("coupling needs v", "$.v")
        if self.kind == "ratio" and self.tau.get("epsilon") is None:
            raise ConfigError("ratio needs tau.epsilon", "$.tau.epsilon")

    # --- derived ------------------------------------------------------------

    def dist(self):
        kw = {k: v for k, v in self.distribution.items() if k not in ("family", "a", "b")}
        return make_distribution(self.distribution["family"], self.distribution["a"], self.distribution["b"], **kw)

    def targets(self) -> list[tuple]:
        if self.v is not None:
            return [as_point(self.v)]
        return [tuple([int(n)] + [0] * (self.d - 1)) for n in self.n_grid]

    @property
    def seed_range(self) -> tuple[int, int]:
        lo = self.master_seed + self.trial_offset
        return (lo, lo + self.trials)

    def echo(self) -> dict:
        """Fields that determine results; output location is excluded."""
        out = asdict(self)
        out.pop("out_dir")
        for k, v in list(out.items()):
            if isinstance(v, tuple):
                out[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return out


@dataclass
class RunReport:
    config: ExperimentConfig
    seeds: tuple  # normalized half-open seed ranges
    tables: dict = field(default_factory=dict)  # name -> list of row dicts
    fits: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)  # deterministic invariants only
    diagnostics: dict = field(default_factory=dict)  # statistical checks, reported not enforced
    raw: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def trials(self) -> int:
        return sum(hi - lo for lo, hi in self.seeds)

    @property
    def ok(self) -> bool:
        return all(self.verdicts.values())

    def summary(self) -> dict:
        return {"config": self.config.echo(), "kind": self.kind, "trials": self.trials,
                "seeds": [list(s) for s in self.seeds], "verdicts": self.verdicts, "ok": self.ok,
                "diagnostics": self.diagnostics, "fits": self.fits, "tables": self.tables}


# ---------------------------------------------------------------------------
# parallel plumbing


def default_workers() -> int:
    env = os.environ.get("FPP_LAB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"FPP_LAB_WORKERS must be an integer, got {env!r}") from exc
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _chunks(lo: int, hi: int, parts: int) -> list[tuple[int, int]]:
    cuts = np.linspace(lo, hi, max(1, parts) + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(cuts, cuts[1:]) if b > a]


def _pmap(fn, cfg: ExperimentConfig, workers: int, *extra) -> list:
    """Apply ``fn(cfg, seed_lo, seed_hi, *extra)`` over chunks; concatenate in seed order."""
    lo, hi = cfg.seed_range
    if workers <= 1:
        return fn(cfg, lo, hi, *extra)
    out: list = []
    with ProcessPoolExecutor(workers) as ex:
        futures = [ex.submit(fn, cfg, a, b, *extra) for a, b in _chunks(lo, hi, 4 * workers)]
        for fut in futures:
            out.extend(fut.result())
    return out


# ---------------------------------------------------------------------------
# influence and ratio


def _influence_raw(cfg: ExperimentConfig, workers: int) -> dict:
    dist = cfg.dist()
    return {"fields": {v: estimate_influence(dist, v, cfg.trials, cfg.master_seed, cfg.trial_offset,
                                             workers=workers, method=cfg.method)
                       for v in cfg.targets()}}


def _influence_tables(cfg: ExperimentConfig, fields: dict) -> tuple[dict, dict, dict]:
    dist = cfg.dist()
    sets_rows, sum_rows = [], []
    verdicts: dict[str, bool] = {}
    in_range, trivial, antitone, lp_mono, bounded = True, True, True, True, True
    for v, f in sorted(fields.items()):
        n1 = l1(v)
        total = f.mean_length
        in_range &= n1 - SURE_TOL <= total <= dist.b / dist.a * n1 + SURE_TOL
        bounded &= all(0 <= k <= f.trials for k in f.hits.values())
        trivial &= trivial_count_bound_check(f, cfg.eps_grid)
        prev = None
        for eps in sorted(cfg.eps_grid):
            s = influence_set(f, eps)
            if prev is not None:
                antitone &= s.edges <= prev
            prev = s.edges
            sets_rows.append({"v": _fmt_point(v), "n": _norm(v), "epsilon": eps, "size": len(s),
                              "size_lower": len(s.lower), "size_upper": len(s.upper),
                              "seeds": _fmt_ranges(f.seeds)})
        sums = [lp_sum(f, beta) for beta in sorted(cfg.beta_grid)]
        lp_mono &= all(x >= y - SURE_TOL for x, y in zip(sums, sums[1:]))
        for beta, s in zip(sorted(cfg.beta_grid), sums):
            sum_rows.append({"v": _fmt_point(v), "n": _norm(v), "beta": beta, "lp_sum": s,
                             "sum_p_over_l1": total / n1, "seeds": _fmt_ranges(f.seeds)})
    verdicts["influence: 0 <= hits <= trials"] = bool(bounded)
    verdicts["influence: sum p in [|v|_1, (b/a)|v|_1]"] = bool(in_range)
    verdicts["influence: |A_eps| <= sum p / eps"] = bool(trivial)
    verdicts["influence: A_eps antitone in eps"] = bool(antitone)
    verdicts["influence: lp_sum non-increasing in beta"] = bool(lp_mono)
    return {"influence_sets": sets_rows, "lp_sums": sum_rows}, verdicts, {}


def _envelope_ratio_check(q, pairs: int, seed: int) -> bool:
    """Sampled pairs of materialized edges within ``2 log n`` satisfy ``q_e / q_e' in [0.1, 10]``."""
    rng = np.random.default_rng(seed)
    edges = list(q.values)
    ok = True
    for i in rng.integers(len(edges), size=pairs):
        e = edges[int(i)]
        shift = rng.integers(-int(2 * q.scale), int(2 * q.scale) + 1, size=e.dim)
        f = Edge(tuple(int(x) for x in np.asarray(e.base) + shift), int(rng.integers(e.dim)))
        if edge_center_distance(e, f) > 2 * q.scale:
            continue
        r = q.value(e) / q.value(f)
        ok &= 0.1 <= r <= 10.0
    return bool(ok)


def _ratio_tables(cfg: ExperimentConfig, fields: dict) -> tuple[dict, dict, dict]:
    eps = cfg.tau["epsilon"]
    rows = []
    ones, smooth, finite = True, True, True
    for v, f in sorted(fields.items()):
        A = influence_set(f, eps)
        n = _norm(v)
        row = {"v": _fmt_point(v), "n": n, "epsilon": eps, "size": len(A), "seeds": _fmt_ranges(f.seeds)}
        if len(A):
            q = smooth_envelope(A.edges, max(n, 3.0))
            R = proposition_ratio(q, f, cfg.d)
            s1, s2 = q.sums()
            ones &= all(q.values[e] == 1.0 for e in A.edges)
            smooth &= _envelope_ratio_check(q, 10_000, cfg.master_seed)
            finite &= math.isfinite(R) and R >= 0
            es, p = f.arrays()
            row.update({"sum_q": s1, "sum_q2": s2, "sum_qp": float(np.dot(q.value_array(es), p)), "R": R})
        else:
            row.update({"sum_q": math.nan, "sum_q2": math.nan, "sum_qp": math.nan, "R": math.nan})
        rows.append(row)
    verdicts = {"envelope: q = 1 on generators": bool(ones),
                "envelope: q ratio in [0.1, 10] within 2 log n": bool(smooth),
                "ratio: R finite and non-negative": bool(finite)}
    Rs = [r["R"] for r in rows if math.isfinite(r["R"])]
    diag = {"R_max_over_min": (max(Rs) / min(Rs)) if len(Rs) > 1 and min(Rs) > 0 else math.nan}
    return {"ratio": rows}, verdicts, diag


# ---------------------------------------------------------------------------
# fluctuation


def _fluctuation_chunk(cfg: ExperimentConfig, lo: int, hi: int) -> list:
    dist = cfg.dist()
    out = []
    for seed in range(lo, hi):
        env = EdgeEnvironment(dist, seed)
        for v in cfg.targets():
            g = shortest_path(env, (0,) * cfg.d, v, cfg.method)
            pts = g.vertex_array()
            out.append({"seed": seed, "trial": seed - cfg.master_seed, "v": v, "time": g.time, "length": len(g),
                        "along": slab_coordinate(pts, v), "dist": transversal_distance(pts, v),
                        "path": g.vertices if cfg.save_paths else None})
    return out


def _fluctuation_raw(cfg: ExperimentConfig, workers: int) -> dict:
    trials = _pmap(_fluctuation_chunk, cfg, workers)
    rows, hist, paths = [], {}, []
    exponent = 1.0 / (cfg.d + 1)
    for t in trials:
        v, n = t["v"], _norm(t["v"])
        max_dev = float(t["dist"].max())
        for lam in cfg.ell_grid:
            ell = lam * n
            in_slab_d = t["dist"][in_slab(t["along"], ell)]
            key = (_fmt_point(v), lam)
            h = hist.setdefault(key, Counter())
            h.update(in_slab_d.tolist())
            for c in cfg.r_grid:
                r = c * n**exponent
                rows.append({"seed": t["seed"], "trial": t["trial"], "v": _fmt_point(v), "n": n, "ell": ell, "r": r,
                             "count": int(np.count_nonzero(in_slab_d > r)), "max_dev": max_dev,
                             "length": t["length"], "time": t["time"]})
        if t["path"] is not None:
            paths.append({"seed": t["seed"], "trial": t["trial"], "v": _fmt_point(v),
                          "vertices": ";".join(_fmt_point(p) for p in t["path"])})
    return {"rows": rows, "hist": hist, "paths": paths}


def _fluctuation_tables(cfg: ExperimentConfig, raw: dict) -> tuple[dict, dict, dict]:
    dist = cfg.dist()
    rows = sorted(raw["rows"], key=lambda r: (r["n"], r["v"], r["trial"], r["ell"], r["r"]))
    exponent = 1.0 / (cfg.d + 1)
    by_trial: dict = {}
    for r in rows:
        by_trial.setdefault((r["v"], r["trial"]), []).append(r)
    r_mono, ell_mono, cap, bounds = True, True, True, True
    for (v, _), rs in by_trial.items():
        n1 = l1(_parse_point(v))
        for lam in cfg.ell_grid:
            counts = [x["count"] for x in rs if x["ell"] == lam * x["n"]]
            r_mono &= all(a >= b for a, b in zip(counts, counts[1:]))
        for c in cfg.r_grid:
            counts = [x["count"] for x in sorted(rs, key=lambda x: x["ell"]) if x["r"] == c * x["n"] ** exponent]
            ell_mono &= all(a <= b for a, b in zip(counts, counts[1:]))
        cap &= all(x["count"] <= x["length"] + 1 for x in rs)
        x = rs[0]
        bounds &= dist.a * n1 - SURE_TOL <= x["time"] <= dist.b * n1 + SURE_TOL and x["length"] >= n1
    verdicts = {"fluctuation: counts non-increasing in r": bool(r_mono),
                "fluctuation: counts non-decreasing in ell": bool(ell_mono),
                "fluctuation: counts <= vertex count": bool(cap),
                "geodesic: a|v|_1 <= T <= b|v|_1 and |gamma| >= |v|_1": bool(bounds)}
    dev_rows, count_rows, cstar_rows = [], [], []
    for v in sorted({r["v"] for r in rows}, key=lambda s: _norm(_parse_point(s))):
        n = _norm(_parse_point(v))
        trial_rows = [rs[0] for (vv, _), rs in sorted(by_trial.items()) if vv == v]
        devs = np.array([x["max_dev"] for x in trial_rows])
        dev_rows.append({"v": v, "n": n, "trials": len(devs), "median_max_dev": float(np.median(devs)),
                         "mean_max_dev": float(devs.mean()), "mean_length": float(np.mean([x["length"] for x in trial_rows])),
                         "mean_time": float(np.mean([x["time"] for x in trial_rows]))})
        for lam in cfg.ell_grid:
            for c in cfg.r_grid:
                cs = [x["count"] for x in rows if x["v"] == v and x["ell"] == lam * n and x["r"] == c * n**exponent]
                count_rows.append({"v": v, "n": n, "ell": lam * n, "c": c, "r": c * n**exponent,
                                   "mean_count": float(np.mean(cs)), "trials": len(cs)})
            hist = raw["hist"].get((v, lam), Counter())
            cstar_rows.append({"v": v, "n": n, "ell": lam * n, "exponent": exponent,
                               "c_star": _cstar_from_hist(hist, len(devs), lam * n / 2, n**exponent)})
    return {"deviation": dev_rows, "outside_counts": count_rows, "c_star": cstar_rows}, verdicts, {}


def _cstar_from_hist(hist: Counter, trials: int, need: float, scale: float) -> float:
    """Same value as ``largest_radius_constant`` computed from a distance histogram."""
    k = math.ceil(trials * need - 1e-9)
    if k <= 0:
        return math.inf
    seen = 0
    for dist in sorted(hist, reverse=True):
        seen += hist[dist]
        if seen >= k:
            return float(dist / scale) if dist > 0 else 0.0
    return 0.0


# ---------------------------------------------------------------------------
# coupling


def build_tau(cfg: ExperimentConfig, workers: int = 1) -> tuple[TauField, InfluenceField | None]:
    """Tau field from a pilot influence run on seeds disjoint from every trial range."""
    spec = cfg.tau
    if spec["kind"] == "zero":
        return TauField.zero(), None
    v = as_point(cfg.v)
    pilot = estimate_influence(cfg.dist(), v, spec["pilot_trials"], cfg.master_seed + PILOT_SEED_SHIFT,
                               workers=workers, method=cfg.method)
    A = influence_set(pilot, spec["epsilon"])
    if not len(A):
        raise ConfigError("pilot influence set is empty; lower tau.epsilon", "$.tau.epsilon")
    if spec["kind"] == "indicator":
        return TauField.indicator(A.edges), pilot
    return TauField.from_envelope(smooth_envelope(A.edges, max(_norm(v), 3.0))), pilot


def _coupling_chunk(cfg: ExperimentConfig, lo: int, hi: int, tau: TauField, delta: float) -> list:
    dist = cfg.dist()
    rep = GaussianRepresentation(dist)
    nice = nice_set(rep, delta)
    out = []
    for seed in range(lo, hi):
        for h in cfg.h_grid:
            rec = run_coupling(dist, cfg.v, h, tau, seed, delta, rep, nice, cfg.method)
            out.append({"trial": seed - cfg.master_seed, **rec.row()})
    return out


def _coupling_raw(cfg: ExperimentConfig, workers: int) -> dict:
    tau, pilot = build_tau(cfg, workers)
    rep = GaussianRepresentation(cfg.dist())
    delta = cfg.delta if cfg.delta is not None else default_delta(rep)
    rows = _pmap(_coupling_chunk, cfg, workers, tau, delta)
    return {"rows": rows, "tau": tau, "pilot": pilot, "delta": delta}


def _coupling_tables(cfg: ExperimentConfig, raw: dict) -> tuple[dict, dict, dict]:
    dist = cfg.dist()
    rep = GaussianRepresentation(dist)
    rows = sorted(raw["rows"], key=lambda r: (r["trial"], r["h"]))
    verdicts: dict[str, bool] = {}
    failures: Counter = Counter()
    for r in rows:
        rec = _record_from_row(r)
        for name, ok in rec.check(rep.C0, dist.b).items():
            verdicts.setdefault(f"coupling: {name}", True)
            if not ok:
                verdicts[f"coupling: {name}"] = False
                failures[name] += 1
    tau, pilot = raw["tau"], raw["pilot"]
    verdicts["tau: entries in [0, 1]"] = all(0 <= x <= 1 for x in tau.values.values())
    summary = {"records": len(rows), "C0": rep.C0, "delta": raw["delta"], "tau_norm": tau.norm,
               "tau_support": len(tau.values), "failures": dict(failures)}
    tables: dict = {"coupling_summary": [summary]}
    if pilot is not None and tau.values:
        mu = mu_estimate(pilot, tau)
        f0 = [r["f_gamma0"] for r in rows if r["h"] == _fmt_point(cfg.h_grid[0])]
        k_max = max(0, int(math.floor(math.log(max(f0) / mu, 3)))) + 1 if max(f0) > 0 else 0
        levels = qualifying_levels(f0, mu, k_max)
        tables["dyadic_levels"] = [{"mu": mu, "k_max": k_max, "qualifying": " ".join(map(str, levels)),
                                    "smallest": levels[0] if levels else None}]
        fh = {_parse_point(hs): [r["f_gammah"] for r in rows if r["h"] == hs]
              for hs in dict.fromkeys(_fmt_point(h) for h in cfg.h_grid)}
        tt = tail_transfer_table(f0, fh, mu)
        tables["tail_transfer"] = [{**r, "h": _fmt_point(r["h"]), "t": tt.t, "p0": tt.p0} for r in tt.rows]
        summary["passing_c1"] = tt.passing_c1
    return tables, verdicts, {}


def _record_from_row(r: dict) -> CouplingRecord:
    kw = {k: r[k] for k in CouplingRecord.__dataclass_fields__}
    kw["h"] = _parse_point(r["h"])
    return CouplingRecord(**kw)


# ---------------------------------------------------------------------------
# validate


def _validate(cfg: ExperimentConfig) -> tuple[dict, dict, dict]:
    dist = cfg.dist()
    rep = GaussianRepresentation(dist)
    verdicts: dict[str, bool] = {}
    diag: dict = {}
    # oracle equivalence on small boxes
    lo, hi = cfg.seed_range
    for box in (Box((0, 0), (3, 3)), Box((0, 0, 0), (2, 2, 2))):
        pts = box.points()
        ok = True
        for seed in range(lo, hi):
            env = EdgeEnvironment(dist, seed, box)
            for i, u in enumerate(pts):
                for w in pts[i + 1:]:
                    ok &= shortest_path(env, u, w).time == brute_force_passage_time(env, u, w, box)[0]
        verdicts[f"geodesic: oracle equivalence on {'x'.join(map(str, box.shape))} box"] = bool(ok)
    # g+ contracts
    rng = np.random.default_rng(cfg.master_seed)
    m = cfg.gplus_samples
    w = dist.sample(rng, m)
    tau = rng.uniform(0.0, 1.0, m)
    g = gplus_array(rep, w, tau)
    verdicts["gplus: w <= g(w) <= min(b, w + C0 tau)"] = bool(np.all((w <= g) & (g <= np.minimum(dist.b, w + rep.C0 * tau))))
    nice_ok = True
    for delta in (0.01, 0.05, 0.1):
        B = nice_set(rep, delta)
        inside = B.contains(w)
        nice_ok &= bool(np.all(g[inside] >= w[inside] + delta * tau[inside]))
    verdicts["gplus: g(w) >= w + delta tau on B_delta"] = nice_ok
    interior = (w > dist.a + 1e-9) & (w < dist.b - 1e-9)
    back = gplus_inverse_array(rep, g, tau)
    verdicts["gplus: inverse recovers w"] = bool(np.all(np.abs(back[interior] - w[interior]) <= 1e-9)
                                                 | ~np.any(interior))
    # environment determinism
    env = EdgeEnvironment(dist, cfg.master_seed)
    box = Box((-3, -3), (3, 3))
    grid = env.weights_on_box(box)
    pts = box.points()
    perm = rng.permutation(len(pts))
    det = all(env.weight(Edge(pts[i], ax)) == grid[(ax,) + tuple(np.subtract(pts[i], box.lo))]
              for i in perm for ax in range(2))
    verdicts["weights: pure function of (seed, edge)"] = bool(det)
    # Mermin-Wagner battery
    worst = math.inf
    for n in (1, 2, 5):
        tau_vec = np.full(n, 0.5 / math.sqrt(n))
        for name, event in mw_event_battery(dist, n):
            for p in (1.5, 2.0, 3.0):
                res = verify_mw_inequality(dist, tau_vec, event, p, cfg.mw_samples, cfg.master_seed + n, rep)
                worst = min(worst, res.margin_sigmas)
    verdicts["weights: MW inequality within 3 sigma"] = bool(worst >= -3.0)
    diag["mw_worst_margin_sigmas"] = worst
    return {}, verdicts, diag


# ---------------------------------------------------------------------------
# run / merge / fits


def _summarize(cfg: ExperimentConfig, raw: dict) -> tuple[dict, dict, dict]:
    if cfg.kind == "influence":
        return _influence_tables(cfg, raw["fields"])
    if cfg.kind == "ratio":
        t1, v1, d1 = _influence_tables(cfg, raw["fields"])
        t2, v2, d2 = _ratio_tables(cfg, raw["fields"])
        return {**t1, **t2}, {**v1, **v2}, {**d1, **d2}
    if cfg.kind == "fluctuation":
        return _fluctuation_tables(cfg, raw)
    if cfg.kind == "coupling":
        return _coupling_tables(cfg, raw)
    raise ValueError(f"kind {cfg.kind!r} has no raw data to summarize")


def _finish(report: RunReport) -> RunReport:
    try:
        report.fits = {k: v.as_dict() for k, v in fit_and_summarize(report).items()}
    except ValueError as exc:
        report.fits = {"error": str(exc)}
    return report


def run(config: ExperimentConfig, workers: int = 1) -> RunReport:
    """Run one experiment; artifacts depend only on ``config``."""
    config.validate()
    start = time.perf_counter()
    if config.kind == "validate":
        tables, verdicts, diag = _validate(config)
        report = RunReport(config, (config.seed_range,), tables, {}, verdicts, diag)
        report.wall_clock = time.perf_counter() - start
        return report
    if config.kind in ("influence", "ratio"):
        raw = _influence_raw(config, workers)
    elif config.kind == "fluctuation":
        raw = _fluctuation_raw(config, workers)
    else:
        raw = _coupling_raw(config, workers)
    tables, verdicts, diag = _summarize(config, raw)
    report = _finish(RunReport(config, (config.seed_range,), tables, {}, verdicts, diag, raw))
    report.wall_clock = time.perf_counter() - start
    return report


def merge(reports: Sequence[RunReport]) -> RunReport:
    """Combine runs that differ only in their seed ranges."""
    if not reports:
        raise ValueError("nothing to merge")
    if len(reports) == 1:
        return reports[0]
    base = reports[0].config
    strip = lambda c: replace(c, trials=1, trial_offset=0, out_dir="")  # noqa: E731
    for r in reports[1:]:
        if strip(r.config) != strip(base):
            raise ValueError("cannot merge reports with different configs")
    if base.kind == "validate":
        raise ValueError("validate reports carry no data to merge")
    seeds = _normalize_ranges([s for r in reports for s in r.seeds])
    lo = min(s[0] for s in seeds)
    cfg = replace(base, trials=sum(hi - l for l, hi in seeds), trial_offset=lo - base.master_seed)
    if base.kind in ("influence", "ratio"):
        fields = {}
        for r in reports:
            for v, f in r.raw["fields"].items():
                fields[v] = fields[v].merge(f) if v in fields else f
        raw = {"fields": fields}
    elif base.kind == "fluctuation":
        hist: dict = {}
        for r in reports:
            for k, h in r.raw["hist"].items():
                hist.setdefault(k, Counter()).update(h)
        raw = {"rows": [x for r in reports for x in r.raw["rows"]], "hist": hist,
               "paths": sorted((p for r in reports for p in r.raw["paths"]), key=lambda p: (p["trial"], p["v"]))}
    else:
        raw = {**reports[0].raw, "rows": [x for r in reports for x in r.raw["rows"]]}
    tables, verdicts, diag = _summarize(cfg, raw)
    out = _finish(RunReport(cfg, seeds, tables, {}, verdicts, diag, raw))
    out.wall_clock = sum(r.wall_clock for r in reports)
    return out


def fit_and_summarize(report: RunReport) -> dict:
    """Power-law fits over every multi-scale table in ``report``.

    Curves: ``|A_eps|`` against ``1/eps`` (one per target), median maximal
    deviation against ``n``, and mean outside-count against ``r`` (one per
    target and slab length). Curves with fewer than 3 positive points are
    skipped; an error is raised when nothing can be fitted.
    """
    fits: dict = {}
    short: list[str] = []

    def attempt(name, pairs):
        pairs = [(x, y) for x, y in pairs if x > 0 and y > 0]
        if len({x for x, _ in pairs}) >= 3:
            fits[name] = fit_exponent(pairs)
        else:
            short.append(name)

    t = report.tables
    for v in sorted({r["v"] for r in t.get("influence_sets", [])}):
        attempt(f"A_eps vs 1/eps [{v}]", [(1 / r["epsilon"], r["size"]) for r in t["influence_sets"] if r["v"] == v])
    if t.get("deviation"):
        attempt("max_dev vs n", [(r["n"], r["median_max_dev"]) for r in t["deviation"]])
    for key in sorted({(r["v"], r["ell"]) for r in t.get("outside_counts", [])}):
        attempt(f"count vs r [{key[0]}, ell={key[1]:g}]",
                [(r["r"], r["mean_count"]) for r in t["outside_counts"] if (r["v"], r["ell"]) == key])
    if not fits:
        raise ValueError("insufficient scales: need at least 3 positive points on some curve"
                         + (f" ({', '.join(short)})" if short else ""))
    return fits


# ---------------------------------------------------------------------------
# persistence


def _fmt_point(p) -> str:
    return " ".join(str(int(x)) for x in p)


def _parse_point(s: str) -> tuple:
    return tuple(int(x) for x in s.split())


def _fmt_ranges(ranges) -> str:
    return " ".join(f"{a}:{b}" for a, b in ranges)


def _norm(v) -> float:
    return float(l2(v))


def _cell(x: Any) -> str:
    if isinstance(x, bool) or x is None:
        return str(x)
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.writer(buf, lineterminator="\n")
        cols = list(rows[0])
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r[c]) for c in cols])
    return buf.getvalue()


def _read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serializable: {type(x)}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def ensure_writable(out: str | os.PathLike) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}", "$.out_dir") from exc
    return out


def write_report(report: RunReport, out: str | os.PathLike) -> Path:
    out = ensure_writable(out)
    raw = report.raw
    dist = report.config.dist()
    files: dict[str, str] = {}
    if report.kind in ("influence", "ratio"):
        for v, f in sorted(raw["fields"].items()):
            stem = "influence_" + "_".join(map(str, v))
            files[f"{stem}.csv"] = f.to_csv()
            files[f"{stem}.json"] = _dumps(f.metadata(dist))
    elif report.kind == "fluctuation":
        rows = sorted(raw["rows"], key=lambda r: (r["n"], r["v"], r["trial"], r["ell"], r["r"]))
        files["fluctuation.csv"] = _csv(rows)
        hist_rows = [{"v": v, "ell_factor": lam, "distance": d, "count": c}
                     for (v, lam), h in sorted(raw["hist"].items()) for d, c in sorted(h.items())]
        files["slab_distances.csv"] = _csv(hist_rows)
        if raw["paths"]:
            files["paths.csv"] = _csv(sorted(raw["paths"], key=lambda p: (p["trial"], p["v"])))
    elif report.kind == "coupling":
        cols = ["trial", *CouplingRecord.__dataclass_fields__]
        rows = sorted(raw["rows"], key=lambda r: (r["trial"], r["h"]))
        files["coupling.csv"] = _csv([{c: r[c] for c in cols} for r in rows])
        files["tau.csv"] = _csv([{"edge_base": _fmt_point(e.base), "axis": e.axis, "tau": t}
                                 for e, t in sorted(raw["tau"].values.items())])
    for name, rows in report.tables.items():
        files[f"table_{name}.csv"] = _csv(rows)
    files["report.json"] = _dumps(report.summary())
    for name, text in files.items():
        (out / name).write_text(text)
    (out / "timing.json").write_text(_dumps({"wall_clock_seconds": report.wall_clock}))
    return out


def load_report(path: str | os.PathLike) -> RunReport:
    """Rebuild a report, raw data included, from a run directory."""
    path = Path(path)
    meta = json.loads((path / "report.json").read_text())
    cfg = ExperimentConfig.from_dict({k: v for k, v in meta["config"].items() if v is not None})
    seeds = tuple(tuple(s) for s in meta["seeds"])
    raw: dict = {}
    if cfg.kind in ("influence", "ratio"):
        raw["fields"] = {}
        for v in cfg.targets():
            stem = "influence_" + "_".join(map(str, v))
            side = json.loads((path / f"{stem}.json").read_text())
            raw["fields"][v] = InfluenceField.from_csv((path / f"{stem}.csv").read_text(), v,
                                                        tuple(tuple(s) for s in side["seeds"]))
    elif cfg.kind == "fluctuation":
        rows = []
        for r in _read_csv((path / "fluctuation.csv").read_text()):
            rows.append({"seed": int(r["seed"]), "trial": int(r["trial"]), "v": r["v"], "n": float(r["n"]),
                         "ell": float(r["ell"]), "r": float(r["r"]), "count": int(r["count"]),
                         "max_dev": float(r["max_dev"]), "length": int(r["length"]), "time": float(r["time"])})
        hist: dict = {}
        for r in _read_csv((path / "slab_distances.csv").read_text()):
            hist.setdefault((r["v"], float(r["ell_factor"])), Counter())[float(r["distance"])] = int(r["count"])
        paths = []
        if (path / "paths.csv").exists():
            paths = [{"seed": int(r["seed"]), "trial": int(r["trial"]), "v": r["v"], "vertices": r["vertices"]}
                     for r in _read_csv((path / "paths.csv").read_text())]
        raw = {"rows": rows, "hist": hist, "paths": paths}
    elif cfg.kind == "coupling":
        rows = []
        for r in _read_csv((path / "coupling.csv").read_text()):
            row = {k: float(x) for k, x in r.items() if k not in ("trial", "seed", "h")}
            row.update({"trial": int(r["trial"]), "seed": int(r["seed"]), "h": r["h"]})
            rows.append(row)
        tau = TauField({Edge(_parse_point(r["edge_base"]), int(r["axis"])): float(r["tau"])
                        for r in _read_csv((path / "tau.csv").read_text())})
        pilot = None
        if cfg.tau["kind"] != "zero":
            pilot = estimate_influence(cfg.dist(), as_point(cfg.v), cfg.tau["pilot_trials"],
                                       cfg.master_seed + PILOT_SEED_SHIFT, method=cfg.method)
        raw = {"rows": rows, "tau": tau, "pilot": pilot, "delta": meta["tables"]["coupling_summary"][0]["delta"]}
    report = RunReport(cfg, seeds, meta["tables"], meta["fits"], meta["verdicts"], meta["diagnostics"], raw)
    timing = path / "timing.json"
    if timing.exists():
        report.wall_clock = json.loads(timing.read_text())["wall_clock_seconds"]
    return report


# ---------------------------------------------------------------------------
# command line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpp-lab", description="First-passage percolation experiments.")
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run a {kind} experiment")
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--seed", type=int, help="override master_seed")
        s.add_argument("--trials", type=int, help="override trials")
        s.add_argument("--trial-offset", type=int, help="override trial_offset (for split runs)")
        s.add_argument("--out", help="output directory (overrides out_dir)")
        s.add_argument("--workers", type=int, help="worker processes (default: $FPP_LAB_WORKERS or CPU count)")
    m = sub.add_parser("merge", help="merge run directories with disjoint seed ranges")
    m.add_argument("runs", nargs="+")
    m.add_argument("--out", required=True)
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.kind == "schema":
            print(_dumps(CONFIG_SCHEMA), end="")
            return EXIT_OK
        if args.kind == "merge":
            report = merge([load_report(r) for r in args.runs])
            out = args.out
            ensure_writable(out)
        else:
            if args.trials is not None and args.trials < 1:
                raise ConfigError("trials must be at least 1", "$.trials")
            cfg = ExperimentConfig.load(args.config, master_seed=args.seed, trials=args.trials,
                                        trial_offset=args.trial_offset, out_dir=args.out)
            if cfg.kind != args.kind:
                raise ConfigError(f"config kind {cfg.kind!r} does not match command {args.kind!r}", "$.kind")
            workers = args.workers if args.workers is not None else default_workers()
            if workers < 1:
                raise ConfigError("workers must be at least 1", "--workers")
            out = cfg.out_dir
            ensure_writable(out)
            report = run(cfg, workers)
        write_report(report, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    failed = [k for k, ok in report.verdicts.items() if not ok]
    for k, ok in report.verdicts.items():
        print(f"{'PASS' if ok else 'FAIL'}  {k}")
    print(f"wrote {out}")
    return EXIT_INVARIANT if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
