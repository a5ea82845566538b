import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from fpp_lab.lattice import Box, Edge
from fpp_lab.weights import (EdgeEnvironment, GaussianRepresentation, PerturbationMap, TruncatedLinear, Uniform,
                             box_uniforms, edge_uniform, gplus, gplus_array, gplus_inverse_array, make_distribution,
                             mw_event_battery, nice_set, perturb_environment, sample_weight, verify_mw_inequality)

from oracles import phi_cdf, uniform_gplus, uniform_nice_interval

DISTS = [Uniform(1.0, 2.0), Uniform(0.5, 3.0), TruncatedLinear(1.0, 2.0, 0.5), TruncatedLinear(1.0, 3.0, -0.9)]
unit_interval = st.floats(0.0, 1.0)


# --- distributions ---------------------------------------------------------------


@pytest.mark.parametrize("dist", DISTS, ids=str)
def test_distribution_contract(dist):
    assert dist.cdf(dist.a) == 0.0
    assert dist.cdf(dist.b) == 1.0
    xs = np.linspace(dist.a, dist.b, 2001)
    assert np.all(dist.pdf(xs) >= dist.alpha - 1e-15)
    np.testing.assert_allclose(dist.quantile(dist.cdf(xs)), xs, atol=1e-12, rtol=0)
    total, _ = integrate.quad(dist.pdf, dist.a, dist.b)
    assert total == pytest.approx(1.0, abs=1e-10)
    for x in (dist.a + 0.3 * (dist.b - dist.a), dist.b - 0.01):
        assert dist.cdf(x) == pytest.approx(integrate.quad(dist.pdf, dist.a, x)[0], abs=1e-10)
    mean, _ = integrate.quad(lambda x: x * dist.pdf(x), dist.a, dist.b)
    assert dist.mean == pytest.approx(mean, abs=1e-10)


@pytest.mark.parametrize("dist", DISTS, ids=str)
@given(u=unit_interval)
def test_quantile_inverts_cdf(dist, u):
    x = dist.quantile(u)
    assert dist.a <= x <= dist.b
    assert dist.cdf(x) == pytest.approx(u, abs=1e-12)


def test_make_distribution():
    assert make_distribution("uniform", 1, 2) == Uniform(1, 2)
    assert make_distribution("linear", 1, 2, tilt=0.3) == TruncatedLinear(1, 2, 0.3)
    with pytest.raises(ValueError):
        make_distribution("exponential")
    with pytest.raises(ValueError):
        Uniform(2, 1)
    with pytest.raises(ValueError):
        Uniform(0, 1)
    with pytest.raises(ValueError):
        TruncatedLinear(1, 2, 1.5)


def test_describe_roundtrip():
    for dist in DISTS:
        desc = dist.describe()
        kw = {k: v for k, v in desc.items() if k not in ("family", "a", "b", "alpha")}
        assert make_distribution(desc["family"], desc["a"], desc["b"], **kw) == dist


# --- per-edge randomness -----------------------------------------------------------


@given(st.integers(0, 2**64 - 1), st.tuples(st.integers(-10**6, 10**6), st.integers(-10**6, 10**6)),
       st.integers(0, 1))
def test_edge_uniform_pure(seed, base, axis):
    e = Edge(base, axis)
    u = edge_uniform(seed, e)
    assert 0.0 <= u < 1.0
    assert u == edge_uniform(seed, e)


def test_box_matches_scalar_and_order():
    box = Box((-3, 2, 0), (1, 4, 2))
    grid = box_uniforms(11, box)
    pts = box.points()
    order = np.random.default_rng(0).permutation(len(pts))
    for i in order:
        p = pts[i]
        for k in range(3):
            assert grid[(k,) + tuple(np.subtract(p, box.lo))] == edge_uniform(11, Edge(p, k))


def test_weights_independent_of_region_size():
    env = EdgeEnvironment(Uniform(), 5)
    small = env.weights_on_box(Box((0, 0), (2, 2)))
    big = env.weights_on_box(Box((-5, -5), (7, 7)))
    np.testing.assert_array_equal(small, big[:, 5:8, 5:8])


def test_uniform_marginal_mean_and_median():
    env = EdgeEnvironment(Uniform(1.0, 2.0), 2024)
    w = env.weights_on_box(Box((0, 0), (706, 707))).ravel()
    assert w.size >= 10**6
    assert w.mean() == pytest.approx(1.5, abs=0.002)
    assert np.mean(w <= 1.5) == pytest.approx(0.5, abs=0.002)
    assert w.min() >= 1.0 and w.max() <= 2.0
    # no detectable serial structure between neighbouring edges
    assert abs(np.corrcoef(w[:-1], w[1:])[0, 1]) < 0.005
    assert stats.kstest((w[:200_000] - 1.0), "uniform").pvalue > 1e-4


def test_seeds_give_different_environments():
    box = Box((0, 0), (9, 9))
    a = EdgeEnvironment(Uniform(), 1).weights_on_box(box)
    b = EdgeEnvironment(Uniform(), 2).weights_on_box(box)
    assert not np.any(a == b)


def test_sample_weight_alias():
    env = EdgeEnvironment(Uniform(), 3)
    e = Edge((4, -2), 1)
    assert sample_weight(env, e) == env.weight(e) == sample_weight(env, e)


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        edge_uniform(-1, Edge((0, 0), 0))


# --- Gaussian representation ------------------------------------------------------


@pytest.mark.parametrize("dist", DISTS, ids=str)
def test_representation_lipschitz(dist):
    rep = GaussianRepresentation(dist)
    z = np.linspace(-8, 8, 4001)
    F = rep.F(z)
    assert np.all(np.diff(F) >= 0)
    assert np.all(np.diff(F)[np.abs(z[:-1]) < 5] > 0)
    assert rep.C0 >= stats.norm.pdf(0) / dist.alpha
    for s in (1e-3, 0.1, 0.5, 1.0):
        assert np.all(rep.F(z + s) - F <= rep.C0 * s + 1e-12)
    assert rep.grid_lipschitz() <= rep.C0


def test_finv_clamped(rep):
    assert rep.Finv(2.0) == 8.0
    assert rep.Finv(1.0) == -8.0
    assert rep.Finv(1.5) == 0.0


# --- g+ ----------------------------------------------------------------------------------------


def test_gplus_known_value(rep):
    # F^-1(1.5) = 0 so g+ = 1 + Phi(0.5)
    expected = float(1 + phi_cdf(0.5))
    assert gplus(PerturbationMap(rep, 0.5), 1.5) == pytest.approx(expected, abs=1e-14)
    assert expected == pytest.approx(1.6915, abs=5e-5)


def test_gplus_identity_and_boundary(rep):
    w = np.linspace(1, 2, 101)
    np.testing.assert_array_equal(gplus(PerturbationMap(rep, 0.0), w), w)
    assert gplus(PerturbationMap(rep, 1.0), 2.0) == 2.0
    assert gplus(PerturbationMap(rep, 1.0), 1.0) >= 1.0


@given(w=st.floats(1.0, 2.0), tau=unit_interval)
def test_gplus_matches_high_precision(rep, w, tau):
    got = gplus(PerturbationMap(rep, tau), w)
    want = uniform_gplus(1.0, 2.0, w, tau)
    if rep.Finv(w) in (-8.0, 8.0):
        return  # clamped region: the oracle has no clamp
    assert got == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("dist", DISTS, ids=str)
def test_gplus_envelope_bulk(dist):
    rep = GaussianRepresentation(dist)
    rng = np.random.default_rng(1)
    w = np.concatenate([dist.sample(rng, 10**5), [dist.a, dist.b]])
    tau = np.concatenate([rng.random(10**5), [1.0, 1.0]])
    g = gplus_array(rep, w, tau)
    assert np.all(w <= g)
    assert np.all(g <= np.minimum(dist.b, w + rep.C0 * tau))


@given(w1=st.floats(1.0, 2.0), w2=st.floats(1.0, 2.0), t1=unit_interval, t2=unit_interval)
def test_gplus_monotone(rep, w1, w2, t1, t2):
    lo, hi = sorted((w1, w2))
    tl, th = sorted((t1, t2))
    assert gplus_array(rep, lo, tl) <= gplus_array(rep, hi, tl)
    assert gplus_array(rep, lo, tl) <= gplus_array(rep, lo, th)


@pytest.mark.parametrize("dist", DISTS, ids=str)
def test_gplus_inverse(dist):
    rep = GaussianRepresentation(dist)
    rng = np.random.default_rng(2)
    w = dist.sample(rng, 10**5)
    tau = rng.random(10**5)
    # away from the clamp F o F^-1 is exact to rounding
    ok = np.abs(rep.Finv(w) + tau) < 7.5
    back = gplus_inverse_array(rep, gplus_array(rep, w, tau), tau)
    assert np.max(np.abs(back[ok] - w[ok])) <= 1e-9
    assert np.all(PerturbationMap(rep, 0.3).inverse(w) <= w)


@pytest.mark.parametrize("w", [0.99, 2.01])
def test_gplus_rejects_w_outside_support(rep, w):
    with pytest.raises(ValueError):
        gplus(PerturbationMap(rep, 0.5), w)


@pytest.mark.parametrize("tau", [-0.1, 1.1, math.nan])
def test_gplus_rejects_bad_tau(rep, tau):
    with pytest.raises(ValueError):
        PerturbationMap(rep, tau)


# --- nice sets --------------------------------------------------------------------------------


def test_nice_set_known_interval(rep):
    B = nice_set(rep, 0.1)
    lo, hi, G = uniform_nice_interval(1.0, 2.0, 0.1, margin=1e-6)
    assert B.lo == pytest.approx(lo, abs=1e-9)
    assert B.hi == pytest.approx(hi, abs=1e-9)
    assert B.measure == pytest.approx(G, abs=1e-9)
    assert (round(B.lo, 3), round(B.hi, 3)) == (1.048, 1.747)
    assert B.measure == pytest.approx(0.699, abs=1e-3)


@pytest.mark.parametrize("dist", DISTS, ids=str)
def test_nice_set_measure_monotone_to_one(dist):
    rep = GaussianRepresentation(dist)
    deltas = [rep.C0 * 1.01, 0.2, 0.1, 0.05, 0.01, 1e-3, 1e-5]
    G = [nice_set(rep, d).measure for d in deltas]
    assert G[0] == 0.0 and nice_set(rep, deltas[0]).empty
    assert all(x <= y for x, y in zip(G, G[1:]))
    assert G[-1] > 0.99


@pytest.mark.parametrize("dist", DISTS, ids=str)
@pytest.mark.parametrize("delta", [0.01, 0.05, 0.1])
def test_nice_set_gain_bulk(dist, delta):
    rep = GaussianRepresentation(dist)
    B = nice_set(rep, delta)
    rng = np.random.default_rng(3)
    w = rng.uniform(B.lo, B.hi, 10**5) if not B.empty else np.zeros(0)
    w = np.concatenate([w, [B.lo, B.hi]]) if not B.empty else w
    tau = rng.random(w.size)
    assert np.all(gplus_array(rep, w, tau) >= w + delta * tau)
    assert np.all(B.contains(w))


def test_nice_set_membership_and_errors(rep):
    B = nice_set(rep, 0.1)
    assert B.contains(1.5) and not B.contains(1.0) and not B.contains(1.9)
    assert B.intervals == [(B.lo, B.hi)]
    with pytest.raises(ValueError):
        nice_set(rep, 0.0)


# --- Mermin-Wagner transfer ----------------------------------------------------------------------


def test_mw_zero_tau_and_full_space(unif):
    ev = lambda x: x.sum(-1) >= 3.0  # noqa: E731
    r = verify_mw_inequality(unif, [0.0, 0.0], ev, 2.0, 10**4, 0)
    assert r.lhs >= r.rhs
    r = verify_mw_inequality(unif, [0.7, 0.2], lambda x: np.ones(len(x), bool), 1.5, 10**3, 0)
    assert r.lhs == 1.0 and r.lhs >= r.rhs and r.margin_sigmas == math.inf


def test_mw_worked_example(unif):
    r = verify_mw_inequality(unif, [0.3, 0.4], lambda x: x.sum(-1) >= 3.4, 2.0, 10**6, 7)
    assert r.margin_sigmas >= -3
    # rhs = exp(-2 * 0.25 / 2) P(A)^2 with P(A) = 0.18 for the uniform sum
    assert r.rhs == pytest.approx(math.exp(-0.25) * 0.18**2, rel=0.02)


@pytest.mark.parametrize("p, samples, tau", [(1.0, 10, [0.1]), (0.5, 10, [0.1]), (2.0, 0, [0.1]),
                                             (2.0, 10, []), (2.0, 10, [1.5])])
def test_mw_errors(unif, p, samples, tau):
    with pytest.raises(ValueError):
        verify_mw_inequality(unif, tau, lambda x: x[..., 0] > 1.5, p, samples, 0)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_mw_battery_shape(unif, n):
    events = mw_event_battery(unif, n)
    assert len(events) == 20
    assert len({name for name, _ in events}) == 20
    x = unif.sample(np.random.default_rng(0), (1000, n))
    for _, ev in events:
        out = ev(x)
        assert out.shape == (1000,) and out.dtype == bool


@pytest.mark.parametrize("dist", DISTS[2:], ids=str)
def test_mw_battery_small(dist):
    rep = GaussianRepresentation(dist)
    for n in (1, 3):
        tau = np.full(n, 0.5 / math.sqrt(n))
        for _, ev in mw_event_battery(dist, n):
            for p in (1.5, 3.0):
                assert verify_mw_inequality(dist, tau, ev, p, 20_000, 5, rep).margin_sigmas >= -3


# --- perturbed environments --------------------------------------------------------------------------


def test_perturb_empty_is_identity(unif):
    env = EdgeEnvironment(unif, 9)
    plus = perturb_environment(env, {})
    box = Box((-2, -2), (2, 2))
    np.testing.assert_array_equal(plus.weights_on_box(box), env.weights_on_box(box))


def test_perturb_single_edge_locality(unif, rep):
    env = EdgeEnvironment(unif, 9)
    e = Edge((1, 1), 0)
    plus = perturb_environment(env, {e: 1.0})
    box = Box((-2, -2), (3, 3))
    w, wp = env.weights_on_box(box), plus.weights_on_box(box)
    idx = (0, 3, 3)
    assert 0 < wp[idx] - w[idx] <= rep.C0
    mask = np.ones_like(w, bool)
    mask[idx] = False
    np.testing.assert_array_equal(w[mask], wp[mask])
    assert plus.weight(e) == wp[idx]
    assert env.weight(e) == w[idx]


def test_perturb_monotone_and_consistent(unif):
    env = EdgeEnvironment(unif, 4)
    rng = np.random.default_rng(0)
    box = Box((0, 0), (5, 5))
    tau = {Edge(p, k): float(rng.random()) for p in box.points() for k in range(2) if rng.random() < 0.5}
    plus = perturb_environment(env, tau)
    wp, w = plus.weights_on_box(box), env.weights_on_box(box)
    assert np.all(wp >= w)
    for e in list(tau)[:20]:
        assert plus.weight(e) == wp[(e.axis,) + e.base]


def test_perturb_rejects_bad_tau(unif):
    env = EdgeEnvironment(unif, 4)
    with pytest.raises(ValueError):
        perturb_environment(env, {Edge((0, 0), 0): 1.5})


def test_translated_environment(unif):
    env = EdgeEnvironment(unif, 8)
    h = (3, -2)
    moved = env.translated(h)
    e = Edge((1, 1), 1)
    assert moved.weight(e) == env.weight(e.translate(h))
    box = Box((0, 0), (2, 2))
    np.testing.assert_array_equal(moved.weights_on_box(box),
                                  env.weights_on_box(Box((3, -2), (5, 0))))
