import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_hawkes.data import DomainBounds, build_log
from latent_hawkes.features import VenueFeatureTable
from latent_hawkes.intensity import ExcitationGraph, ModelParameters, average_base_rates
from latent_hawkes.likelihood import (L2Weights, SampleObjective, full_samples, gradient, log_likelihood,
                                      log_prior)

from oracles import (central_difference, intensity_direct, latent_cats, log_joint_direct,
                     quadrature_compensator, random_features, random_log)

BOUNDS = DomainBounds(0.0, 10.0, 40.0, 40.5, -74.0, -73.5)


def _blank(n):
    return VenueFeatureTable(np.zeros((n, 7)), np.zeros((n, 4)), ())


def test_single_event_hand_value():
    k = 3
    log = build_log(["u"], ["v"], [4.0], [40.2], [-73.8], ["c1"], category_names=["c0", "c1", "c2"],
                    bounds=BOUNDS)
    p = ModelParameters.zeros(k, eta=1.0, h=0.01)
    got = log_likelihood(log, None, _blank(1), p)
    m, t, xy = 1, 10.0, 0.25
    assert got.log_events == pytest.approx(math.log(2.0), rel=1e-15)
    assert got.log_compensator == pytest.approx(2 * k * m * t * xy, rel=1e-15)
    assert got.total == pytest.approx(math.log(2.0) - 2 * k * m * t * xy, rel=1e-14)


def test_extra_idle_user_adds_only_base_term():
    rng = np.random.default_rng(0)
    log = random_log(rng, n_events=6, n_users=1)
    feats = random_features(rng, log.n_venues)
    p = ModelParameters.random_init(2, 0.8, 0.01, rng)
    one = log_likelihood(log, None, feats, p)
    two_users = build_log([log.user_ids[u] for u in log.users], [log.venue_ids[v] for v in log.venues],
                          log.times, log.lat, log.lon, [log.category_names[c] for c in log.categories],
                          category_names=log.category_names, user_ids=["u0", "idle"],
                          venue_ids=log.venue_ids)
    two = log_likelihood(two_users, None, feats, p)
    b = log.bounds
    assert two.log_events == one.log_events
    extra = b.area * b.duration * average_base_rates(p, feats).sum()
    assert two.log_compensator - one.log_compensator == pytest.approx(extra, rel=1e-12)


def test_latent_without_assignment_rejected():
    log = random_log(np.random.default_rng(1), n_latent=2)
    p = ModelParameters.zeros(2)
    with pytest.raises(ValueError):
        log_likelihood(log, None, _blank(log.n_venues), p)


@pytest.mark.parametrize("seed", range(3))
def test_five_event_quadrature_oracle(seed):
    rng = np.random.default_rng(seed)
    h = 0.01
    box = (40.0, 40.8, -74.0, -73.2)
    n = 5
    xs = rng.uniform(40.3, 40.5, n)
    ys = rng.uniform(-73.7, -73.5, n)
    ts = np.sort(rng.uniform(0, 6, n))
    cats = rng.integers(2, size=n)
    log = build_log(["u"] * n, [f"v{i}" for i in range(n)], ts, xs, ys, [f"c{c}" for c in cats],
                    category_names=["c0", "c1"], bounds=DomainBounds(0.0, 6.0, *box))
    feats = random_features(rng, n)
    p = ModelParameters.random_init(2, 0.6, h, rng).with_values(alpha=rng.uniform(1, 8, (2, 2)))
    got = log_likelihood(log, None, feats, p)
    # independent: direct lambda products plus cubature of the compensator
    ev = sum(math.log(intensity_direct(p, feats, log, cats, i)) for i in range(n))
    mbar = average_base_rates(p, feats)
    events = np.column_stack([ts, xs, ys])
    comp = sum(quadrature_compensator(mbar[c], events, p.alpha[c, cats], (0.0, 6.0), box, p.eta, h)[0]
               for c in range(2))
    assert got.log_events - got.log_compensator == pytest.approx(ev - comp, rel=1e-3)
    assert got.log_compensator == pytest.approx(comp, rel=1e-3)


def test_log_prior_cases():
    assert log_prior(np.array([0, 1, 2, 1]), np.full(3, 1 / 3)) == pytest.approx(-4 * math.log(3))
    assert log_prior(np.zeros(0, int), np.full(3, 1 / 3)) == 0.0
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(4))
    z = rng.integers(4, size=17)
    assert log_prior(z, p) == pytest.approx(sum(math.log(p[i]) for i in z), rel=1e-13)
    assert math.isfinite(log_prior(np.array([0]), np.array([0.0, 1.0])))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_objective_matches_direct_log_joint(seed):
    rng = np.random.default_rng(seed)
    log = random_log(rng, n_events=7, n_users=2, k=3, n_latent=2)
    feats = random_features(rng, log.n_venues)
    p = ModelParameters.random_init(3, rng.uniform(0.2, 2), 0.01, rng).with_values(alpha=rng.uniform(0, 6, (3, 3)))
    samples = rng.integers(3, size=(4, 2))
    obj = SampleObjective(log, ExcitationGraph(log, p.eta, p.h), feats, full_samples(log, samples))
    ref = [log_joint_direct(p, feats, log, latent_cats(log, s)) for s in samples]
    np.testing.assert_allclose(obj.per_sample(p), ref, rtol=1e-10)
    assert obj.value(p) == pytest.approx(np.mean(ref), rel=1e-10)


def _flat_objective(obj, p):
    k = p.n_categories
    sizes = [k * 7, k * 4, k * k]

    def f(x):
        a, b, c = np.split(x, np.cumsum(sizes)[:-1])
        return obj.value(p.with_values(w_day=a.reshape(k, 7), w_hour=b.reshape(k, 4), alpha=c.reshape(k, k)))
    return f


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    k = 2 + seed % 2
    log = random_log(rng, n_events=6, n_users=2, k=k, n_latent=2)
    feats = random_features(rng, log.n_venues)
    p = ModelParameters.random_init(k, 0.5, 0.01, rng).with_values(
        w_day=rng.normal(0, 1, (k, 7)), w_hour=rng.normal(0, 1, (k, 4)), alpha=rng.uniform(0.5, 5, (k, k)))
    samples = rng.integers(k, size=(3, 2))
    l2 = L2Weights(0.1, 0.2, 0.3)
    obj = SampleObjective(log, ExcitationGraph(log, p.eta, p.h), feats, full_samples(log, samples), l2=l2)
    _, g = obj.value_and_gradient(p)
    x0 = np.concatenate([p.w_day.ravel(), p.w_hour.ravel(), p.alpha.ravel()])
    fd = central_difference(_flat_objective(obj, p), x0, step=1e-5)
    np.testing.assert_allclose(g.flat(), fd, rtol=1e-4, atol=1e-6)


def test_alpha_gradient_zero_without_pairs_or_mass():
    # every user has one event at the end of the window: no pairs, no remaining mass
    log = build_log(["a", "b", "c"], ["v0", "v1", "v2"], [5.0, 5.0, 5.0], [40.0, 40.1, 40.2],
                    [-74.0, -74.1, -74.2], ["x", "y", "x"])
    p = ModelParameters.zeros(2, eta=1.0, h=0.01)
    g = gradient(log, np.zeros((1, 0), int), _blank(3), p, l2=L2Weights())
    assert np.all(g.alpha == 0.0)


def test_alpha_gradient_at_zero_is_minus_mass():
    rng = np.random.default_rng(7)
    log = build_log(["a", "b"], ["v0", "v1"], [1.0, 2.0], [40.0, 40.1], [-74.0, -74.1], ["x", "y"],
                    bounds=DomainBounds(0.0, 4.0, 40.0, 40.1, -74.1, -74.0))
    p = ModelParameters.zeros(2, eta=1.0, h=0.01)
    g = gradient(log, np.zeros((1, 0), int), _blank(2), p, l2=L2Weights())
    mass = 8 * math.pi * 1e-4 * np.array([1 - math.exp(-3.0), 1 - math.exp(-2.0)])
    np.testing.assert_allclose(g.alpha, -np.tile(mass, (2, 1)), rtol=1e-12)
    assert g.alpha_at_bound.all()
    assert np.all(g.projected_alpha() == 0.0)
    assert rng is not None


def test_l2_is_linear():
    rng = np.random.default_rng(5)
    log = random_log(rng, n_events=6, k=2, n_latent=1)
    feats = random_features(rng, log.n_venues)
    p = ModelParameters.random_init(2, 0.5, 0.01, rng)
    s = np.array([[1]])
    g0 = gradient(log, s, feats, p, l2=L2Weights(0, 0, 0))
    g1 = gradient(log, s, feats, p, l2=L2Weights(0.1, 0.2, 0.3))
    g2 = gradient(log, s, feats, p, l2=L2Weights(0.2, 0.4, 0.6))
    np.testing.assert_allclose(g2.flat() - g0.flat(), 2 * (g1.flat() - g0.flat()), rtol=1e-10, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 3), st.floats(0.01, 2.0))
def test_alpha_direction(seed, entry, bump):
    rng = np.random.default_rng(seed)
    log = random_log(rng, n_events=6, n_users=1, k=2)
    feats = random_features(rng, log.n_venues)
    p = ModelParameters.random_init(2, 0.5, 0.01, rng)
    alpha = p.alpha.copy()
    alpha.flat[entry] += bump
    before = log_likelihood(log, None, feats, p)
    after = log_likelihood(log, None, feats, p.with_values(alpha=alpha))
    assert after.log_events >= before.log_events - 1e-12
    used = np.asarray(log.categories)[log.times < log.bounds.t_max]
    if (entry % 2) in used:
        assert after.log_compensator > before.log_compensator


def test_deterministic():
    rng = np.random.default_rng(9)
    log = random_log(rng, n_events=8, k=3, n_latent=3)
    feats = random_features(rng, log.n_venues)
    p = ModelParameters.random_init(3, 0.5, 0.01, rng)
    z = np.array([0, 2, 1])
    assert log_likelihood(log, z, feats, p) == log_likelihood(log, z, feats, p)


def test_empty_sample_set_rejected():
    log = random_log(np.random.default_rng(2), n_latent=1)
    with pytest.raises(ValueError):
        full_samples(log, np.zeros((0, 1), int))
