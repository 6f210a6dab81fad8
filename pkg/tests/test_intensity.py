import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_hawkes.data import MISSING, build_log
from latent_hawkes.features import VenueFeatureTable
from latent_hawkes.intensity import (ExcitationGraph, HistoryView, ModelParameters, average_base_rates,
                                     base_intensity, compensator, conditional_intensity, distance,
                                     history_view, spatial_kernel, temporal_kernel)

from oracles import (intensity_direct, mu_direct, quadrature_compensator, quadrature_instance, random_features,
                     random_log)


def test_temporal_kernel_values():
    assert temporal_kernel(0.0, 0.7) == 1.0
    assert temporal_kernel(1 / 0.7, 0.7) == pytest.approx(math.exp(-1), abs=1e-15)
    grid = temporal_kernel(np.linspace(0, 20, 50), 0.3)
    assert np.all(np.diff(grid) < 0)
    with pytest.raises(ValueError):
        temporal_kernel(-1.0, 1.0)


def test_spatial_kernel_values():
    assert spatial_kernel(0.0, 0.01) == 1.0
    assert spatial_kernel(0.02, 0.01) == pytest.approx(math.exp(-1), abs=1e-15)
    with pytest.raises(ValueError):
        spatial_kernel(-0.1, 0.01)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(1e-3, 1.0))
def test_spatial_kernel_high_precision(d, h):
    ref = float(mpmath.exp(-mpmath.mpf(d) / (2 * mpmath.mpf(h))))
    assert spatial_kernel(d, h) == pytest.approx(ref, rel=1e-13, abs=1e-300)


def test_base_intensity_cases():
    feats = random_features(np.random.default_rng(0), 3)
    zero = ModelParameters.zeros(2)
    assert base_intensity(1, 2, feats, zero) == 2.0
    blank = VenueFeatureTable(np.zeros((1, 7)), np.zeros((1, 4)), ("v",))
    rng = np.random.default_rng(1)
    p = ModelParameters.random_init(2, 1.0, 0.01, rng)
    assert base_intensity(0, "v", blank, p) == 2.0
    for c in range(2):
        for v in range(3):
            assert base_intensity(c, v, feats, p) == pytest.approx(mu_direct(p, feats, c, v), rel=1e-14)
    with pytest.raises(KeyError):
        base_intensity(0, "nope", blank, p)


def _two_user_log():
    return build_log(["a", "a", "b", "a"], ["v0", "v1", "v0", "v1"], [0.0, 1.0, 1.5, 3.0],
                     [40.0, 40.01, 40.0, 40.01], [-74.0, -74.0, -74.0, -74.0], ["x", "y", "x", "x"])


def test_conditional_intensity_hand_sum():
    log = _two_user_log()
    feats = VenueFeatureTable(np.zeros((2, 7)), np.zeros((2, 4)), ("v0", "v1"))
    p = ModelParameters.zeros(2, eta=0.5, h=0.01).with_values(alpha=np.array([[2.0, 3.0], [0.5, 1.0]]))
    hist = history_view(log, 3.0)
    lam = conditional_intensity(0, 0, 3.0, (40.01, -74.0), 1, hist, feats, p)
    # event 0 (cat x, 0.01 deg away, 3 h ago) and event 1 (cat y, same spot, 2 h ago); user b ignored
    hand = 2.0 + 2.0 * math.exp(-1.5) * math.exp(-0.5) + 3.0 * math.exp(-1.0) * 1.0
    assert lam == pytest.approx(hand, rel=1e-14)


def test_conditional_intensity_degenerate_histories():
    log = _two_user_log()
    feats = VenueFeatureTable(np.zeros((2, 7)), np.zeros((2, 4)), ("v0", "v1"))
    p = ModelParameters.zeros(2)
    assert conditional_intensity(0, 0, 0.0, (40, -74), 0, history_view(log, 0.0), feats, p) == 2.0
    assert conditional_intensity(1, 0, 3.0, (40, -74), 0, history_view(log, 3.0), feats, p) == 2.0
    # the other user's event alone never excites
    p = p.with_values(alpha=np.ones((2, 2)))
    hist_b = history_view(log, 1.6, user=1)
    assert conditional_intensity(0, 0, 1.6, (40, -74), 0, hist_b, feats, p) == 2.0


def test_unresolved_latent_history_rejected():
    log = build_log(["a", "a"], ["v", "v"], [0.0, 1.0], [40.0] * 2, [-74.0] * 2, [None, "x"])
    feats = VenueFeatureTable(np.zeros((1, 7)), np.zeros((1, 4)), ("v",))
    p = ModelParameters.zeros(1).with_values(alpha=np.ones((1, 1)))
    with pytest.raises(ValueError):
        conditional_intensity(0, 0, 1.0, (40, -74), 0, history_view(log, 1.0), feats, p)
    hist = history_view(log, 1.0, categories=np.array([0, 0]))
    assert conditional_intensity(0, 0, 1.0, (40, -74), 0, hist, feats, p) == pytest.approx(2 + math.exp(-1))
    with pytest.raises(ValueError):
        HistoryView(0.5, np.array([0]), np.array([1.0]), np.zeros((1, 2)), np.array([0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_intensity_properties(seed):
    rng = np.random.default_rng(seed)
    log = random_log(rng, n_events=7, n_users=2, k=3)
    feats = random_features(rng, log.n_venues)
    p = ModelParameters.random_init(3, rng.uniform(0.1, 2), rng.uniform(0.005, 0.05), rng)
    p = p.with_values(alpha=rng.uniform(0, 5, (3, 3)))
    cats = np.asarray(log.categories)
    t_last = log.times[-1]
    t = t_last + 0.1
    hist = history_view(log, t)
    loc = log.locations[-1]
    for c in range(3):
        lam = conditional_intensity(c, 0, t, loc, 0, hist, feats, p)
        assert lam >= base_intensity(c, 0, feats, p)
        # no new events between t and t + 0.5, so the intensity can only decay
        later = conditional_intensity(c, 0, t + 0.5, loc, 0, history_view(log, t + 0.5), feats, p)
        assert later <= lam + 1e-12
    # swap two history entries: same value
    idx = np.arange(len(hist))[::-1]
    swapped = HistoryView(hist.query_time, hist.users[idx], hist.times[idx], hist.locations[idx],
                          hist.categories[idx])
    assert conditional_intensity(1, 0, t, loc, 0, swapped, feats, p) == pytest.approx(
        conditional_intensity(1, 0, t, loc, 0, hist, feats, p), rel=1e-13)
    # batched graph agrees with the loop oracle at every event
    g = ExcitationGraph(log, p.eta, p.h)
    a = g.excitation(cats, 3)
    mu = np.array([[mu_direct(p, feats, c, v) for v in range(log.n_venues)] for c in range(3)])
    lam_graph = mu[cats, log.venues] + np.einsum("nk,nk->n", p.alpha[cats], a)
    lam_loop = [intensity_direct(p, feats, log, cats, n) for n in range(len(log))]
    np.testing.assert_allclose(lam_graph, lam_loop, rtol=1e-12)


def test_compensator_trivial_cases():
    feats = VenueFeatureTable(np.zeros((1, 7)), np.zeros((1, 4)), ("v",))
    p = ModelParameters.zeros(2)
    empty = HistoryView(10.0, np.zeros(0, int), np.zeros(0), np.zeros((0, 2)), np.zeros(0, int))
    assert compensator(0, 1, (2.0, 7.0), empty, feats, p, area=0.5) == pytest.approx(2.0 * 5.0 * 0.5)
    assert compensator(0, 1, (3.0, 3.0), empty, feats, p, area=0.5) == 0.0
    with pytest.raises(ValueError):
        compensator(0, 1, (3.0, 2.0), empty, feats, p, area=0.5)


def test_average_base_rate_is_venue_mean():
    rng = np.random.default_rng(4)
    feats = random_features(rng, 5)
    feats = VenueFeatureTable(np.vstack([feats.day_hist, np.zeros(7)]),
                              np.vstack([feats.hour_hist, np.zeros(4)]), ())
    p = ModelParameters.random_init(2, 1.0, 0.01, rng)
    ref = [np.mean([mu_direct(p, feats, c, v) for v in range(5)]) for c in range(2)]
    np.testing.assert_allclose(average_base_rates(p, feats), ref, rtol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_compensator_matches_quadrature(seed):
    log, p, feats, box, window = quadrature_instance(seed)
    area = (box[1] - box[0]) * (box[3] - box[2])
    hist = history_view(log, window[1] + 1e-9)
    c = 1
    got = compensator(0, c, window, hist, feats, p, area=area, venue_context=0)
    base_only = compensator(0, c, window, HistoryView(0.0, *(np.zeros(0),) * 2, np.zeros((0, 2)), np.zeros(0, int)),
                            feats, p, area=area, venue_context=0)
    events = np.column_stack([log.times, log.lat, log.lon])
    ref, ref_exc = quadrature_compensator(base_intensity(c, 0, feats, p), events, p.alpha[c, log.categories],
                                          window, box, p.eta, p.h)
    assert got == pytest.approx(ref, rel=1e-3)
    assert got - base_only == pytest.approx(ref_exc, rel=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_compensator_additive(seed, a, b, c):
    t_a, t_b, t_c = sorted([a, b + 1.0, c + 2.0])
    rng = np.random.default_rng(seed)
    log = random_log(rng, n_events=5, n_users=1, duration=8.0)
    feats = random_features(rng, log.n_venues)
    p = ModelParameters.random_init(2, 0.7, 0.01, rng).with_values(alpha=rng.uniform(0, 3, (2, 2)))
    hist = history_view(log, 100.0)
    whole = compensator(0, 1, (t_a, t_c), hist, feats, p, area=0.01)
    parts = (compensator(0, 1, (t_a, t_b), hist, feats, p, area=0.01)
             + compensator(0, 1, (t_b, t_c), hist, feats, p, area=0.01))
    assert whole == pytest.approx(parts, rel=1e-12)


def test_haversine_switch():
    a = np.array([0.0, 0.0])
    b = np.array([0.0, 1.0])
    assert distance(a, b, "euclidean") == pytest.approx(1.0)
    assert distance(a, b, "haversine") == pytest.approx(1.0, rel=1e-12)  # along the equator
    c = np.array([60.0, 1.0])
    assert distance(np.array([60.0, 0.0]), c, "haversine") == pytest.approx(0.5, rel=1e-3)
    with pytest.raises(ValueError):
        distance(a, b, "manhattan")


def test_parameter_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelParameters.zeros(2).with_values(alpha=-np.ones((2, 2)))
    with pytest.raises(ValueError):
        ModelParameters.zeros(2, eta=0.0)
    with pytest.raises(ValueError):
        ModelParameters.zeros(2).with_values(prior_p=np.array([0.9, 0.3]))
    p = ModelParameters.random_init(3, 0.4, 0.02, np.random.default_rng(0))
    q = ModelParameters.from_dict(p.to_dict())
    for name in ("w_day", "w_hour", "alpha", "prior_p"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    assert (q.eta, q.h, q.metric) == (p.eta, p.h, p.metric)
    assert MISSING == -1
