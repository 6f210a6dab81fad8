import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_hawkes.data import build_log
from latent_hawkes.features import build_features, hour_bin, weekday_and_hour


def _log(times, venues, anchor=0):
    n = len(times)
    return build_log(["u"] * n, venues, times, [40.0] * n, [-74.0] * n, ["a"] * n, week_anchor=anchor)


def test_one_checkin_per_hour_bin():
    feats = build_features(_log([1.0, 7.0, 13.0, 20.0], ["v"] * 4))
    assert feats.hour_hist[0].tolist() == [0.25] * 4


def test_single_weekday_is_one_hot():
    feats = build_features(_log([24 * 3 + 1.0, 24 * 3 + 5.0, 24 * 10 + 2.0], ["v"] * 3))
    assert feats.day_hist[0].tolist() == [0, 0, 0, 1.0, 0, 0, 0]


def test_week_anchor_shifts_weekday():
    wd, hour = weekday_and_hour(np.array([0.0, 25.5, 24 * 6 + 23.0]), week_anchor=5)
    assert wd.tolist() == [5, 6, 4]
    assert hour.tolist() == [0.0, 1.5, 23.0]


def test_bin_edges():
    assert hour_bin(np.array([0.0, 5.999, 6.0, 11.9, 12.0, 18.0, 23.99])).tolist() == [0, 0, 1, 1, 2, 3, 3]


def test_venue_without_checkins_is_zero():
    log = build_log(["u"], ["v1"], [3.0], [40.0], [-74.0], ["a"], venue_ids=["v0", "v1"])
    feats = build_features(log)
    assert feats.day_hist[0].sum() == 0 and feats.hour_hist[0].sum() == 0
    assert feats.visited.tolist() == [False, True]


def _count_oracle(times, venues, anchor, n_venues):
    day = np.zeros((n_venues, 7))
    hour = np.zeros((n_venues, 4))
    for t, v in zip(times, venues):
        d = int(t // 24)
        day[v, (d + anchor) % 7] += 1
        hour[v, int((t - 24 * d) // 6)] += 1
    for m in (day, hour):
        s = m.sum(axis=1, keepdims=True)
        m[:] = np.where(s > 0, m / np.where(s > 0, s, 1), 0)
    return day, hour


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1000, allow_nan=False), st.integers(0, 4)), min_size=1, max_size=40),
       st.integers(0, 6))
def test_matches_counting_oracle(rows, anchor):
    times = [r[0] for r in rows]
    venues = [r[1] for r in rows]
    log = build_log(["u"] * len(rows), [f"v{v}" for v in venues], times, [40.0] * len(rows),
                    [-74.0] * len(rows), ["a"] * len(rows), venue_ids=[f"v{i}" for i in range(5)],
                    week_anchor=anchor)
    feats = build_features(log)
    day, hour = _count_oracle(times, venues, anchor, 5)
    np.testing.assert_allclose(feats.day_hist, day, atol=1e-12)
    np.testing.assert_allclose(feats.hour_hist, hour, atol=1e-12)
    for m in (feats.day_hist, feats.hour_hist):
        sums = m.sum(axis=1)
        assert np.all((np.abs(sums - 1) < 1e-12) | (sums == 0))
        assert m.min() >= 0 and m.max() <= 1


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(12))))
def test_input_order_does_not_matter(perm):
    times = [5.0 * i + 0.3 for i in range(12)]
    venues = [f"v{i % 3}" for i in range(12)]
    ids = ["v0", "v1", "v2"]
    a = build_features(build_log(["u"] * 12, venues, times, [40.0] * 12, [-74.0] * 12, ["a"] * 12, venue_ids=ids))
    b = build_features(build_log(["u"] * 12, [venues[i] for i in perm], [times[i] for i in perm],
                                 [40.0] * 12, [-74.0] * 12, ["a"] * 12, venue_ids=ids))
    assert np.array_equal(a.day_hist, b.day_hist) and np.array_equal(a.hour_hist, b.hour_hist)


def test_csv_dump():
    feats = build_features(_log([1.0], ["v"]))
    lines = feats.to_csv().splitlines()
    assert lines[0] == "venue_id,d0,d1,d2,d3,d4,d5,d6,h0,h1,h2,h3"
    assert lines[1].startswith("v,1")
    with pytest.raises(ValueError):
        type(feats)(np.zeros((1, 6)), np.zeros((1, 4)), ("v",))
