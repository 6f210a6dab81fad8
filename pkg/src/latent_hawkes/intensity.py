"""Kernels, base intensity and the conditional intensity of the check-in process.

For user ``u`` and category ``c`` at time ``t`` and location ``l``::

    lam_c(t, l) = mu_c(venue) + sum_{t_k < t, u_k = u} alpha[c, c_k]
                  * exp(-eta (t - t_k)) * exp(-|l - l_k| / (2 h))

    mu_c(venue) = exp(w_day[c] . x_day(venue)) + exp(w_hour[c] . x_hour(venue))

Latent history entries enter through their currently assigned category. The
user indicator is applied whether or not the event's own category is latent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import MISSING, EventLog
from .features import N_DAYS, N_HOUR_BINS, VenueFeatureTable

INTENSITY_FLOOR = 1e-12
METRICS = ("euclidean", "haversine")


@dataclass
class ModelParameters:
    """Learnable weights plus the fixed hyperparameters.

    ``alpha[i, j]`` is the influence of a category-``j`` event on category ``i``.
    ``eta`` is per hour, ``h`` in degrees.
    """

    w_day: np.ndarray
    w_hour: np.ndarray
    alpha: np.ndarray
    eta: float
    h: float
    prior_p: Optional[np.ndarray] = None
    metric: str = "euclidean"

    def __post_init__(self):
        self.w_day = np.array(self.w_day, dtype=float, ndmin=2)
        self.w_hour = np.array(self.w_hour, dtype=float, ndmin=2)
        self.alpha = np.array(self.alpha, dtype=float, ndmin=2)
        k = self.alpha.shape[0]
        if self.prior_p is None:
            self.prior_p = np.full(k, 1.0 / k)
        self.prior_p = np.asarray(self.prior_p, dtype=float)
        if self.w_day.shape != (k, N_DAYS) or self.w_hour.shape != (k, N_HOUR_BINS):
            raise ValueError(f"weight shapes {self.w_day.shape}, {self.w_hour.shape} "
                             f"do not match K={k}")
        if self.alpha.shape != (k, k):
            raise ValueError("alpha must be square")
        if np.any(self.alpha < 0):
            raise ValueError("alpha entries must be non-negative")
        if not (self.eta > 0 and self.h > 0):
            raise ValueError("eta and h must be positive")
        if self.prior_p.shape != (k,) or np.any(self.prior_p < 0) or abs(self.prior_p.sum() - 1) > 1e-9:
            raise ValueError("prior_p must be a probability vector of length K")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    @property
    def n_categories(self) -> int:
        return self.alpha.shape[0]

    @property
    def spatial_mass(self) -> float:
        """Integral of the spatial kernel over the plane, 8 pi h^2."""
        return 8.0 * math.pi * self.h ** 2

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.w_day.copy(), self.w_hour.copy(), self.alpha.copy(),
                               self.eta, self.h, self.prior_p.copy(), self.metric)

    def with_values(self, **kw) -> "ModelParameters":
        p = self.copy()
        for k, v in kw.items():
            setattr(p, k, v)
        p.__post_init__()
        return p

    def to_dict(self) -> dict:
        return {
            "w_day": self.w_day.tolist(),
            "w_hour": self.w_hour.tolist(),
            "alpha": self.alpha.tolist(),
            "eta": float(self.eta),
            "h": float(self.h),
            "prior_p": self.prior_p.tolist(),
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParameters":
        return cls(np.array(d["w_day"]), np.array(d["w_hour"]), np.array(d["alpha"]),
                   float(d["eta"]), float(d["h"]), np.array(d["prior_p"]),
                   d.get("metric", "euclidean"))

    @classmethod
    def random_init(cls, k: int, eta: float, h: float, rng: np.random.Generator,
                    metric: str = "euclidean") -> "ModelParameters":
        return cls(
            w_day=rng.uniform(-0.1, 0.1, size=(k, N_DAYS)),
            w_hour=rng.uniform(-0.1, 0.1, size=(k, N_HOUR_BINS)),
            alpha=rng.uniform(0.0, 0.1, size=(k, k)),
            eta=eta, h=h, metric=metric,
        )

    @classmethod
    def zeros(cls, k: int, eta: float = 1.0, h: float = 0.01, **kw) -> "ModelParameters":
        return cls(np.zeros((k, N_DAYS)), np.zeros((k, N_HOUR_BINS)), np.zeros((k, k)), eta, h, **kw)


# --------------------------------------------------------------------------
# kernels


def temporal_kernel(dt, eta: float):
    dt = np.asarray(dt, dtype=float)
    if np.any(dt < 0):
        raise ValueError("temporal kernel needs dt >= 0")
    return np.exp(-eta * dt)


def spatial_kernel(d, h: float):
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("spatial kernel needs d >= 0")
    return np.exp(-d / (2.0 * h))


def distance(a, b, metric: str = "euclidean"):
    """Distance between (lat, lon) points in degrees.

    ``haversine`` returns the great-circle central angle in degrees, so the
    bandwidth keeps its unit under either metric.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if metric == "euclidean":
        return np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])
    if metric == "haversine":
        la1, lo1, la2, lo2 = map(np.radians, (a[..., 0], a[..., 1], b[..., 0], b[..., 1]))
        s = (np.sin((la2 - la1) / 2) ** 2
             + np.cos(la1) * np.cos(la2) * np.sin((lo2 - lo1) / 2) ** 2)
        return np.degrees(2 * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0))))
    raise ValueError(f"unknown metric {metric!r}")


# --------------------------------------------------------------------------
# base intensity


def base_rates(params: ModelParameters, day: np.ndarray, hour: np.ndarray) -> np.ndarray:
    """mu[c, v] for feature rows ``day`` (P, 7) and ``hour`` (P, 4); shape (K, P)."""
    day = np.atleast_2d(day)
    hour = np.atleast_2d(hour)
    return np.exp(params.w_day @ day.T) + np.exp(params.w_hour @ hour.T)


def average_base_rates(params: ModelParameters, features: VenueFeatureTable) -> np.ndarray:
    """mu_c averaged over visited venues; shape (K,).

    Each visited venue stands for an equal share of the spatial domain, so the
    base part of the compensator is ``area * T * mean_v mu_c(v)``. (Evaluating
    mu at the mean feature vector instead leaves the likelihood unbounded:
    weights can inflate mu at concentrated venues while the averaged features
    stay flat.)
    """
    mask = features.visited
    if not mask.any():
        return base_rates(params, np.zeros(N_DAYS), np.zeros(N_HOUR_BINS))[:, 0]
    return base_rates(params, features.day_hist[mask], features.hour_hist[mask]).mean(axis=1)


def _venue_index(venue, features: VenueFeatureTable) -> int:
    if isinstance(venue, (int, np.integer)):
        if not 0 <= venue < features.n_venues:
            raise KeyError(f"unknown venue index {venue}")
        return int(venue)
    try:
        return features.venue_ids.index(venue)
    except ValueError:
        raise KeyError(f"unknown venue {venue!r}") from None


def base_intensity(category: int, venue, features: VenueFeatureTable, params: ModelParameters) -> float:
    v = _venue_index(venue, features)
    return float(np.exp(params.w_day[category] @ features.day_hist[v])
                 + np.exp(params.w_hour[category] @ features.hour_hist[v]))


# --------------------------------------------------------------------------
# single-event evaluation


@dataclass(frozen=True, eq=False)
class HistoryView:
    """Past events strictly before ``query_time`` with resolved categories.

    ``categories`` holds ``-1`` where a latent slot has not been resolved.
    """

    query_time: float
    users: np.ndarray
    times: np.ndarray
    locations: np.ndarray
    categories: np.ndarray

    def __post_init__(self):
        if len(self.times) and np.max(self.times) >= self.query_time:
            raise ValueError("history entries must precede the query time")

    def __len__(self) -> int:
        return len(self.times)

    def for_user(self, user: int) -> "HistoryView":
        m = self.users == user
        return HistoryView(self.query_time, self.users[m], self.times[m], self.locations[m],
                           self.categories[m])


def history_view(log: EventLog, before: float, user: Optional[int] = None,
                 assignment=None, categories: Optional[np.ndarray] = None) -> HistoryView:
    """History of ``log`` strictly before ``before`` (one user, or everyone).

    Latent categories are filled from ``assignment`` (a CategoryAssignment) or
    from a full ``categories`` array when given.
    """
    if categories is None:
        categories = assignment.fill(log) if assignment is not None else log.categories
    mask = log.times < before
    if user is not None:
        mask &= log.users == user
    return HistoryView(float(before), log.users[mask].copy(), log.times[mask].copy(),
                       log.locations[mask], np.asarray(categories)[mask].copy())


def conditional_intensity(category: int, user: int, t: float, location, venue,
                          history: HistoryView, features: VenueFeatureTable,
                          params: ModelParameters) -> float:
    """lam_c^u(t, l) at one point, with base rate from ``venue``'s features."""
    mu = base_intensity(category, venue, features, params)
    m = (history.users == user) & (history.times < t)
    if not m.any():
        return mu
    cats = history.categories[m]
    if np.any(cats == MISSING):
        raise ValueError("history contains an unresolved latent category")
    kern = (temporal_kernel(t - history.times[m], params.eta)
            * spatial_kernel(distance(np.asarray(location, float), history.locations[m], params.metric),
                             params.h))
    return float(mu + np.sum(params.alpha[category, cats] * kern))


def excitation_window_mass(times: np.ndarray, t_a: float, t_b: float, eta: float, h: float) -> np.ndarray:
    """Space-time integral of one unit of excitation from events at ``times`` over [t_a, t_b].

    Equals 8 pi h^2 / eta * (exp(-eta max(0, t_a - t_k)) - exp(-eta (t_b - t_k)))
    for t_k < t_b and 0 otherwise.
    """
    times = np.asarray(times, dtype=float)
    out = np.zeros_like(times)
    m = times < t_b
    lo = np.maximum(0.0, t_a - times[m])
    out[m] = 8.0 * math.pi * h * h / eta * (np.exp(-eta * lo) - np.exp(-eta * (t_b - times[m])))
    return out


def compensator(user: int, category: int, window: tuple[float, float], history: HistoryView,
                features: VenueFeatureTable, params: ModelParameters, area: float,
                venue_context=None) -> float:
    """Integral of lam_c^u over ``window`` x the spatial domain.

    The base term uses ``venue_context`` (default: the venue-averaged rate) times
    ``area``; each excitation term integrates its spatial kernel over the whole
    plane (8 pi h^2) and its temporal kernel exactly over the window.
    """
    t_a, t_b = window
    if t_a > t_b:
        raise ValueError("window must satisfy t_a <= t_b")
    if t_a == t_b:
        return 0.0
    if venue_context is None:
        mu = average_base_rates(params, features)[category]
    else:
        mu = base_intensity(category, venue_context, features, params)
    total = mu * (t_b - t_a) * area
    m = (history.users == user) & (history.times < t_b)
    if m.any():
        cats = history.categories[m]
        if np.any(cats == MISSING):
            raise ValueError("history contains an unresolved latent category")
        total += float(np.sum(params.alpha[category, cats]
                              * excitation_window_mass(history.times[m], t_a, t_b,
                                                                     params.eta, params.h)))
    return float(total)


# --------------------------------------------------------------------------
# batched structure over a whole log


class ExcitationGraph:
    """All same-user (earlier -> later) event pairs of a log with kernel weights.

    Pairs are stored twice: sorted by target (for intensities) and grouped by
    source (for the Gibbs update of one latent event). Pairs whose kernel
    weight underflows to 0 are dropped; they contribute nothing to any term.
    """

    def __init__(self, log: EventLog, eta: float, h: float, metric: str = "euclidean",
                 window: Optional[tuple[float, float]] = None):
        self.n_events = len(log)
        self.eta = eta
        self.h = h
        t_a, t_b = window if window is not None else (log.bounds.t_min, log.bounds.t_max)
        targets, sources, weights = [], [], []
        locs = log.locations
        for u in np.unique(log.users):
            idx = np.flatnonzero(log.users == u)
            if len(idx) < 2:
                continue
            t = log.times[idx]
            j, i = np.tril_indices(len(idx), k=-1)  # j later than i
            dt = t[j] - t[i]
            keep = dt > 0
            j, i, dt = j[keep], i[keep], dt[keep]
            w = np.exp(-eta * dt) * np.exp(-distance(locs[idx[j]], locs[idx[i]], metric) / (2.0 * h))
            nz = w > 0
            targets.append(idx[j[nz]])
            sources.append(idx[i[nz]])
            weights.append(w[nz])
        if targets:
            tg = np.concatenate(targets)
            sc = np.concatenate(sources)
            wt = np.concatenate(weights)
        else:
            tg = sc = np.zeros(0, dtype=np.int64)
            wt = np.zeros(0)
        order = np.lexsort((sc, tg))
        self.target = tg[order].astype(np.int64)
        self.source = sc[order].astype(np.int64)
        self.weight = wt[order]
        by_src = np.argsort(self.source, kind="stable")
        self._src_order = by_src
        self._src_ptr = np.searchsorted(self.source[by_src], np.arange(self.n_events + 1))
        self.venues = log.venues
        self.times = log.times
        self.window = (t_a, t_b)
        self.mass = excitation_window_mass(log.times, t_a, t_b, eta, h)

    @property
    def n_pairs(self) -> int:
        return len(self.weight)

    def outgoing(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """(targets, weights) of pairs whose source is event ``n``."""
        sl = self._src_order[self._src_ptr[n]:self._src_ptr[n + 1]]
        return self.target[sl], self.weight[sl]

    def excitation(self, categories: np.ndarray, k: int) -> np.ndarray:
        """A[n, j] = sum of kernel weights from earlier same-user events of category j.

        ``categories`` may be (N,) or (S, N); the result gains the same leading axis.
        """
        cats = np.asarray(categories)
        if cats.ndim == 1:
            flat = np.bincount(self.target * k + cats[self.source], weights=self.weight,
                               minlength=self.n_events * k)
            return flat.reshape(self.n_events, k)
        s = cats.shape[0]
        offs = (np.arange(s)[:, None] * (self.n_events * k))
        keys = (offs + self.target[None, :] * k + cats[:, self.source]).ravel()
        flat = np.bincount(keys, weights=np.tile(self.weight, s), minlength=s * self.n_events * k)
        return flat.reshape(s, self.n_events, k)

