"""Thinning over discrete venues: next-check-in prediction and synthetic data.

One step of the sampler, starting from the user's last check-in at
``(t, l)``:

1. ``lam_star`` is the total rate at the current state;
2. a location is proposed from a Gaussian centred on the current location
   and snapped to the nearest venue;
3. a waiting time ``s ~ Exp(lam_star)`` advances the clock;
4. the candidate is accepted with probability ``min(1, lam_new / lam_star)``;
   on acceptance its category is drawn with weights ``lam_k(t_new, l_new)``;
5. otherwise the state moves to the candidate and the loop repeats.

Two rate definitions are available (``SimulationConfig.rate_mode``):

``"ground"`` (default)
    The spatially integrated rate ``sum_c [mu_bar_c * area
    + sum_k alpha[c, c_k] exp(-eta (t - t_k)) 8 pi h^2]``, i.e. the time
    derivative of the compensator. It decays between events, so
    ``lam_star`` is a true bound and event times are exact.
``"point"``
    ``area * sum_c lam_c(t, l)`` at the current location, with the ratio
    clamped at one. ``recompute_bound=True`` re-evaluates ``lam_star`` at the
    proposed location before drawing the waiting time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .data import MISSING, CategoryAssignment, DomainBounds, EventLog, build_log, concat
from .features import N_DAYS, N_HOUR_BINS, VenueFeatureTable
from .intensity import ModelParameters, average_base_rates, base_rates, distance

logger = logging.getLogger(__name__)

RATE_MODES = ("ground", "point")


class SupercriticalError(ValueError):
    """Parameters imply an explosive (non-stationary) process."""


@dataclass(frozen=True)
class SimulationConfig:
    horizon: float = 168.0
    proposal_sd: Optional[float] = None   # defaults to the bandwidth h
    lookahead: int = 1
    seed: int = 0
    rate_mode: str = "ground"
    recompute_bound: bool = False
    n_samples: int = 1                    # draws averaged into one prediction
    max_iterations: int = 1_000_000

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.rate_mode not in RATE_MODES:
            raise ValueError(f"rate_mode must be one of {RATE_MODES}")
        if self.n_samples < 1 or self.lookahead < 1:
            raise ValueError("n_samples and lookahead must be >= 1")


@dataclass(frozen=True)
class PredictedCheckin:
    user: int
    timestamp: float
    venue: int
    location: tuple
    category: int
    predicted_for: int = -1
    censored: bool = False


@dataclass(frozen=True, eq=False)
class VenueSet:
    """Discrete locations with a nearest-neighbour index (ties: lowest index)."""

    ids: tuple
    coords: np.ndarray

    def __post_init__(self):
        if len(self.ids) == 0:
            raise ValueError("venue set is empty")
        object.__setattr__(self, "_tree", cKDTree(self.coords))

    def __len__(self) -> int:
        return len(self.ids)

    def snap(self, point: np.ndarray) -> int:
        k = min(4, len(self.ids))
        d, idx = self._tree.query(point, k=k)
        d, idx = np.atleast_1d(d), np.atleast_1d(idx)
        return int(np.min(idx[d <= d[0]]))

    @classmethod
    def from_log(cls, log: EventLog) -> "VenueSet":
        return cls(tuple(log.venue_ids), np.asarray(log.venue_coords, dtype=float))


def branching_matrix(params: ModelParameters) -> np.ndarray:
    return params.alpha * params.spatial_mass / params.eta


def check_subcritical(params: ModelParameters) -> None:
    """Refuse parameters whose branching matrix has a row sum >= 1.

    The largest row sum bounds the spectral radius of
    ``alpha * 8 pi h^2 / eta`` from above.
    """
    rows = branching_matrix(params).sum(axis=1)
    if rows.max() >= 1.0:
        raise SupercriticalError(
            f"branching matrix row sums {np.round(rows, 4).tolist()} reach {rows.max():.4f} >= 1; "
            "lower alpha or h, or raise eta")


class UserSampler:
    """Thinning sampler for one user given frozen parameters and history."""

    def __init__(self, params: ModelParameters, features: VenueFeatureTable, venues: VenueSet,
                 area: float, cfg: SimulationConfig,
                 times=(), locations=(), categories=()):
        self.params = params
        self.venues = venues
        self.cfg = cfg
        self.area = float(area)
        self.mu_venue = base_rates(params, features.day_hist, features.hour_hist)  # (K, P)
        self.mu_ground = float(average_base_rates(params, features).sum()) * self.area
        self.colsum = params.alpha.sum(axis=0)
        self.sd = cfg.proposal_sd if cfg.proposal_sd is not None else params.h
        self.times = list(map(float, times))
        self.locations = [tuple(map(float, l)) for l in locations]
        self.categories = [int(c) for c in categories]
        if any(c == MISSING for c in self.categories):
            raise ValueError("history contains an unresolved latent category")

    # rates
    def category_intensities(self, t: float, loc, venue: int, right_limit: bool = False) -> np.ndarray:
        """lam_k(t, l) for all k, base rate from ``venue``.

        ``right_limit`` also counts events at exactly ``t``, as a thinning
        bound starting just after an event must.
        """
        lam = self.mu_venue[:, venue].copy()
        if self.times:
            ht = np.asarray(self.times)
            m = ht <= t if right_limit else ht < t
            if m.any():
                d = distance(np.asarray(loc, float), np.asarray(self.locations)[m], self.params.metric)
                kern = np.exp(-self.params.eta * (t - ht[m])) * np.exp(-d / (2.0 * self.params.h))
                lam += self.params.alpha[:, np.asarray(self.categories)[m]] @ kern
        return lam

    def ground_rate(self, t: float) -> float:
        rate = self.mu_ground
        if self.times:
            ht = np.asarray(self.times)
            m = ht <= t
            if m.any():
                rate += self.params.spatial_mass * float(
                    np.sum(self.colsum[np.asarray(self.categories)[m]]
                           * np.exp(-self.params.eta * (t - ht[m]))))
        return rate

    def _rate(self, t: float, loc, venue: int) -> float:
        if self.cfg.rate_mode == "ground":
            return self.ground_rate(t)
        return self.area * float(self.category_intensities(t, loc, venue, right_limit=True).sum())

    def next_event(self, t: float, loc, venue: int, horizon: float,
                   rng: np.random.Generator) -> Optional[PredictedCheckin]:
        """Draw the next check-in after ``t``; ``None`` once the clock passes ``horizon``."""
        loc = np.asarray(loc, dtype=float)
        for _ in range(self.cfg.max_iterations):
            lam_star = self._rate(t, loc, venue)
            proposal = loc + rng.normal(0.0, self.sd, size=2)
            v_new = self.venues.snap(proposal)
            loc_new = self.venues.coords[v_new]
            if self.cfg.rate_mode == "point" and self.cfg.recompute_bound:
                lam_star = self._rate(t, loc_new, v_new)
            t_new = t + rng.exponential(1.0 / lam_star)
            if t_new > horizon:
                return None
            lam_new = self._rate(t_new, loc_new, v_new)
            if rng.random() < min(1.0, lam_new / lam_star):
                w = self.category_intensities(t_new, loc_new, v_new)
                c = int(min(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"),
                            len(w) - 1))
                return PredictedCheckin(-1, float(t_new), int(v_new), tuple(map(float, loc_new)), c)
            t, loc, venue = t_new, loc_new, v_new
        raise RuntimeError("thinning did not terminate; check parameters")

    def add(self, event: PredictedCheckin) -> None:
        self.times.append(event.timestamp)
        self.locations.append(event.location)
        self.categories.append(event.category)


def next_event(user: int, history_times, history_locations, history_categories, history_venue: int,
               features: VenueFeatureTable, params: ModelParameters, venues: VenueSet,
               cfg: SimulationConfig, area: float, rng: np.random.Generator,
               horizon: Optional[float] = None) -> Optional[PredictedCheckin]:
    """Predict ``user``'s next check-in after the last entry of the given history.

    ``history_venue`` is the venue of the last check-in. Returns ``None`` when
    no candidate is accepted before ``horizon`` (default: last time + cfg.horizon).
    """
    if len(history_times) == 0:
        raise ValueError("next_event needs at least one past check-in to anchor the proposal")
    sampler = UserSampler(params, features, venues, area, cfg,
                          history_times, history_locations, history_categories)
    t0 = float(history_times[-1])
    ev = sampler.next_event(t0, history_locations[-1], history_venue,
                            t0 + cfg.horizon if horizon is None else horizon, rng)
    if ev is None:
        return None
    return PredictedCheckin(user, ev.timestamp, ev.venue, ev.location, ev.category)


def simulate_dataset(true_params: ModelParameters, venues: VenueSet, users, window: tuple[float, float],
                     seed: int, features: Optional[VenueFeatureTable] = None,
                     cfg: Optional[SimulationConfig] = None,
                     category_names: Optional[Sequence[str]] = None) -> EventLog:
    """Generate a fully labelled log from the model.

    Each user starts at a uniformly chosen venue and runs the thinning sampler
    over ``window``; accepted events join the user's history. The log's
    spatial bounds are the venues' extent, which also sets the area used by
    the rates. ``features`` defaults to all-zero histograms (``mu = 2``).
    """
    check_subcritical(true_params)
    cfg = cfg or SimulationConfig(rate_mode="ground")
    t_start, t_end = window
    if t_end < t_start:
        raise ValueError("window end precedes its start")
    user_ids = tuple(f"u{i}" for i in range(users)) if isinstance(users, int) else tuple(users)
    k = true_params.n_categories
    names = tuple(category_names) if category_names is not None else tuple(f"c{i}" for i in range(k))
    if features is None:
        features = VenueFeatureTable(np.zeros((len(venues), N_DAYS)), np.zeros((len(venues), N_HOUR_BINS)),
                                     tuple(venues.ids))
    xs, ys = venues.coords[:, 0], venues.coords[:, 1]
    bounds = DomainBounds(float(t_start), float(t_end), float(xs.min()), float(xs.max()),
                          float(ys.min()), float(ys.max()))
    rows_u, rows_v, rows_t, rows_c = [], [], [], []
    seeds = np.random.SeedSequence(seed).spawn(len(user_ids))
    for ui, uid in enumerate(user_ids):
        rng = np.random.default_rng(seeds[ui])
        sampler = UserSampler(true_params, features, venues, bounds.area, cfg)
        venue = int(rng.integers(len(venues)))
        loc = venues.coords[venue]
        t = float(t_start)
        while t_end > t_start:
            ev = sampler.next_event(t, loc, venue, t_end, rng)
            if ev is None:
                break
            sampler.add(ev)
            rows_u.append(uid)
            rows_v.append(venues.ids[ev.venue])
            rows_t.append(ev.timestamp)
            rows_c.append(names[ev.category])
            t, loc, venue = ev.timestamp, np.asarray(ev.location), ev.venue
    coords = {vid: venues.coords[i] for i, vid in enumerate(venues.ids)}
    return build_log(rows_u, rows_v, rows_t, [coords[v][0] for v in rows_v], [coords[v][1] for v in rows_v],
                     rows_c, category_names=names, user_ids=user_ids, venue_ids=tuple(venues.ids),
                     bounds=bounds)


# --------------------------------------------------------------------------
# lookahead-one prediction over a test window


@dataclass
class PredictionRun:
    predictions: list = field(default_factory=list)
    skipped: list = field(default_factory=list)   # test positions with no usable history

    @property
    def aligned_positions(self) -> np.ndarray:
        return np.array([p.predicted_for for p in self.predictions], dtype=np.int64)


def predict_test_window(params: ModelParameters, train_log: EventLog, assignment: Optional[CategoryAssignment],
                        test_log: EventLog, features: VenueFeatureTable, cfg: SimulationConfig,
                        area: Optional[float] = None, targets: Optional[np.ndarray] = None) -> PredictionRun:
    """One prediction per test event, conditioned on the true history before it.

    Latent training categories are resolved with ``assignment`` (typically the
    posterior mode). With ``cfg.n_samples > 1`` the predicted time is the mean
    of that many draws; draws that pass the horizon count as the horizon.
    ``targets`` (boolean over test events) limits which events get a
    prediction; the others still count as history.
    """
    if len(test_log.latent_index):
        raise ValueError("test events must have observed categories")
    train_cats = assignment.fill(train_log) if assignment is not None else np.asarray(train_log.categories)
    if np.any(train_cats == MISSING):
        raise ValueError("training log has latent events but no assignment was given")
    train = train_log.with_categories(train_cats)
    full = concat(train, test_log)
    n_train = len(train)
    venues = VenueSet.from_log(full)
    area = train_log.bounds.area if area is None else area
    run = PredictionRun()
    if len(test_log) == 0:
        return run
    is_test = np.zeros(len(full), dtype=bool)
    order = np.argsort(np.concatenate([train.times, test_log.times]), kind="stable")
    is_test[np.flatnonzero(order >= n_train)] = True
    test_pos = order[is_test] - n_train
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(test_log))
    locs = full.locations
    for n, pos in zip(np.flatnonzero(is_test), test_pos):
        if targets is not None and not targets[pos]:
            continue
        u = full.users[n]
        prior = np.flatnonzero((full.users == u) & (full.times < full.times[n]))
        if len(prior) == 0:
            logger.info("test event %d: user %s has no prior check-in; skipped", pos, full.user_ids[u])
            run.skipped.append(int(pos))
            continue
        last = prior[-1]
        rng = np.random.default_rng(seeds[pos])
        sampler = UserSampler(params, features, venues, area, cfg,
                              full.times[prior], locs[prior], full.categories[prior])
        t0 = float(full.times[last])
        horizon = t0 + cfg.horizon
        draws = [sampler.next_event(t0, locs[last], int(full.venues[last]), horizon, rng)
                 for _ in range(cfg.n_samples)]
        accepted = [d for d in draws if d is not None]
        stamp = float(np.mean([d.timestamp if d is not None else horizon for d in draws]))
        if accepted:
            v = int(np.argmax(np.bincount([d.venue for d in accepted])))
            c = int(np.argmax(np.bincount([d.category for d in accepted])))
        else:
            v = int(full.venues[last])
            c = int(np.argmax(sampler.category_intensities(horizon, locs[last], v)))
        run.predictions.append(PredictedCheckin(int(u), stamp, v, tuple(map(float, venues.coords[v])), c,
                                                predicted_for=int(pos), censored=not accepted))
    return run


def naive_gap_predictions(train_log: EventLog, test_log: EventLog) -> PredictionRun:
    """Baseline: next time = last time + the user's last inter-event gap."""
    full = concat(train_log, test_log)
    n_train = len(train_log)
    order = np.argsort(np.concatenate([train_log.times, test_log.times]), kind="stable")
    run = PredictionRun()
    for n in range(len(full)):
        if order[n] < n_train:
            continue
        pos = int(order[n] - n_train)
        u = full.users[n]
        prior = np.flatnonzero((full.users == u) & (full.times < full.times[n]))
        if len(prior) == 0:
            run.skipped.append(pos)
            continue
        t_last = float(full.times[prior[-1]])
        gap = t_last - float(full.times[prior[-2]]) if len(prior) > 1 else 0.0
        v = int(full.venues[prior[-1]])
        run.predictions.append(PredictedCheckin(int(u), t_last + gap, v, tuple(full.venue_coords[v]),
                                                int(full.categories[prior[-1]]), predicted_for=pos))
    return run


def predictions_table(run: PredictionRun, log: EventLog) -> tuple[list[str], list[list]]:
    """Rows in the ingestion CSV schema plus a ``predicted_for`` column."""
    header = ["user_id", "venue_id", "timestamp", "lat", "lon", "category", "predicted_for"]
    rows = []
    for p in run.predictions:
        rows.append([log.user_ids[p.user], log.venue_ids[p.venue], repr(p.timestamp),
                     repr(p.location[0]), repr(p.location[1]),
                     log.category_names[p.category] if p.category >= 0 else "", p.predicted_for])
    return header, rows
