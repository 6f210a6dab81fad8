"""Per-venue day-of-week and hour-of-day check-in histograms."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import EventLog

N_DAYS = 7
HOUR_BIN_EDGES = (0.0, 6.0, 12.0, 18.0, 24.0)
N_HOUR_BINS = len(HOUR_BIN_EDGES) - 1


@dataclass(frozen=True, eq=False)
class VenueFeatureTable:
    """Normalized histograms per venue; rows of zeros for unvisited venues."""

    day_hist: np.ndarray   # (P, 7)
    hour_hist: np.ndarray  # (P, 4)
    venue_ids: tuple = ()

    def __post_init__(self):
        if self.day_hist.shape[1] != N_DAYS or self.hour_hist.shape[1] != N_HOUR_BINS:
            raise ValueError("feature table needs 7 day columns and 4 hour-bin columns")
        if len(self.day_hist) != len(self.hour_hist):
            raise ValueError("day and hour tables disagree on the number of venues")
        self.day_hist.setflags(write=False)
        self.hour_hist.setflags(write=False)

    @property
    def n_venues(self) -> int:
        return len(self.day_hist)

    @property
    def visited(self) -> np.ndarray:
        return self.day_hist.sum(axis=1) > 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["venue_id"] + [f"d{i}" for i in range(N_DAYS)]
                           + [f"h{i}" for i in range(N_HOUR_BINS)]) + "\n")
        ids = self.venue_ids or tuple(str(i) for i in range(self.n_venues))
        for v, d, h in zip(ids, self.day_hist, self.hour_hist):
            buf.write(",".join([str(v)] + [repr(float(x)) for x in np.concatenate([d, h])]) + "\n")
        return buf.getvalue()


def weekday_and_hour(times: np.ndarray, week_anchor: int) -> tuple[np.ndarray, np.ndarray]:
    """Day of week (0 = Monday) and hour of day for times in hours from a midnight epoch."""
    times = np.asarray(times, dtype=float)
    days = np.floor(times / 24.0)
    weekday = ((days + week_anchor) % N_DAYS).astype(np.int64)
    hour = times - 24.0 * days
    return weekday, hour


def hour_bin(hour: np.ndarray) -> np.ndarray:
    return np.clip(np.searchsorted(HOUR_BIN_EDGES, hour, side="right") - 1, 0, N_HOUR_BINS - 1)


def _normalize(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def build_features(log: EventLog, week_anchor: Optional[int] = None) -> VenueFeatureTable:
    """Count each venue's check-ins per weekday and per six-hour bin, then normalize.

    Latent and observed events count alike. Pass only the training window so
    test events cannot leak into the features.
    """
    anchor = log.week_anchor if week_anchor is None else week_anchor
    weekday, hour = weekday_and_hour(log.times, anchor)
    p = log.n_venues
    day = np.zeros((p, N_DAYS))
    hours = np.zeros((p, N_HOUR_BINS))
    np.add.at(day, (log.venues, weekday), 1.0)
    np.add.at(hours, (log.venues, hour_bin(hour)), 1.0)
    return VenueFeatureTable(_normalize(day), _normalize(hours), tuple(log.venue_ids))
