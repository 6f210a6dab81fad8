"""Annotation and prediction metrics.

Venue-centric scores are computed over unseen venues only: venues none of
whose training check-ins carry an observed category. A venue's prediction
set is built from the sampled categories of all its latent events; its truth
set holds the true categories of those events (a singleton for a clean log).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .data import MISSING, CategoryAssignment, EventLog


@dataclass(frozen=True)
class AnnotationEvaluand:
    """Per latent event: sample histogram, true category and venue index.

    ``unseen`` is a boolean mask over venue indices.
    """

    histograms: np.ndarray
    truth: np.ndarray
    venues: np.ndarray
    unseen: np.ndarray

    def __post_init__(self):
        hist = np.asarray(self.histograms)
        if hist.ndim != 2:
            raise ValueError("histograms must be (n_events, K)")
        if np.any(hist < 0):
            raise ValueError("histogram counts must be non-negative")
        truth = np.asarray(self.truth, dtype=np.int64)
        venues = np.asarray(self.venues, dtype=np.int64)
        if not (len(truth) == len(venues) == len(hist)):
            raise ValueError("histograms, truth and venues differ in length")
        if len(truth) and (truth.min() < 0 or truth.max() >= hist.shape[1]):
            raise ValueError("true category out of range")
        object.__setattr__(self, "histograms", hist)
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "venues", venues)
        object.__setattr__(self, "unseen", np.asarray(self.unseen, dtype=bool))

    @property
    def n_categories(self) -> int:
        return self.histograms.shape[1]

    def unseen_venues(self) -> np.ndarray:
        """Unseen venue indices that have at least one latent event, ascending."""
        present = np.unique(self.venues)
        return present[self.unseen[present]]

    def venue_histogram(self, venue: int) -> np.ndarray:
        return self.histograms[self.venues == venue].sum(axis=0)

    def venue_truth(self, venue: int) -> set[int]:
        return set(int(c) for c in self.truth[self.venues == venue])


def unseen_venue_mask(log: EventLog) -> np.ndarray:
    """True for venues with no observed category anywhere in ``log``."""
    seen = np.zeros(log.n_venues, dtype=bool)
    seen[log.venues[log.categories != MISSING]] = True
    return ~seen


def build_evaluand(log: EventLog, histograms: np.ndarray, truth: Union[CategoryAssignment, np.ndarray],
                   latent_index: Optional[np.ndarray] = None) -> AnnotationEvaluand:
    """Evaluand for the latent events of ``log`` (the training log, with gaps).

    ``histograms`` rows follow ``latent_index`` (default ``log.latent_index``).
    ``truth`` is the hidden-category assignment returned by missingness
    injection, or an array aligned with ``latent_index``.
    """
    latent = log.latent_index if latent_index is None else np.asarray(latent_index, dtype=np.int64)
    if isinstance(truth, CategoryAssignment):
        lookup = truth.as_dict()
        try:
            truth = np.array([lookup[int(p)] for p in latent], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"no true category for latent event {exc.args[0]}") from None
    return AnnotationEvaluand(np.asarray(histograms), truth, log.venues[latent], unseen_venue_mask(log))


def ranked_categories(hist: np.ndarray) -> np.ndarray:
    """Categories with a positive count, most frequent first, ties by index."""
    hist = np.asarray(hist)
    order = np.lexsort((np.arange(len(hist)), -hist))
    return order[hist[order] > 0]


def prediction_set(hist: np.ndarray, k: Union[int, str] = "all", threshold: float = 0.0) -> set[int]:
    """Top-k (or all) sampled categories, optionally dropping those whose
    share of the samples is below ``threshold``."""
    hist = np.asarray(hist)
    ranked = ranked_categories(hist)
    if threshold > 0 and hist.sum() > 0:
        ranked = ranked[hist[ranked] / hist.sum() >= threshold]
    if k != "all":
        if int(k) < 1:
            raise ValueError("k must be at least 1")
        ranked = ranked[:int(k)]
    return set(int(c) for c in ranked)


def event_acc_at_k(ev: AnnotationEvaluand, k: int) -> Optional[float]:
    """Fraction of latent events whose truth is among its k most sampled categories."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(ev.truth) == 0:
        return None
    hits = sum(int(t) in prediction_set(h, k) for h, t in zip(ev.histograms, ev.truth))
    return hits / len(ev.truth)


def venue_topk_accuracy(ev: AnnotationEvaluand, k: Union[int, str] = "all",
                        threshold: float = 0.0) -> Optional[float]:
    """Share of unseen venues whose Top-k set holds at least one true category.

    None when there are no unseen venues.
    """
    venues = ev.unseen_venues()
    if len(venues) == 0:
        return None
    hits = sum(bool(prediction_set(ev.venue_histogram(v), k, threshold) & ev.venue_truth(v))
               for v in venues)
    return hits / len(venues)


@dataclass(frozen=True)
class PRF:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    tp: tuple
    fp: tuple
    fn: tuple

    def scores(self) -> dict:
        return {name: getattr(self, name) for name in
                ("micro_precision", "micro_recall", "micro_f1",
                 "macro_precision", "macro_recall", "macro_f1")}


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def _harmonic(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def prf_from_counts(tp, fp, fn) -> PRF:
    """Micro and macro precision/recall/F1 from per-category counts.

    Undefined per-category ratios count as 0; macro F1 is the harmonic mean
    of macro precision and macro recall.
    """
    tp, fp, fn = (np.asarray(x, dtype=np.int64) for x in (tp, fp, fn))
    k = len(tp)
    mp = _ratio(tp.sum(), tp.sum() + fp.sum())
    mr = _ratio(tp.sum(), tp.sum() + fn.sum())
    prec = [_ratio(tp[c], tp[c] + fp[c]) for c in range(k)]
    rec = [_ratio(tp[c], tp[c] + fn[c]) for c in range(k)]
    ap = math.fsum(prec) / k if k else 0.0
    ar = math.fsum(rec) / k if k else 0.0
    return PRF(mp, mr, _harmonic(mp, mr), ap, ar, _harmonic(ap, ar),
               tuple(int(x) for x in tp), tuple(int(x) for x in fp), tuple(int(x) for x in fn))


def venue_prf(ev: AnnotationEvaluand, k: Union[int, str] = "all", threshold: float = 0.0) -> PRF:
    """Per-category TP/FP/FN over unseen venues, then micro and macro scores."""
    n_cat = ev.n_categories
    tp = np.zeros(n_cat, dtype=np.int64)
    fp = np.zeros(n_cat, dtype=np.int64)
    fn = np.zeros(n_cat, dtype=np.int64)
    for v in ev.unseen_venues():
        pred = prediction_set(ev.venue_histogram(v), k, threshold)
        true = ev.venue_truth(v)
        for c in pred & true:
            tp[c] += 1
        for c in pred - true:
            fp[c] += 1
        for c in true - pred:
            fn[c] += 1
    return prf_from_counts(tp, fp, fn)


def temporal_rmse(predicted: Sequence[float], actual: Sequence[float]) -> float:
    """Root mean squared timestamp error, in the units of the inputs (hours)."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise ValueError("predicted and actual times differ in length")
    if predicted.size == 0:
        raise ValueError("no aligned predictions")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def temporal_rmse_by_user(predicted, actual, users) -> dict:
    users = np.asarray(users)
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    return {u.item() if hasattr(u, "item") else u: temporal_rmse(predicted[users == u], actual[users == u])
            for u in np.unique(users)}


def annotation_report(ev: AnnotationEvaluand, ks: Sequence = (1, 2, "all"),
                      threshold: float = 0.0) -> dict:
    """All annotation metrics in one JSON-ready dict. Absent values are None."""
    venue = {}
    has_unseen = len(ev.unseen_venues()) > 0
    for k in ks:
        scores = venue_prf(ev, k, threshold).scores()
        if not has_unseen:
            scores = dict.fromkeys(scores)
        venue[f"top_{k}"] = {"accuracy": venue_topk_accuracy(ev, k, threshold), **scores}
    event = {f"acc_at_{k}": event_acc_at_k(ev, k) for k in ks if k != "all"}
    return {"n_latent_events": int(len(ev.truth)),
            "n_unseen_venues": int(len(ev.unseen_venues())),
            "venue_centric": venue,
            "event_centric": event}


def _fmt(x) -> str:
    return "-" if x is None else f"{100.0 * x:6.2f}"


def report_text(report: dict) -> str:
    """Aligned plain-text table of an annotation and/or prediction report (percent)."""
    lines = []
    venue = report.get("venue_centric")
    if venue:
        cols = ("accuracy", "micro_precision", "macro_precision", "micro_recall",
                "macro_recall", "micro_f1", "macro_f1")
        lines.append(f"{'venue-centric':<14}" + "".join(f"{c:>16}" for c in cols))
        for name, row in venue.items():
            lines.append(f"{name:<14}" + "".join(f"{_fmt(row[c]):>16}" for c in cols))
    event = report.get("event_centric")
    if event:
        lines.append("")
        lines.append(f"{'event-centric':<14}" + "".join(f"{k:>16}" for k in event))
        lines.append(f"{'':<14}" + "".join(f"{_fmt(v):>16}" for v in event.values()))
    if "rmse_hours" in report:
        lines.append("")
        rmse = report["rmse_hours"]
        lines.append(f"{'rmse (hours)':<14}{'-' if rmse is None else f'{rmse:.4f}':>16}")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def plot_rows(predicted_locations, actual_locations, predicted_times=None, actual_times=None):
    """Header and rows pairing actual and predicted coordinates for a scatter plot."""
    pl = np.asarray(predicted_locations, dtype=float).reshape(-1, 2)
    al = np.asarray(actual_locations, dtype=float).reshape(-1, 2)
    if len(pl) != len(al):
        raise ValueError("predicted and actual locations differ in length")
    header = ["actual_lat", "actual_lon", "predicted_lat", "predicted_lon"]
    cols = [al[:, 0], al[:, 1], pl[:, 0], pl[:, 1]]
    if predicted_times is not None:
        header += ["actual_time", "predicted_time"]
        cols += [np.asarray(actual_times, dtype=float), np.asarray(predicted_times, dtype=float)]
    rows = [[repr(float(x)) for x in row] for row in zip(*cols)]
    return header, rows
