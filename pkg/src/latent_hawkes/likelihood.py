"""Log-likelihood of a check-in log under a category assignment, and its gradient.

``log_likelihood`` evaluates one assignment. :class:`SampleObjective` averages
the log joint over a set of Gibbs samples and differentiates it in closed
form with respect to ``w_day``, ``w_hour`` and ``alpha``; ``eta`` and ``h``
stay fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import MISSING, CategoryAssignment, EventLog
from .features import VenueFeatureTable
from .intensity import (INTENSITY_FLOOR, ExcitationGraph, ModelParameters,
                        average_base_rates, base_rates)


@dataclass(frozen=True)
class LikelihoodBreakdown:
    log_events: float
    log_compensator: float
    log_prior: float

    @property
    def total(self) -> float:
        return self.log_events - self.log_compensator + self.log_prior


@dataclass(frozen=True)
class L2Weights:
    w_day: float = 1e-2
    w_hour: float = 1e-2
    alpha: float = 1e-2

    def scaled(self, factor: float) -> "L2Weights":
        return L2Weights(self.w_day * factor, self.w_hour * factor, self.alpha * factor)


@dataclass
class ParameterGradient:
    w_day: np.ndarray
    w_hour: np.ndarray
    alpha: np.ndarray
    # alpha entries sitting on the zero bound whose gradient points outward
    alpha_at_bound: np.ndarray = field(default=None)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w_day.ravel(), self.w_hour.ravel(), self.alpha.ravel()])

    def projected_alpha(self) -> np.ndarray:
        return np.where(self.alpha_at_bound, 0.0, self.alpha)


def log_prior(values, prior_p) -> float:
    """sum_i log p[z_i] with p floored at 1e-12."""
    values = np.asarray(getattr(values, "values", values), dtype=np.int64)
    if values.size == 0:
        return 0.0
    return float(np.sum(np.log(np.maximum(np.asarray(prior_p)[values], INTENSITY_FLOOR))))


def _categories(log: EventLog, assignment) -> np.ndarray:
    if assignment is None:
        if len(log.latent_index):
            raise ValueError("log has latent events but no assignment was given")
        return np.asarray(log.categories, dtype=np.int64)
    if isinstance(assignment, CategoryAssignment):
        return assignment.fill(log)
    cats = np.asarray(assignment, dtype=np.int64)
    if cats.shape == (len(log),):
        if np.any(cats == MISSING):
            raise ValueError("unresolved latent event")
        return cats
    return CategoryAssignment(log.latent_index, cats).fill(log)


def log_likelihood(log: EventLog, assignment, features: VenueFeatureTable, params: ModelParameters,
                   window: Optional[tuple[float, float]] = None,
                   graph: Optional[ExcitationGraph] = None) -> LikelihoodBreakdown:
    """log p(E | z, theta) split into its event, compensator and prior terms.

    ``assignment`` is a CategoryAssignment, an array of latent values, or a
    full length-N category array. With ``window`` only events inside it add
    ``log lam`` (history still counts) and the compensator covers the window.
    """
    cats = _categories(log, assignment)
    if window is None:
        window = (log.bounds.t_min, log.bounds.t_max)
    if graph is None or graph.window != tuple(window):
        graph = ExcitationGraph(log, params.eta, params.h, params.metric, window=window)
    obj = SampleObjective(log, graph, features, cats[None, :], window=window)
    ev, comp, prior = obj.terms(params)
    return LikelihoodBreakdown(float(ev[0]), float(comp[0]), float(prior[0]))


class SampleObjective:
    """Monte-Carlo expected log joint over fixed category samples.

    Parameters
    ----------
    log : EventLog
    graph : ExcitationGraph built with the parameters' ``eta`` and ``h``.
    features : VenueFeatureTable
    samples : (S, N) int array of full category vectors, one per sample.
    l2 : L2Weights, optional
    window : (t_a, t_b), optional
        Restrict the event term to events inside the window; the compensator
        integrates over the window.
    """

    def __init__(self, log: EventLog, graph: ExcitationGraph, features: VenueFeatureTable,
                 samples: np.ndarray, l2: Optional[L2Weights] = None,
                 window: Optional[tuple[float, float]] = None):
        samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
        if samples.shape[1] != len(log):
            raise ValueError("samples must be full category vectors")
        if np.any(samples < 0):
            raise ValueError("unresolved latent event")
        self.log = log
        self.graph = graph
        self.features = features
        self.samples = samples
        self.l2 = l2 or L2Weights(0.0, 0.0, 0.0)
        t_a, t_b = window if window is not None else (log.bounds.t_min, log.bounds.t_max)
        self.window = (t_a, t_b)
        self.event_mask = (log.times >= t_a) & (log.times <= t_b)
        self.base_scale = log.n_users * log.bounds.area * (t_b - t_a)
        self.latent = log.latent_index
        self._k = None
        self._exc = None

    def _excitation(self, k: int) -> np.ndarray:
        if self._exc is None or self._k != k:
            self._exc = self.graph.excitation(self.samples, k)
            self._k = k
        return self._exc

    def terms(self, params: ModelParameters):
        """Per-sample (log_events, compensator, log_prior) arrays."""
        lam = self._intensities(params)
        ev = np.sum(np.log(np.maximum(lam, INTENSITY_FLOOR)) * self.event_mask, axis=1)
        comp = self.base_scale * average_base_rates(params, self.features).sum()
        colsum = params.alpha.sum(axis=0)
        comp = comp + (colsum[self.samples] * self.graph.mass[None, :]).sum(axis=1)
        logp = np.log(np.maximum(params.prior_p, INTENSITY_FLOOR))
        prior = logp[self.samples[:, self.latent]].sum(axis=1)
        return ev, comp, prior

    def _intensities(self, params: ModelParameters) -> np.ndarray:
        k = params.n_categories
        a = self._excitation(k)
        mu = base_rates(params, self.features.day_hist, self.features.hour_hist)[:, self.log.venues]
        n_idx = np.arange(len(self.log))
        mu_at = mu[self.samples, n_idx[None, :]]
        exc = np.einsum("snk,snk->sn", params.alpha[self.samples], a)
        return mu_at + exc

    def _visited_features(self) -> tuple[np.ndarray, np.ndarray]:
        mask = self.features.visited
        if not mask.any():
            return np.zeros((1, self.features.day_hist.shape[1])), np.zeros((1, self.features.hour_hist.shape[1]))
        return self.features.day_hist[mask], self.features.hour_hist[mask]

    def penalty(self, params: ModelParameters) -> float:
        return 0.5 * (self.l2.w_day * np.sum(params.w_day ** 2)
                      + self.l2.w_hour * np.sum(params.w_hour ** 2)
                      + self.l2.alpha * np.sum(params.alpha ** 2))

    def per_sample(self, params: ModelParameters) -> np.ndarray:
        """Log joint of each sample (no regularization)."""
        ev, comp, prior = self.terms(params)
        return ev - comp + prior

    def value(self, params: ModelParameters) -> float:
        return float(np.mean(self.per_sample(params)) - self.penalty(params))

    def value_and_gradient(self, params: ModelParameters) -> tuple[float, ParameterGradient]:
        k = params.n_categories
        s, n = self.samples.shape
        a = self._excitation(k)
        lam = self._intensities(params)
        ev = np.sum(np.log(np.maximum(lam, INTENSITY_FLOOR)) * self.event_mask, axis=1)
        active = (lam > INTENSITY_FLOOR) & self.event_mask[None, :]
        inv = np.where(active, 1.0 / np.where(active, lam, 1.0), 0.0)

        # B[c, n] = sum_s [z_s[n] = c] / lam_s[n]
        keys = (self.samples * n + np.arange(n)[None, :]).ravel()
        b = np.bincount(keys, weights=inv.ravel(), minlength=k * n).reshape(k, n) / s

        venues = self.log.venues
        xd = self.features.day_hist[venues]
        xh = self.features.hour_hist[venues]
        ed = np.exp(params.w_day @ xd.T)   # (K, N)
        eh = np.exp(params.w_hour @ xh.T)
        g_day = (b * ed) @ xd
        g_hour = (b * eh) @ xh

        vis_d, vis_h = self._visited_features()
        e_vis_d = np.exp(params.w_day @ vis_d.T)   # (K, P_visited)
        e_vis_h = np.exp(params.w_hour @ vis_h.T)
        g_day -= self.base_scale * (e_vis_d @ vis_d) / len(vis_d)
        g_hour -= self.base_scale * (e_vis_h @ vis_h) / len(vis_h)

        ra = (inv[..., None] * a).reshape(-1, k)
        flat_c = self.samples.ravel()
        g_alpha = np.empty((k, k))
        for j in range(k):
            g_alpha[:, j] = np.bincount(flat_c, weights=ra[:, j], minlength=k)
        g_alpha /= s
        d = np.bincount(flat_c, weights=np.tile(self.graph.mass, s), minlength=k) / s
        g_alpha -= d[None, :]

        g_day -= self.l2.w_day * params.w_day
        g_hour -= self.l2.w_hour * params.w_hour
        g_alpha -= self.l2.alpha * params.alpha

        comp = (self.base_scale * (e_vis_d.mean(axis=1) + e_vis_h.mean(axis=1)).sum()
                + (params.alpha.sum(axis=0)[self.samples] * self.graph.mass[None, :]).sum(axis=1))
        logp = np.log(np.maximum(params.prior_p, INTENSITY_FLOOR))
        prior = logp[self.samples[:, self.latent]].sum(axis=1)
        value = float(np.mean(ev - comp + prior) - self.penalty(params))
        at_bound = (params.alpha <= 0.0) & (g_alpha < 0.0)
        return value, ParameterGradient(g_day, g_hour, g_alpha, at_bound)


def full_samples(log: EventLog, samples) -> np.ndarray:
    """Expand latent-value samples (S, N_z) or assignments into (S, N) category arrays."""
    if isinstance(samples, CategoryAssignment):
        samples = [samples]
    if len(samples) and isinstance(samples[0], CategoryAssignment):
        samples = np.array([s.fill(log)[log.latent_index] for s in samples], dtype=np.int64)
    samples = np.asarray(samples, dtype=np.int64)
    latent = log.latent_index
    if samples.ndim == 1:
        samples = samples[None, :]
    if samples.shape[0] == 0:
        if len(latent):
            raise ValueError("sample set is empty")
        samples = np.zeros((1, 0), dtype=np.int64)
    if samples.shape[1] != len(latent):
        raise ValueError("sample width does not match the number of latent events")
    out = np.repeat(np.asarray(log.categories, dtype=np.int64)[None, :], samples.shape[0], axis=0)
    out[:, latent] = samples
    return out


def gradient(log: EventLog, samples, features: VenueFeatureTable, params: ModelParameters,
             l2: Optional[L2Weights] = None, graph: Optional[ExcitationGraph] = None) -> ParameterGradient:
    """Gradient of the sample-averaged log joint minus the L2 penalty."""
    if graph is None:
        graph = ExcitationGraph(log, params.eta, params.h, params.metric)
    obj = SampleObjective(log, graph, features, full_samples(log, samples), l2=l2 or L2Weights())
    return obj.value_and_gradient(params)[1]
