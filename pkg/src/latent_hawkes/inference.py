"""Stochastic EM for latent categories: Gibbs E-step, projected-gradient M-step.

The Gibbs full conditional of a latent event ``i`` only needs the factors of
the joint likelihood that change with ``z_i``:

* the event's own intensity ``lam_{z_i}(t_i, l_i)``,
* the intensity of every later event of the same user (``i`` excites them
  through ``alpha[c_n, z_i]``),
* the compensator mass of ``i``'s excitation, ``-G_i * sum_c alpha[c, z_i]``,
* the prior ``p[z_i]``.

Everything else cancels in the normalization.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import CategoryAssignment, EventLog
from .features import VenueFeatureTable
from .intensity import INTENSITY_FLOOR, ExcitationGraph, ModelParameters, base_rates
from .likelihood import L2Weights, SampleObjective, full_samples

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Objective or gradient became non-finite."""


@dataclass(frozen=True)
class GibbsConfig:
    total_iters: int = 1000
    burn_in: int = 750
    thin: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iters:
            raise ValueError("need 0 <= burn_in < total_iters")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def n_retained(self) -> int:
        return (self.total_iters - self.burn_in) // self.thin


@dataclass(frozen=True)
class MStepConfig:
    learning_rate: float = 1e-2
    max_steps: int = 50
    l2: L2Weights = field(default_factory=L2Weights)
    tol: float = 1e-10
    armijo: float = 1e-4
    # scale each alpha coordinate's step by its current value (log-space direction)
    alpha_scaling: bool = True


@dataclass(frozen=True)
class EmConfig:
    max_em_iters: int = 50
    rel_tol: float = 1e-10
    m_step: MStepConfig = field(default_factory=MStepConfig)
    gibbs: GibbsConfig = field(default_factory=GibbsConfig)
    init: str = "random"          # or "frequent"
    warm_start: bool = True       # start each E-step from the previous chain state
    smoothing_window: int = 3

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.init not in ("random", "frequent"):
            raise ValueError("init must be 'random' or 'frequent'")


# --------------------------------------------------------------------------
# posterior container


@dataclass(eq=False)
class CategoryPosterior:
    """Retained Gibbs samples; ``samples[s, i]`` is the category of ``latent_index[i]``."""

    latent_index: np.ndarray
    samples: np.ndarray
    n_categories: int

    def __post_init__(self):
        self.latent_index = np.asarray(self.latent_index, dtype=np.int64)
        samples = np.asarray(self.samples, dtype=np.int64)
        nz = len(self.latent_index)
        # reshape(-1, 0) is ambiguous, so keep the row count when there are no columns
        rows = samples.shape[0] if samples.ndim == 2 else (samples.size // nz if nz else 0)
        self.samples = samples.reshape(rows, nz)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def is_empty(self) -> bool:
        return len(self.latent_index) == 0

    @property
    def per_event_histogram(self) -> np.ndarray:
        """(N_z, K) sample counts."""
        nz, k = len(self.latent_index), self.n_categories
        hist = np.zeros((nz, k), dtype=np.int64)
        if self.n_samples and nz:
            keys = (np.arange(nz)[None, :] * k + self.samples).ravel()
            hist = np.bincount(keys, minlength=nz * k).reshape(nz, k)
        return hist

    def mode(self) -> np.ndarray:
        """Most frequent sampled category per latent event (ties: lowest index)."""
        return np.argmax(self.per_event_histogram, axis=1).astype(np.int64)

    def mode_assignment(self) -> CategoryAssignment:
        return CategoryAssignment(self.latent_index.copy(), self.mode())

    def assignments(self) -> list[CategoryAssignment]:
        return [CategoryAssignment(self.latent_index.copy(), s.copy()) for s in self.samples]

    def merge(self, other: "CategoryPosterior") -> "CategoryPosterior":
        if not np.array_equal(self.latent_index, other.latent_index):
            raise ValueError("posteriors cover different latent events")
        return CategoryPosterior(self.latent_index, np.vstack([self.samples, other.samples]),
                                 self.n_categories)

    def to_csv(self) -> str:
        buf = io.StringIO()
        k = self.n_categories
        buf.write(",".join(["event_pos"] + [f"cat_{c}_count" for c in range(k)]) + "\n")
        for pos, row in zip(self.latent_index, self.per_event_histogram):
            buf.write(",".join([str(int(pos))] + [str(int(x)) for x in row]) + "\n")
        return buf.getvalue()


# --------------------------------------------------------------------------
# Gibbs sampling


class GibbsState:
    """Current full category vector plus cached intensities for fast updates."""

    def __init__(self, log: EventLog, graph: ExcitationGraph, features: VenueFeatureTable,
                 params: ModelParameters, categories: np.ndarray):
        self.log = log
        self.graph = graph
        self.params = params
        self.k = params.n_categories
        self.latent = log.latent_index
        self.cats = np.array(categories, dtype=np.int64)
        self.mu = base_rates(params, features.day_hist, features.hour_hist)[:, log.venues]  # (K, N)
        self.colsum = params.alpha.sum(axis=0)
        self.log_prior = np.log(np.maximum(params.prior_p, INTENSITY_FLOOR))
        t_a, t_b = graph.window
        self.in_window = (log.times >= t_a) & (log.times <= t_b)
        self.refresh()

    def refresh(self) -> None:
        self.exc = self.graph.excitation(self.cats, self.k)  # (N, K)
        n = np.arange(len(self.cats))
        self.lam = self.mu[self.cats, n] + np.einsum("nk,nk->n", self.params.alpha[self.cats], self.exc)

    def log_weights(self, i: int) -> np.ndarray:
        """Unnormalized log full-conditional of event ``i`` over the K categories."""
        alpha = self.params.alpha
        own = self.mu[:, i] + alpha @ self.exc[i]
        lw = np.log(np.maximum(own, INTENSITY_FLOOR)) if self.in_window[i] else np.zeros(self.k)
        targets, w = self.graph.outgoing(i)
        if len(targets):
            keep = self.in_window[targets]
            targets, w = targets[keep], w[keep]
        if len(targets):
            ct = self.cats[targets]
            rest = self.lam[targets] - alpha[ct, self.cats[i]] * w
            cand = rest[:, None] + alpha[ct, :] * w[:, None]
            lw = lw + np.log(np.maximum(cand, INTENSITY_FLOOR)).sum(axis=0)
        return lw - self.graph.mass[i] * self.colsum + self.log_prior

    def conditional(self, i: int) -> np.ndarray:
        lw = self.log_weights(i)
        p = np.exp(lw - lw.max())
        return p / p.sum()

    def set(self, i: int, new: int) -> None:
        old = self.cats[i]
        if new == old:
            return
        alpha = self.params.alpha
        self.cats[i] = new
        self.lam[i] = self.mu[new, i] + alpha[new] @ self.exc[i]
        targets, w = self.graph.outgoing(i)
        if len(targets):
            ct = self.cats[targets]
            self.lam[targets] += (alpha[ct, new] - alpha[ct, old]) * w
            self.exc[targets, old] -= w
            self.exc[targets, new] += w

    def sweep(self, rng: np.random.Generator) -> None:
        for i in self.latent:
            p = self.conditional(i)
            draw = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
            self.set(i, min(draw, self.k - 1))

    def assignment(self) -> CategoryAssignment:
        return CategoryAssignment(self.latent.copy(), self.cats[self.latent].copy())


def _graph_for(log: EventLog, params: ModelParameters, graph: Optional[ExcitationGraph]) -> ExcitationGraph:
    if graph is None or graph.eta != params.eta or graph.h != params.h:
        graph = ExcitationGraph(log, params.eta, params.h, params.metric)
    return graph


def gibbs_conditional(event_pos: int, current: CategoryAssignment, log: EventLog,
                      features: VenueFeatureTable, params: ModelParameters,
                      graph: Optional[ExcitationGraph] = None) -> np.ndarray:
    """p(z_i = k | z_-i, E, theta) for the latent event at position ``event_pos``."""
    if event_pos not in set(log.latent_index.tolist()):
        raise ValueError(f"event {event_pos} is not latent")
    state = GibbsState(log, _graph_for(log, params, graph), features, params, current.fill(log))
    return state.conditional(event_pos)


def gibbs_sweep(state: CategoryAssignment, log: EventLog, features: VenueFeatureTable,
                params: ModelParameters, rng: np.random.Generator,
                graph: Optional[ExcitationGraph] = None) -> CategoryAssignment:
    """One pass over the latent events in time order, resampling each in turn."""
    if len(log.latent_index) == 0:
        return state
    gs = GibbsState(log, _graph_for(log, params, graph), features, params, state.fill(log))
    gs.sweep(rng)
    return gs.assignment()


def initial_assignment(log: EventLog, k: int, how: str, rng: np.random.Generator) -> CategoryAssignment:
    latent = log.latent_index
    if how == "frequent":
        observed = log.categories[log.categories >= 0]
        top = int(np.argmax(np.bincount(observed, minlength=k))) if len(observed) else 0
        return CategoryAssignment(latent, np.full(len(latent), top, dtype=np.int64))
    return CategoryAssignment(latent, rng.integers(0, k, size=len(latent)).astype(np.int64))


def e_step(log: EventLog, features: VenueFeatureTable, params: ModelParameters,
           init: CategoryAssignment, cfg: GibbsConfig,
           graph: Optional[ExcitationGraph] = None,
           rng: Optional[np.random.Generator] = None) -> tuple[CategoryPosterior, CategoryAssignment]:
    """Run ``cfg.total_iters`` sweeps; keep every ``thin``-th state after burn-in.

    Returns the posterior and the final chain state (for warm starts).
    """
    k = params.n_categories
    latent = log.latent_index
    if len(latent) == 0:
        return CategoryPosterior(latent, np.zeros((0, 0), dtype=np.int64), k), init
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    gs = GibbsState(log, _graph_for(log, params, graph), features, params, init.fill(log))
    kept = []
    for it in range(1, cfg.total_iters + 1):
        gs.sweep(rng)
        if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            kept.append(gs.cats[latent].copy())
    samples = np.array(kept, dtype=np.int64).reshape(-1, len(latent))
    return CategoryPosterior(latent, samples, k), gs.assignment()


# --------------------------------------------------------------------------
# M-step


_GROUPS = ("w_day", "w_hour", "alpha")


def _check_finite(value: float, grad) -> None:
    for name in _GROUPS:
        if not np.all(np.isfinite(getattr(grad, name))):
            raise NumericalError(f"non-finite gradient in parameter group {name!r}")
    if not math.isfinite(value):
        raise NumericalError("non-finite objective (check w_day / w_hour magnitudes)")


def m_step(log: EventLog, features: VenueFeatureTable, posterior: CategoryPosterior,
           params_init: ModelParameters, cfg: MStepConfig,
           graph: Optional[ExcitationGraph] = None,
           objective: Optional[SampleObjective] = None) -> ModelParameters:
    """Projected gradient ascent on the sample-averaged log joint.

    Each parameter group takes its own backtracking (Armijo) line search in
    turn, so every accepted step raises the objective. ``alpha`` is clamped
    at zero after each step; ``eta`` and ``h`` are never touched.
    """
    params = params_init.copy()
    if cfg.max_steps <= 0 or cfg.learning_rate <= 0:
        return params
    if objective is None:
        graph = _graph_for(log, params, graph)
        samples = full_samples(log, posterior.samples)
        objective = SampleObjective(log, graph, features, samples, l2=cfg.l2)
    value, grad = objective.value_and_gradient(params)
    _check_finite(value, grad)
    steps = {g: cfg.learning_rate for g in _GROUPS}
    for _ in range(cfg.max_steps):
        start = value
        for group in _GROUPS:
            g = getattr(grad, group)
            cur = getattr(params, group)
            direction = g.copy()
            if group == "alpha":
                direction = np.where(grad.alpha_at_bound, 0.0, direction)
                if cfg.alpha_scaling:
                    direction = direction * np.maximum(cur, 1e-3 * max(cur.max(), 1e-8))
            if not np.any(direction):
                continue
            step = steps[group]
            while step > 1e-16:
                cand = cur + step * direction
                if group == "alpha":
                    cand = np.maximum(cand, 0.0)
                trial = params.copy()
                setattr(trial, group, cand)
                with np.errstate(over="ignore", invalid="ignore"):
                    v = objective.value(trial)
                if math.isfinite(v) and v >= value + cfg.armijo * float(np.sum(g * (cand - cur))):
                    params = trial
                    value, grad = objective.value_and_gradient(params)
                    _check_finite(value, grad)
                    steps[group] = step * 2.0
                    break
                step *= 0.5
            else:
                steps[group] = cfg.learning_rate
        if abs(value - start) <= cfg.tol * max(1.0, abs(start)):
            break
    return params


# --------------------------------------------------------------------------
# EM driver


@dataclass
class EmResult:
    params: ModelParameters
    posterior: CategoryPosterior
    trace: list = field(default_factory=list)        # objective after each M-step
    trace_se: list = field(default_factory=list)     # Monte-Carlo standard error of each value
    converged: bool = False


def run_em(log: EventLog, features: VenueFeatureTable, cfg: EmConfig, init_params: ModelParameters,
           init_assignment: Optional[CategoryAssignment] = None,
           graph: Optional[ExcitationGraph] = None) -> EmResult:
    """Alternate Gibbs E-steps and gradient M-steps until the smoothed objective settles.

    Convergence is tested on a moving average (``cfg.smoothing_window``
    iterations) of the objective, since Monte-Carlo noise makes single
    iterations jitter.
    """
    k = init_params.n_categories
    graph = _graph_for(log, init_params, graph)
    master = np.random.SeedSequence(cfg.gibbs.seed)
    init_rng = np.random.default_rng(master.spawn(1)[0])
    if init_assignment is None:
        init_assignment = initial_assignment(log, k, cfg.init, init_rng)
    params = init_params.copy()
    posterior = CategoryPosterior(log.latent_index, init_assignment.values[None, :], k)
    result = EmResult(params, posterior)
    state = init_assignment
    child_seeds = master.spawn(max(cfg.max_em_iters, 0) + 1)[1:]
    for it in range(cfg.max_em_iters):
        rng = np.random.default_rng(child_seeds[it])
        start = state if cfg.warm_start else initial_assignment(log, k, "random", rng)
        posterior, state = e_step(log, features, params, start, cfg.gibbs, graph=graph, rng=rng)
        samples = full_samples(log, posterior.samples)
        objective = SampleObjective(log, graph, features, samples, l2=cfg.m_step.l2)
        params = m_step(log, features, posterior, params, cfg.m_step, objective=objective)
        per = objective.per_sample(params)
        value = float(per.mean() - objective.penalty(params))
        se = float(per.std(ddof=1) / math.sqrt(len(per))) if len(per) > 1 else 0.0
        result.trace.append(value)
        result.trace_se.append(se)
        logger.info("EM iteration %d: objective %.6f (se %.3g)", it + 1, value, se)
        w = cfg.smoothing_window
        if len(result.trace) > w:
            prev = np.mean(result.trace[-w - 1:-1])
            cur = np.mean(result.trace[-w:])
            if abs(cur - prev) < cfg.rel_tol * abs(prev):
                result.converged = True
                break
    result.params = params
    result.posterior = posterior
    return result
