"""Fitting pipelines shared by the command line and the experiment scripts."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .config import RunConfig
from .data import MISSING, CategoryAssignment, EventLog, concat, remove_latent
from .features import VenueFeatureTable, build_features
from .inference import EmResult, e_step, initial_assignment, run_em
from .intensity import ExcitationGraph, ModelParameters, base_rates, distance
from .likelihood import SampleObjective, full_samples

logger = logging.getLogger(__name__)

STRATEGIES = ("posterior", "random", "remove")


def init_parameters(k: int, cfg: RunConfig, eta: Optional[float] = None,
                    h: Optional[float] = None) -> ModelParameters:
    rng = np.random.default_rng(cfg.model.init_seed)
    return ModelParameters.random_init(k, cfg.model.eta if eta is None else eta,
                                       cfg.model.h if h is None else h, rng, metric=cfg.model.metric)


def fit(log: EventLog, features: VenueFeatureTable, cfg: RunConfig,
        eta: Optional[float] = None, h: Optional[float] = None) -> EmResult:
    params = init_parameters(log.n_categories, cfg, eta, h)
    return run_em(log, features, cfg.em, params)


@dataclass
class TreatedFit:
    """Parameters fitted under one missing-category strategy, plus the
    training log and assignment to condition predictions on."""

    strategy: str
    params: ModelParameters
    train_log: EventLog
    assignment: Optional[CategoryAssignment]
    result: EmResult


def fit_with_strategy(log: EventLog, strategy: str, cfg: RunConfig,
                      features: Optional[VenueFeatureTable] = None, seed: int = 0) -> TreatedFit:
    """Handle latent categories by posterior inference, random filling or removal.

    ``posterior`` runs EM and keeps the posterior mode; ``random`` fills each
    latent event with a uniform category and fits the completed log;
    ``remove`` drops latent events before fitting.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    features = features if features is not None else build_features(log)
    if strategy == "remove":
        log = remove_latent(log)
    elif strategy == "random":
        fill = initial_assignment(log, log.n_categories, "random", np.random.default_rng(seed))
        log = log.with_categories(fill.fill(log))
    result = fit(log, features, cfg)
    assignment = result.posterior.mode_assignment() if strategy == "posterior" else None
    return TreatedFit(strategy, result.params, log, assignment, result)


def holdout_split(log: EventLog, fraction: float) -> tuple[EventLog, float]:
    """The part of ``log`` before the cutoff that leaves ``fraction`` of the span."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    b = log.bounds
    cutoff = b.t_max - fraction * b.duration
    head = log.subset(log.times < cutoff, bounds=replace(b, t_max=cutoff))
    return head, cutoff


def heldout_score(log: EventLog, cfg: RunConfig, eta: float, h: float) -> float:
    """Held-out log joint per held-out event for one (eta, h) pair.

    Fit on the events before the cutoff, then run a short Gibbs chain over
    the whole log with the fitted parameters and average the log joint of
    the held-out window over its samples.
    """
    head, cutoff = holdout_split(log, cfg.grid.holdout_fraction)
    feats = build_features(head)
    result = fit(head, feats, cfg, eta=eta, h=h)
    params = result.params
    window = (cutoff, log.bounds.t_max)
    graph = ExcitationGraph(log, params.eta, params.h, params.metric, window=window)
    n_sweeps = max(cfg.grid.score_sweeps, 2)
    gibbs = replace(cfg.em.gibbs, total_iters=n_sweeps, burn_in=n_sweeps // 2, thin=1)
    rng = np.random.default_rng(cfg.em.gibbs.seed)
    start = initial_assignment(log, log.n_categories, "random", rng)
    if len(head.latent_index):
        # reuse the fitted posterior for the events before the cutoff
        mode = dict(zip(head.latent_index.tolist(), result.posterior.mode().tolist()))
        cats = start.fill(log)
        for pos, c in mode.items():
            cats[pos] = c
        start = CategoryAssignment(log.latent_index, cats[log.latent_index])
    posterior, _ = e_step(log, feats, params, start, gibbs, graph=graph, rng=rng)
    obj = SampleObjective(log, graph, feats, full_samples(log, posterior.samples), window=window)
    n_held = max(int(obj.event_mask.sum()), 1)
    return float(obj.per_sample(params).mean()) / n_held


def grid_search(log: EventLog, cfg: RunConfig, etas, hs, workers: int = 1) -> list[tuple[float, float, float]]:
    """Held-out scores for every (eta, h) pair, in grid order."""
    pairs = list(itertools.product(etas, hs))
    if workers > 1 and len(pairs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(heldout_score, *zip(*[(log, cfg, e, hh) for e, hh in pairs])))
    else:
        scores = [heldout_score(log, cfg, e, hh) for e, hh in pairs]
    for (e, hh), s in zip(pairs, scores):
        logger.info("grid eta=%g h=%g held-out score %.6f", e, hh, s)
    return [(e, hh, s) for (e, hh), s in zip(pairs, scores)]


def best_pair(scores: list[tuple[float, float, float]]) -> tuple[float, float]:
    """Highest score; the earliest grid point wins ties."""
    best = max(range(len(scores)), key=lambda i: (scores[i][2], -i))
    return scores[best][0], scores[best][1]


# --------------------------------------------------------------------------
# synthetic experiments


def recovery_experiment(sc, missing: float = 0.1, cfg: Optional[RunConfig] = None, seed: int = 0) -> dict:
    """Mask a planted dataset, run EM and compare with the planted truth.

    Reports the top-1 accuracy of the posterior mode on hidden events and
    which rows of alpha have the planted argmax.
    """
    from .data import inject_missingness
    from .scenarios import generate

    cfg = cfg or RunConfig()
    log, planted, _, _ = generate(sc)
    masked, truth = inject_missingness(log, missing, seed)
    feats = build_features(masked)
    result = fit(masked, feats, cfg, eta=sc.eta, h=sc.h)
    mode = result.posterior.mode()
    rows = result.params.alpha.argmax(axis=1) == planted.alpha.argmax(axis=1)
    return {"n_events": len(log), "n_hidden": len(truth), "top1_accuracy": float(np.mean(mode == truth.values)),
            "alpha_rows_matching": int(rows.sum()), "alpha": result.params.alpha.tolist(),
            "planted_alpha": planted.alpha.tolist(), "em_iterations": len(result.trace)}


def filter_fill(params: ModelParameters, features: VenueFeatureTable, history: EventLog,
                future: EventLog) -> EventLog:
    """Fill the latent events of ``future`` one by one with argmax_k lam_k.

    Each intensity looks only at earlier events (``history`` fully labelled,
    then already-filled events of ``future``), so no later timing leaks in.
    """
    if len(history.latent_index):
        raise ValueError("history must be fully labelled")
    full = concat(history, future)
    cats = full.categories.copy()
    mu = base_rates(params, features.day_hist, features.hour_hist)
    locs = full.locations
    for n in len(history) + future.latent_index:
        prior = np.flatnonzero((full.users == full.users[n]) & (full.times < full.times[n]))
        lam = mu[:, full.venues[n]].copy()
        if len(prior):
            d = distance(locs[n], locs[prior], params.metric)
            kern = np.exp(-params.eta * (full.times[n] - full.times[prior])) * np.exp(-d / (2.0 * params.h))
            lam += params.alpha[:, cats[prior]] @ kern
        cats[n] = int(np.argmax(lam))
    return future.with_categories(cats[len(history):])


def rmse_experiment(sc, missing: float = 0.2, train_weeks: float = 3.0, test_weeks: float = 1.0,
                    cfg: Optional[RunConfig] = None, seed: int = 0) -> dict:
    """Squared timestamp errors of lookahead-one predictions under each strategy.

    Categories are hidden across the whole log. Each strategy fits on the
    training part and treats hidden test-window events its own way when they
    appear in a prediction's history: ``posterior`` fills them by filtering
    with the fitted model, ``random`` uniformly, ``remove`` drops them. All
    strategies predict the same observed test events with the same seed.
    Returns per strategy the sum of squared errors, the count and the RMSE.
    """
    from .data import inject_missingness, temporal_split
    from .scenarios import generate
    from .simulate import predict_test_window

    cfg = cfg or RunConfig()
    log, _, _, _ = generate(sc)
    masked, _ = inject_missingness(log, missing, seed)
    train, test = temporal_split(masked, train_weeks, test_weeks)
    feats = build_features(train)
    observed = test.categories != MISSING
    out = {"n_train": len(train), "n_test": len(test), "n_targets": int(observed.sum())}
    for strategy in STRATEGIES:
        treated = fit_with_strategy(train, strategy, cfg, features=feats, seed=seed)
        targets = observed
        if strategy == "remove":
            history, targets = remove_latent(test), None
        elif strategy == "random":
            fill = initial_assignment(test, test.n_categories, "random", np.random.default_rng([seed, 1]))
            history = test.with_categories(fill.fill(test))
        else:
            labelled = treated.train_log.with_categories(treated.assignment.fill(treated.train_log))
            history = filter_fill(treated.params, feats, labelled, test)
        run = predict_test_window(treated.params, treated.train_log, treated.assignment, history, feats,
                                  cfg.simulation, targets=targets)
        err = np.array([p.timestamp for p in run.predictions]) - history.times[run.aligned_positions]
        sse = float(np.sum(err ** 2))
        out[strategy] = {"sse": sse, "n": int(err.size), "rmse": float(np.sqrt(sse / err.size))}
        logger.info("strategy %s: rmse %.4f h over %d predictions", strategy, out[strategy]["rmse"], err.size)
    return out


def pooled_rmse(runs: list[dict]) -> dict:
    """RMSE per strategy over the union of several experiments' predictions."""
    return {s: float(np.sqrt(sum(r[s]["sse"] for r in runs) / sum(r[s]["n"] for r in runs)))
            for s in STRATEGIES}


def synthetic_config(seed: int, max_em_iters: int = 15, gibbs=(200, 150, 2), n_samples: int = 1) -> RunConfig:
    """Settings for the planted experiments: light L2 so alpha is not shrunk."""
    from .inference import EmConfig, GibbsConfig, MStepConfig
    from .likelihood import L2Weights
    from .simulate import SimulationConfig

    total, burn, thin = gibbs
    em = EmConfig(max_em_iters=max_em_iters, m_step=MStepConfig(l2=L2Weights(1e-6, 1e-6, 1e-6)),
                  gibbs=GibbsConfig(total, burn, thin, seed=seed))
    return RunConfig(em=em, simulation=SimulationConfig(seed=seed, n_samples=n_samples))


# categories differ in how much they excite, so a wrong fill shifts predicted times
RMSE_SCENARIO = dict(n_users=12, diagonal=(0.85, 0.45, 0.05), cross_branching=0.03)


def rmse_ordering(seeds, missing: float = 0.2) -> tuple[dict, list[dict]]:
    """Pooled RMSE per strategy over one planted dataset per seed."""
    from .scenarios import Scenario

    runs = []
    for seed in seeds:
        cfg = synthetic_config(seed, max_em_iters=6, gibbs=(120, 80, 2), n_samples=40)
        runs.append(rmse_experiment(Scenario(seed=seed, **RMSE_SCENARIO), missing, cfg=cfg, seed=seed))
    return pooled_rmse(runs), runs
