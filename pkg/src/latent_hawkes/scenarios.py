"""Planted-parameter synthetic setups used by tests, experiments and the fixture."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .features import N_DAYS, N_HOUR_BINS, VenueFeatureTable
from .intensity import ModelParameters
from .simulate import SimulationConfig, VenueSet, simulate_dataset


@dataclass(frozen=True)
class Scenario:
    """Knobs of a planted synthetic dataset.

    ``branching`` is the target matrix ``alpha * 8 pi h^2 / eta``;
    ``background_events`` the expected number of immigrant events per user
    and category over the window. ``diagonal``, when given, sets the
    self-excitation of each category separately.
    """

    n_categories: int = 3
    n_users: int = 5
    n_venues: int = 40
    duration: float = 672.0
    eta: float = 0.5
    h: float = 0.01
    box: tuple = (40.0, 40.2, -74.1, -73.9)
    self_branching: float = 0.6
    cross_branching: float = 0.05
    background_events: float = 6.0
    weight_spread: float = 0.5
    diagonal: Optional[tuple] = None
    seed: int = 0

    def branching(self) -> np.ndarray:
        k = self.n_categories
        b = np.full((k, k), self.cross_branching)
        np.fill_diagonal(b, self.self_branching if self.diagonal is None else self.diagonal)
        return b

    @property
    def area(self) -> float:
        return (self.box[1] - self.box[0]) * (self.box[3] - self.box[2])


def random_venues(n: int, box, rng: np.random.Generator) -> VenueSet:
    coords = np.column_stack([rng.uniform(box[0], box[1], n), rng.uniform(box[2], box[3], n)])
    # pin two venues to opposite corners so the log's extent equals the box
    coords[0] = (box[0], box[2])
    coords[-1] = (box[1], box[3])
    return VenueSet(tuple(f"v{i}" for i in range(n)), coords)


def random_features(n: int, rng: np.random.Generator, ids=()) -> VenueFeatureTable:
    return VenueFeatureTable(rng.dirichlet(np.ones(N_DAYS), size=n),
                             rng.dirichlet(np.ones(N_HOUR_BINS), size=n), tuple(ids))


def planted_parameters(sc: Scenario, rng: Optional[np.random.Generator] = None) -> ModelParameters:
    """Parameters whose base rate gives ``background_events`` per user and category.

    Weights are a common offset plus zero-sum noise, so ``w . x`` equals the
    offset for any normalized histogram up to the noise term.
    """
    rng = rng or np.random.default_rng(sc.seed)
    k = sc.n_categories
    mu = sc.background_events / (sc.area * sc.duration)
    offset = math.log(mu / 2.0)

    def weights(width):
        noise = rng.normal(0.0, sc.weight_spread, size=(k, width))
        return offset + noise - noise.mean(axis=1, keepdims=True)

    mass = 8.0 * math.pi * sc.h ** 2
    alpha = sc.branching() * sc.eta / mass
    return ModelParameters(weights(N_DAYS), weights(N_HOUR_BINS), alpha, sc.eta, sc.h)


def generate(sc: Scenario, cfg: Optional[SimulationConfig] = None):
    """(log, planted params, venue set, planted features) for a scenario."""
    rng = np.random.default_rng(sc.seed)
    venues = random_venues(sc.n_venues, sc.box, rng)
    feats = random_features(sc.n_venues, rng, venues.ids)
    params = planted_parameters(sc, rng)
    log = simulate_dataset(params, venues, sc.n_users, (0.0, sc.duration), seed=sc.seed + 1,
                           features=feats, cfg=cfg)
    return log, params, venues, feats
