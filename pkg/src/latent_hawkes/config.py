"""Run configuration: one TOML file with a section per component.

Unknown sections or keys are rejected so typos do not silently fall back to
defaults. ``RunConfig.to_dict`` is the frozen snapshot written to manifests.
"""
from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .inference import EmConfig, GibbsConfig, MStepConfig
from .likelihood import L2Weights
from .simulate import SimulationConfig

CONFIG_ENV = "LATENT_HAWKES_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    eta: float = 0.5          # 1/hours
    h: float = 0.01           # degrees
    metric: str = "euclidean"
    init_seed: int = 0


@dataclass(frozen=True)
class SplitConfig:
    train_weeks: Optional[float] = None
    test_weeks: float = 0.0
    tolerance_hours: float = 0.0


@dataclass(frozen=True)
class GridConfig:
    # share of the time span held out at the end for scoring
    holdout_fraction: float = 0.2
    score_sweeps: int = 50


@dataclass(frozen=True)
class EvaluationConfig:
    ks: tuple = (1, 2, "all")
    threshold: float = 0.0


@dataclass(frozen=True)
class RuntimeConfig:
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    em: EmConfig = field(default_factory=EmConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["evaluation"]["ks"] = list(self.evaluation.ks)
        return d

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides (``em.gibbs.seed`` etc.)."""
        tree = self.to_dict()
        for dotted, value in overrides.items():
            node = tree
            *path, leaf = dotted.split(".")
            for p in path:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section {dotted!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return config_from_dict(tree)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name == "l2":
            value = _build(L2Weights, value, f"{where}.l2")
        elif name == "m_step":
            value = _build(MStepConfig, value, f"{where}.m_step")
        elif name == "gibbs":
            value = _build(GibbsConfig, value, f"{where}.gibbs")
        elif name == "ks":
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


_SECTIONS = {"model": ModelConfig, "em": EmConfig, "simulation": SimulationConfig,
             "split": SplitConfig, "grid": GridConfig, "evaluation": EvaluationConfig,
             "runtime": RuntimeConfig}


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS) - {"scenario", "params"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(**{name: _build(cls, data[name], name)
                        for name, cls in _SECTIONS.items() if name in data})


def read_toml(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path=None) -> RunConfig:
    """Defaults, overlaid by ``path`` or else the file named by the env var."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    return config_from_dict(read_toml(path))

