"""Command-line entry point: ``latent-hawkes <command> ...``.

Commands write their artifacts atomically into the output location next to
a ``manifest.json`` (config snapshot, seeds, dataset fingerprints, code
version, timing, units). Exit codes: 0 success, 2 input error, 3 numerical
error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_from_dict, load_config, read_toml
from .data import (CategoryAssignment, DataError, EventLog, Schema, inject_missingness, load_csv, save_csv,
                   temporal_split, unify)
from .evaluation import (annotation_report, build_evaluand, plot_rows, report_json, report_text,
                         temporal_rmse)
from .experiments import best_pair, fit, grid_search
from .features import build_features
from .inference import NumericalError, e_step, initial_assignment
from .intensity import ModelParameters
from .io import atomic_write, read_rows, write_json, write_rows
from .scenarios import Scenario, planted_parameters, random_features, random_venues
from .simulate import SupercriticalError, predict_test_window, predictions_table, simulate_dataset

logger = logging.getLogger("latent_hawkes")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT_FORMAT = "latent-hawkes-checkpoint/1"
UNITS = {"time": "hours", "space": "degrees", "eta": "1/hours", "h": "degrees"}


class InputError(ValueError):
    """Bad or inconsistent input files."""


# --------------------------------------------------------------------------
# helpers


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    return path


def _load(path, **schema) -> EventLog:
    return load_csv(_require(path), Schema(**schema) if schema else None)


class Manifest:
    def __init__(self, command: str, cfg: Optional[RunConfig] = None):
        self.data = {"command": command, "version": __version__, "units": UNITS,
                     "config": cfg.to_dict() if cfg else None, "inputs": {}, "artifacts": []}
        self._start = time.time()

    def input(self, name: str, path, log: Optional[EventLog] = None) -> None:
        entry = {"path": str(path)}
        if log is not None:
            entry.update(fingerprint=log.fingerprint(), n_events=len(log))
        self.data["inputs"][name] = entry

    def artifact(self, path) -> Path:
        self.data["artifacts"].append(Path(path).name)
        return Path(path)

    def write(self, path, **extra) -> None:
        self.data.update(extra)
        self.data["timing"] = {"started_unix": self._start, "elapsed_seconds": time.time() - self._start}
        write_json(path, self.data)


def _seeds(cfg: RunConfig) -> dict:
    return {"init": cfg.model.init_seed, "gibbs": cfg.em.gibbs.seed, "simulation": cfg.simulation.seed}


def parse_grid(text: str) -> dict[str, list[float]]:
    """``eta=0.1,0.5,h=0.01,0.02`` -> {"eta": [0.1, 0.5], "h": [0.01, 0.02]}."""
    out = {}
    for part in re.split(r",(?=\s*[A-Za-z_]+\s*=)", text.strip()):
        name, _, values = part.partition("=")
        name = name.strip()
        if name not in ("eta", "h") or not values:
            raise ConfigError(f"bad grid component {part!r}; expected eta=... or h=...")
        try:
            out[name] = [float(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"bad grid values in {part!r}") from None
        if not out[name] or any(v <= 0 for v in out[name]):
            raise ConfigError(f"grid values for {name} must be positive")
    return out


def _parse_value(raw: str):
    from .config import tomllib

    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def overrides_from_args(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        out[key.strip()] = _parse_value(raw.strip())
    return out


def _config(path, overrides=None) -> RunConfig:
    cfg = load_config(path)
    return cfg.with_overrides(overrides) if overrides else cfg


def save_checkpoint(path, params: ModelParameters, log: EventLog, **extra) -> None:
    write_json(path, {"format": CHECKPOINT_FORMAT, "params": params.to_dict(),
                      "categories": list(log.category_names), **extra})


def load_checkpoint(path) -> tuple[ModelParameters, list[str]]:
    try:
        data = json.loads(_require(path).read_text())
        if data.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{path}: not a checkpoint file")
        params = ModelParameters.from_dict(data["params"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed checkpoint ({exc})") from None
    names = list(data["categories"])
    if len(names) != params.n_categories:
        raise InputError(f"{path}: {len(names)} category names for K = {params.n_categories}")
    return params, names


def _load_with_vocabulary(path, names) -> EventLog:
    try:
        return _load(path, categories=list(names))
    except DataError as exc:
        raise InputError(f"{path}: vocabulary mismatch with checkpoint: {exc}") from None


def read_histograms(path, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(event positions, (N_z, K) counts) from a posterior or annotation CSV."""
    header, rows = read_rows(_require(path))
    if "event_pos" not in header:
        raise InputError(f"{path}: no event_pos column")
    count_cols = [i for i, h in enumerate(header) if re.fullmatch(r"cat_\d+_count", h)]
    if len(count_cols) != k:
        raise InputError(f"{path}: {len(count_cols)} count columns, expected {k}")
    pos_col = header.index("event_pos")
    try:
        pos = np.array([int(r[pos_col]) for r in rows], dtype=np.int64)
        hist = np.array([[int(r[i]) for i in count_cols] for r in rows], dtype=np.int64).reshape(-1, k)
    except (ValueError, IndexError):
        raise InputError(f"{path}: malformed rows") from None
    return pos, hist


def _posterior_mode(path, log: EventLog):
    pos, hist = read_histograms(path, log.n_categories)
    if not np.array_equal(pos, log.latent_index):
        raise InputError(f"{path}: posterior rows do not match the latent events of the dataset")
    return CategoryAssignment(pos, np.argmax(hist, axis=1).astype(np.int64))


# --------------------------------------------------------------------------
# commands


def cmd_train(data, config=None, out="run", grid: Optional[str] = None, overrides=None) -> dict:
    """Fit on ``data``; write checkpoint, posterior, objective trace and manifest."""
    cfg = _config(config, overrides)
    log = _load(data)
    if len(log) == 0:
        raise InputError(f"{data}: no events")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("train", cfg)
    manifest.input("data", data, log)
    eta, h = cfg.model.eta, cfg.model.h
    grid_scores = None
    if grid:
        axes = parse_grid(grid)
        scores = grid_search(log, cfg, axes.get("eta", [eta]), axes.get("h", [h]), cfg.runtime.workers)
        grid_scores = [{"eta": e, "h": hh, "heldout_score": s} for e, hh, s in scores]
        eta, h = best_pair(scores)
        cfg = cfg.with_overrides({"model.eta": eta, "model.h": h})
        manifest.data["config"] = cfg.to_dict()
    features = build_features(log)
    result = fit(log, features, cfg)
    if not all(math.isfinite(v) for v in result.trace):
        raise NumericalError("non-finite objective during EM")

    paths = {
        "checkpoint": manifest.artifact(out / "checkpoint.json"),
        "posterior": manifest.artifact(out / "posterior.csv"),
        "trace": manifest.artifact(out / "trace.csv"),
        "manifest": out / "manifest.json",
    }
    save_checkpoint(paths["checkpoint"], result.params, log, manifest="manifest.json",
                    dataset_fingerprint=log.fingerprint(), em_iterations=len(result.trace),
                    converged=result.converged)
    atomic_write(paths["posterior"], result.posterior.to_csv())
    write_rows(paths["trace"], ["iteration", "objective", "mc_standard_error"],
               [[i + 1, repr(v), repr(se)] for i, (v, se) in enumerate(zip(result.trace, result.trace_se))])
    if grid_scores is not None:
        write_json(manifest.artifact(out / "grid.json"), grid_scores)
    manifest.write(paths["manifest"], seeds=_seeds(cfg))
    return paths


def cmd_annotate(checkpoint, data, out, config=None, overrides=None) -> Path:
    """Per latent event: sampled-category histogram and its argmax."""
    cfg = _config(config, overrides)
    params, names = load_checkpoint(checkpoint)
    log = _load_with_vocabulary(data, names)
    features = build_features(log)
    rng = np.random.default_rng(cfg.em.gibbs.seed)
    start = initial_assignment(log, params.n_categories, cfg.em.init, rng)
    posterior, _ = e_step(log, features, params, start, cfg.em.gibbs, rng=rng)
    hist = posterior.per_event_histogram
    header = (["event_pos", "user_id", "venue_id", "timestamp"]
              + [f"cat_{c}_count" for c in range(len(names))] + ["argmax"])
    rows = []
    for pos, row in zip(posterior.latent_index, hist):
        rows.append([int(pos), log.user_ids[log.users[pos]], log.venue_ids[log.venues[pos]],
                     repr(float(log.times[pos]))] + [int(x) for x in row]
                    + [names[int(np.argmax(row))]])
    out = Path(out)
    write_rows(out, header, rows)
    manifest = Manifest("annotate", cfg)
    manifest.input("checkpoint", checkpoint)
    manifest.input("data", data, log)
    manifest.artifact(out)
    manifest.write(out.with_name(out.name + ".manifest.json"), seeds=_seeds(cfg), categories=names)
    return out


def _train_test(args_train, args_test, args_data, cfg: RunConfig, names):
    if args_data is not None:
        log = _load_with_vocabulary(args_data, names)
        return temporal_split(log, cfg.split.train_weeks, cfg.split.test_weeks, cfg.split.tolerance_hours)
    if args_train is None or args_test is None:
        raise InputError("give --train and --test, or --data with a [split] config")
    train = _load_with_vocabulary(args_train, names)
    try:
        test = _load(args_test, categories=list(names), epoch=train.epoch, week_anchor=train.week_anchor)
    except DataError as exc:
        raise InputError(f"{args_test}: {exc}") from None
    return unify(train, test)


def cmd_predict(checkpoint, out, train=None, test=None, data=None, posterior=None,
                config=None, overrides=None) -> dict:
    """Lookahead-one predictions for every test event, plus an RMSE report."""
    cfg = _config(config, overrides)
    params, names = load_checkpoint(checkpoint)
    train_log, test_log = _train_test(train, test, data, cfg, names)
    if len(test_log.latent_index):
        raise InputError("test events must have observed categories")
    features = build_features(train_log)
    assignment = None
    if len(train_log.latent_index):
        if posterior is not None:
            assignment = _posterior_mode(posterior, train_log)
        else:
            rng = np.random.default_rng(cfg.em.gibbs.seed)
            start = initial_assignment(train_log, params.n_categories, cfg.em.init, rng)
            post, _ = e_step(train_log, features, params, start, cfg.em.gibbs, rng=rng)
            assignment = post.mode_assignment()
    run = predict_test_window(params, train_log, assignment, test_log, features, cfg.simulation)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("predict", cfg)
    manifest.input("checkpoint", checkpoint)
    for name, path, lg in (("train", train, train_log), ("test", test, test_log), ("data", data, None)):
        if path is not None:
            manifest.input(name, path, lg)
    header, rows = predictions_table(run, test_log)
    paths = {"predictions": manifest.artifact(out / "predictions.csv"),
             "report": manifest.artifact(out / "report.json"),
             "report_text": manifest.artifact(out / "report.txt"),
             "plot": manifest.artifact(out / "plot.csv"),
             "manifest": out / "manifest.json"}
    write_rows(paths["predictions"], header + ["censored"],
               [r + [int(p.censored)] for r, p in zip(rows, run.predictions)])
    aligned = run.aligned_positions
    pred_t = np.array([p.timestamp for p in run.predictions])
    true_t = test_log.times[aligned] if len(aligned) else np.zeros(0)
    report = {"n_test_events": len(test_log), "n_predicted": len(run.predictions),
              "n_skipped": len(run.skipped), "n_censored": int(sum(p.censored for p in run.predictions)),
              "rmse_hours": temporal_rmse(pred_t, true_t) if len(aligned) else None}
    atomic_write(paths["report"], report_json(report))
    atomic_write(paths["report_text"], report_text(report))
    locs = test_log.locations[aligned] if len(aligned) else np.zeros((0, 2))
    ph, pr = plot_rows([p.location for p in run.predictions], locs, pred_t, true_t)
    write_rows(paths["plot"], ph, pr)
    manifest.write(paths["manifest"], seeds=_seeds(cfg))
    return paths


def _check_same_events(a: EventLog, b: EventLog, what: str) -> None:
    same = (len(a) == len(b)
            and np.array_equal(np.array(a.user_ids, dtype=object)[a.users], np.array(b.user_ids, dtype=object)[b.users])
            and np.array_equal(np.array(a.venue_ids, dtype=object)[a.venues], np.array(b.venue_ids, dtype=object)[b.venues])
            and np.allclose(a.times, b.times, rtol=0, atol=1e-9))
    if not same:
        raise InputError(f"{what} does not hold the same events as the dataset")


def cmd_evaluate(out, data=None, truth=None, posterior=None, predictions=None, test=None,
                 config=None, overrides=None) -> Path:
    """Annotation metrics (posterior + masked data + truth) and/or RMSE (predictions + test)."""
    cfg = _config(config, overrides)
    report = {}
    manifest = Manifest("evaluate", cfg)
    if posterior is not None:
        if data is None or truth is None:
            raise InputError("annotation metrics need --data (masked) and --truth")
        log = _load(data)
        try:
            full = _load(truth, categories=list(log.category_names), epoch=log.epoch,
                         week_anchor=log.week_anchor)
        except DataError as exc:
            raise InputError(f"{truth}: {exc}") from None
        _check_same_events(log, full, f"truth file {truth}")
        if np.any(full.categories[log.latent_index] < 0):
            raise InputError(f"{truth}: hidden events lack a true category")
        pos, hist = read_histograms(posterior, log.n_categories)
        if not np.array_equal(pos, log.latent_index):
            raise InputError(f"{posterior}: rows do not match the latent events of {data}")
        ev = build_evaluand(log, hist, full.categories[pos])
        report.update(annotation_report(ev, cfg.evaluation.ks, cfg.evaluation.threshold))
        manifest.input("data", data, log)
        manifest.input("truth", truth, full)
        manifest.input("posterior", posterior)
    if predictions is not None:
        if test is None:
            raise InputError("RMSE needs --test alongside --predictions")
        test_log = _load(test)
        header, rows = read_rows(_require(predictions))
        try:
            t_col, a_col = header.index("timestamp"), header.index("predicted_for")
            pred_t = np.array([float(r[t_col]) for r in rows])
            aligned = np.array([int(r[a_col]) for r in rows], dtype=np.int64)
        except (ValueError, IndexError):
            raise InputError(f"{predictions}: malformed predictions file") from None
        if len(aligned) and (aligned.min() < 0 or aligned.max() >= len(test_log)):
            raise InputError(f"{predictions}: alignment refers to events outside {test}")
        if len(aligned) > len(test_log):
            raise InputError(f"{predictions}: more predictions than test events")
        report["rmse_hours"] = temporal_rmse(pred_t, test_log.times[aligned]) if len(aligned) else None
        report["n_predicted"] = int(len(aligned))
        manifest.input("predictions", predictions)
        manifest.input("test", test, test_log)
    if not report:
        raise InputError("nothing to evaluate: give --posterior and/or --predictions")
    out = Path(out)
    atomic_write(manifest.artifact(out), report_json(report))
    atomic_write(manifest.artifact(out.with_suffix(".txt")), report_text(report))
    manifest.write(out.with_name(out.stem + ".manifest.json"))
    return out


def _simulation_setup(spec: dict, cfg: RunConfig):
    sc_data = dict(spec.get("scenario", {}))
    if "box" in sc_data:
        sc_data["box"] = tuple(sc_data["box"])
    try:
        sc = Scenario(**sc_data)
    except TypeError as exc:
        raise ConfigError(f"[scenario]: {exc}") from None
    rng = np.random.default_rng(sc.seed)
    venues = random_venues(sc.n_venues, sc.box, rng)
    feats = random_features(sc.n_venues, rng, venues.ids)
    if "params" in spec:
        p = spec["params"]
        try:
            params = ModelParameters(np.array(p["w_day"], dtype=float), np.array(p["w_hour"], dtype=float),
                                     np.array(p["alpha"], dtype=float), float(p.get("eta", sc.eta)),
                                     float(p.get("h", sc.h)))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[params]: {exc}") from None
    else:
        params = planted_parameters(sc, rng)
    return sc, venues, feats, params


def cmd_simulate(params_config, out, seed: Optional[int] = None) -> Path:
    """Synthetic fully-labelled dataset from a scenario/parameter TOML file."""
    spec = read_toml(_require(params_config))
    cfg = config_from_dict({k: v for k, v in spec.items() if k not in ("scenario", "params")})
    sc, venues, feats, params = _simulation_setup(spec, cfg)
    sim_seed = sc.seed + 1 if seed is None else seed
    log = simulate_dataset(params, venues, sc.n_users, (0.0, sc.duration), seed=sim_seed,
                           features=feats, cfg=cfg.simulation)
    out = Path(out)
    manifest = Manifest("simulate", cfg)
    manifest.input("params_config", params_config)
    save_csv(log, out)
    manifest.artifact(out)
    params_path = manifest.artifact(out.with_name(out.stem + ".params.json"))
    save_checkpoint(params_path, params, log, source="simulate")
    manifest.write(out.with_name(out.stem + ".manifest.json"), seeds={"simulation": sim_seed},
                   n_events=len(log), dataset_fingerprint=log.fingerprint())
    return out


def cmd_mask(data, out, fraction: float, seed: int = 0) -> Path:
    """Hide the categories of a random share of events (truth stays in ``data``)."""
    log = _load(data)
    try:
        masked, truth = inject_missingness(log, fraction, seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(out)
    save_csv(masked, out)
    manifest = Manifest("mask")
    manifest.input("data", data, log)
    manifest.artifact(out)
    manifest.write(out.with_name(out.stem + ".manifest.json"), seeds={"mask": seed},
                   fraction=fraction, n_hidden=len(truth))
    return out


def cmd_export_alpha(checkpoint, out) -> Path:
    params, names = load_checkpoint(checkpoint)
    rows = [[names[i]] + [repr(float(x)) for x in params.alpha[i]] for i in range(len(names))]
    out = Path(out)
    write_rows(out, ["category"] + names, rows)
    return out


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-hawkes", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config (default: $LATENT_HAWKES_CONFIG)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=[],
                        help="override one config value; repeatable")

    sp = sub.add_parser("train", help="fit parameters and latent categories")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--grid", help="held-out grid search, e.g. eta=0.1,0.5,h=0.005,0.01")
    common(sp)

    sp = sub.add_parser("annotate", help="posterior category histograms for latent events")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output CSV")
    common(sp)

    sp = sub.add_parser("predict", help="lookahead-one next check-in predictions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--train")
    sp.add_argument("--test")
    sp.add_argument("--data", help="single log split by the [split] config")
    sp.add_argument("--posterior", help="posterior CSV for the training log's latent events")
    sp.add_argument("--out", required=True, help="output directory")
    common(sp)

    sp = sub.add_parser("evaluate", help="annotation metrics and/or prediction RMSE")
    sp.add_argument("--posterior", help="posterior or annotation CSV")
    sp.add_argument("--data", help="masked dataset the posterior refers to")
    sp.add_argument("--truth", help="fully labelled version of --data")
    sp.add_argument("--predictions")
    sp.add_argument("--test")
    sp.add_argument("--out", required=True, help="output JSON (a .txt table is written beside it)")
    common(sp)

    sp = sub.add_parser("simulate", help="synthetic dataset from a scenario TOML")
    sp.add_argument("--params", required=True)
    sp.add_argument("--out", required=True, help="output CSV")
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("mask", help="hide a random share of categories")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fraction", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("export-alpha", help="write the influence matrix as labelled CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    return p


def _dispatch(args) -> None:
    ov = overrides_from_args(getattr(args, "set", None))
    if args.command == "train":
        cmd_train(args.data, args.config, args.out, grid=args.grid, overrides=ov)
    elif args.command == "annotate":
        cmd_annotate(args.checkpoint, args.data, args.out, args.config, ov)
    elif args.command == "predict":
        cmd_predict(args.checkpoint, args.out, train=args.train, test=args.test, data=args.data,
                    posterior=args.posterior, config=args.config, overrides=ov)
    elif args.command == "evaluate":
        cmd_evaluate(args.out, data=args.data, truth=args.truth, posterior=args.posterior,
                     predictions=args.predictions, test=args.test, config=args.config, overrides=ov)
    elif args.command == "simulate":
        cmd_simulate(args.params, args.out, seed=args.seed)
    elif args.command == "mask":
        cmd_mask(args.data, args.out, args.fraction, args.seed)
    elif args.command == "export-alpha":
        cmd_export_alpha(args.checkpoint, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (SupercriticalError, NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataError, ConfigError, FileNotFoundError, ValueError, csv.Error) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
