import csv
import json
from pathlib import Path

import numpy as np
import pytest

from latent_hawkes.cli import main, parse_grid
from latent_hawkes.config import CONFIG_ENV, ConfigError
from latent_hawkes.data import load_csv, save_csv, temporal_split
from latent_hawkes.evaluation import temporal_rmse

DATA = Path(__file__).parent / "data"
RUN = str(DATA / "run.toml")


def read(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(DATA / "checkins_masked.csv"), "--config", RUN,
                 "--out", str(out / "run")]) == 0
    return out / "run"


def test_train_artifacts(trained):
    for name in ("checkpoint.json", "posterior.csv", "trace.csv", "manifest.json"):
        assert (trained / name).exists(), name
    ck = json.loads((trained / "checkpoint.json").read_text())
    assert ck["categories"] == ["c0", "c1", "c2"] and len(ck["params"]["alpha"]) == 3
    man = json.loads((trained / "manifest.json").read_text())
    assert man["config"]["em"]["max_em_iters"] == 3
    assert man["inputs"]["data"]["fingerprint"] == load_csv(DATA / "checkins_masked.csv").fingerprint()
    assert man["units"]["time"] == "hours"
    header, rows = read(trained / "posterior.csv")
    assert header[0] == "event_pos" and len(rows) == 15
    assert {int(sum(map(int, r[1:]))) for r in rows} == {10}  # (40 - 20) / 2 retained sweeps
    t_header, t_rows = read(trained / "trace.csv")
    assert t_header == ["iteration", "objective", "mc_standard_error"] and 1 <= len(t_rows) <= 3


def test_train_is_deterministic(trained, tmp_path):
    assert main(["train", "--data", str(DATA / "checkins_masked.csv"), "--config", RUN,
                 "--out", str(tmp_path / "again")]) == 0
    for name in ("posterior.csv", "checkpoint.json", "trace.csv"):
        assert (trained / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


def test_annotate_argmax_and_evaluate(trained, tmp_path):
    ann = tmp_path / "ann.csv"
    assert main(["annotate", "--checkpoint", str(trained / "checkpoint.json"),
                 "--data", str(DATA / "checkins_masked.csv"), "--config", RUN, "--out", str(ann)]) == 0
    header, rows = read(ann)
    counts = [h for h in header if h.startswith("cat_")]
    assert header[:4] == ["event_pos", "user_id", "venue_id", "timestamp"] and len(counts) == 3
    for r in rows:
        hist = [int(x) for x in r[4:7]]
        assert r[-1] == f"c{int(np.argmax(hist))}"
    rep = tmp_path / "metrics.json"
    assert main(["evaluate", "--posterior", str(ann), "--data", str(DATA / "checkins_masked.csv"),
                 "--truth", str(DATA / "checkins.csv"), "--out", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert report["n_latent_events"] == 15
    assert 0.0 <= report["event_centric"]["acc_at_1"] <= 1.0
    assert (tmp_path / "metrics.txt").read_text().startswith("venue-centric")


def test_export_alpha(trained, tmp_path):
    out = tmp_path / "alpha.csv"
    assert main(["export-alpha", "--checkpoint", str(trained / "checkpoint.json"), "--out", str(out)]) == 0
    header, rows = read(out)
    ck = json.loads((trained / "checkpoint.json").read_text())
    assert header == ["category", "c0", "c1", "c2"] and [r[0] for r in rows] == ["c0", "c1", "c2"]
    assert np.allclose([[float(x) for x in r[1:]] for r in rows], ck["params"]["alpha"], rtol=0, atol=0)


def test_predict_report_matches_predictions(trained, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(trained / "checkpoint.json"), "--data", str(DATA / "checkins.csv"),
                 "--config", RUN, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    header, rows = read(out / "predictions.csv")
    log = load_csv(DATA / "checkins.csv")
    _, test = temporal_split(log, 1.5, 0.5)
    aligned = [int(r[header.index("predicted_for")]) for r in rows]
    pred = [float(r[header.index("timestamp")]) for r in rows]
    assert report["n_test_events"] == len(test) == report["n_predicted"] + report["n_skipped"]
    assert report["rmse_hours"] == pytest.approx(temporal_rmse(pred, test.times[aligned]), rel=1e-12)
    for name in ("report.txt", "plot.csv", "manifest.json"):
        assert (out / name).exists()
    # the evaluate command reproduces the same number from the files
    save_csv(test, tmp_path / "test.csv")
    rep = tmp_path / "rmse.json"
    assert main(["evaluate", "--predictions", str(out / "predictions.csv"), "--test", str(tmp_path / "test.csv"),
                 "--out", str(rep)]) == 0
    assert json.loads(rep.read_text())["rmse_hours"] == pytest.approx(report["rmse_hours"], rel=1e-9)


def test_predict_empty_test_window(trained, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(trained / "checkpoint.json"), "--data", str(DATA / "checkins.csv"),
                 "--config", RUN, "--set", "split.train_weeks=2.0", "--set", "split.test_weeks=0.0",
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["n_test_events"] == 0 and report["rmse_hours"] is None


def test_predict_with_train_and_test_files(trained, tmp_path):
    log = load_csv(DATA / "checkins.csv")
    train, test = temporal_split(log, 1.5, 0.5)
    save_csv(train, tmp_path / "train.csv")
    save_csv(test, tmp_path / "test.csv")
    assert main(["predict", "--checkpoint", str(trained / "checkpoint.json"), "--train", str(tmp_path / "train.csv"),
                 "--test", str(tmp_path / "test.csv"), "--config", RUN, "--out", str(tmp_path / "p")]) == 0
    assert json.loads((tmp_path / "p" / "report.json").read_text())["n_test_events"] == len(test)


def test_missing_file_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_supercritical_exit_code(tmp_path, capsys):
    spec = tmp_path / "bad.toml"
    spec.write_text("[scenario]\nn_categories = 2\nn_users = 1\nduration = 10.0\n"
                    "self_branching = 0.95\ncross_branching = 0.2\n")
    assert main(["simulate", "--params", str(spec), "--out", str(tmp_path / "x.csv")]) == 3
    assert "branching" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_mismatched_posterior_exit_code(trained, tmp_path):
    header, rows = read(trained / "posterior.csv")
    short = tmp_path / "short.csv"
    with open(short, "w", newline="") as fh:
        csv.writer(fh).writerows([header] + rows[:-1])
    assert main(["evaluate", "--posterior", str(short), "--data", str(DATA / "checkins_masked.csv"),
                 "--truth", str(DATA / "checkins.csv"), "--out", str(tmp_path / "m.json")]) == 2


def test_bad_inputs_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("user_id,venue_id,timestamp,lat,lon,category\nu,v,soon,40,-74,c\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    cfg = tmp_path / "typo.toml"
    cfg.write_text("[em]\nmax_iters = 3\n")
    assert main(["train", "--data", str(DATA / "checkins.csv"), "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(DATA / "checkins.csv"), "--set", "em.nope=1",
                 "--out", str(tmp_path / "o")]) == 2


def test_config_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "env.toml"
    cfg.write_text((DATA / "run.toml").read_text().replace("max_em_iters = 3", "max_em_iters = 1"))
    monkeypatch.setenv(CONFIG_ENV, str(cfg))
    assert main(["train", "--data", str(DATA / "checkins.csv"), "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["em"]["max_em_iters"] == 1
    # no latent events: the posterior file has a header only
    assert read(tmp_path / "o" / "posterior.csv")[1] == []


def test_simulate_and_mask_are_seeded(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--params", str(DATA / "fixture.toml"), "--out", str(tmp_path / f"{name}.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (DATA / "checkins.csv").read_bytes()
    assert (tmp_path / "a.params.json").exists() and (tmp_path / "a.manifest.json").exists()
    assert main(["mask", "--data", str(tmp_path / "a.csv"), "--out", str(tmp_path / "m.csv"), "--fraction", "0.1"]) == 0
    assert (tmp_path / "m.csv").read_bytes() == (DATA / "checkins_masked.csv").read_bytes()
    assert main(["mask", "--data", str(tmp_path / "a.csv"), "--out", str(tmp_path / "m.csv"), "--fraction", "2"]) == 2


def test_grid_search_writes_scores(tmp_path):
    assert main(["train", "--data", str(DATA / "checkins_masked.csv"), "--config", RUN, "--set", "em.max_em_iters=1",
                 "--grid", "eta=0.25,0.5,h=0.01", "--out", str(tmp_path / "g")]) == 0
    scores = json.loads((tmp_path / "g" / "grid.json").read_text())
    assert [(s["eta"], s["h"]) for s in scores] == [(0.25, 0.01), (0.5, 0.01)]
    best = max(scores, key=lambda s: s["heldout_score"])
    ck = json.loads((tmp_path / "g" / "checkpoint.json").read_text())
    assert ck["params"]["eta"] == best["eta"]


def test_parse_grid():
    assert parse_grid("eta=0.1,0.5,h=0.01") == {"eta": [0.1, 0.5], "h": [0.01]}
    for bad in ("eta=", "rho=1", "eta=-1", "eta=a"):
        with pytest.raises(ConfigError):
            parse_grid(bad)
