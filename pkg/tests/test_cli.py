import csv
import json

import numpy as np
import pytest

from hybrid_discovery.cli import main
from hybrid_discovery.discrete import Observations

FAST = ["--lambda-grid", "1", "--r-grid", "0.01"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_lorenz(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--system", "lorenz", "--noise", "0.2", "--seed", "7", "--out", str(out)]) == 0
    obs = Observations.from_csv(out / "observations.csv")
    assert obs.times.size == 501 and obs.n_hat == 1503
    assert len(_rows(out / "truth.csv")) == 502
    m = json.loads((out / "manifest.json").read_text())
    assert m["command"] == "simulate" and m["n_samples"] == 501 and len(m["noise_sigma"]) == 3
    assert (out / "truth_coefficients.csv").exists()


def test_simulate_gap(tmp_path):
    out = tmp_path / "gap"
    assert main(["simulate", "--system", "vdp", "--noise", "0.1", "--gap", "4:6", "--out", str(out)]) == 0
    obs = Observations.from_csv(out / "observations.csv")
    inside = (obs.times > 4) & (obs.times < 6)
    assert inside.any() and not obs.mask[inside].any()


def test_simulate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--system", "vdp", "--noise", "0.1", "--seed", "2", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "observations.csv").read_bytes() == (tmp_path / "b" / "observations.csv").read_bytes()


def test_usage_errors(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert "--system" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--system", "duffing"])
    assert exc.value.code == 2
    assert main(["simulate", "--system", "vdp", "--gap", "4:6", "--drop", "0.3", "--out", str(tmp_path)]) == 2
    assert main(["discover", "--out", str(tmp_path)]) == 2
    assert main(["discover", "--system", "vdp", "--k0", "0", "--out", str(tmp_path)]) == 2


def test_discover_unreadable_data(tmp_path):
    assert main(["discover", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("t,x1,x2\n0,1,2\n0.1,1,2\n")
    assert main(["discover", "--data", str(bad), "--system", "lorenz", "--out", str(tmp_path)]) == 1


def test_discover_from_data_file(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--system", "vdp", "--noise", "0.05", "--seed", "1", "--out", str(sim)]) == 0
    out = tmp_path / "fit"
    argv = ["discover", "--data", str(sim / "observations.csv"), "--truth", str(sim / "truth.csv"),
            "--truth-coefficients", str(sim / "truth_coefficients.csv"), "--out", str(out)] + FAST
    assert main(argv) == 0
    model = (out / "model.txt").read_text().splitlines()
    assert model[0].startswith("dx1/dt = ") and "x2" in model[0]
    m = json.loads((out / "metrics.json").read_text())
    assert set(m) == {"RE_theta", "RE_u", "TPR"}
    assert 0 < m["TPR"] <= 1 and m["RE_theta"] < 0.1 and m["RE_u"] < 0.05
    for name in ("coefficients.csv", "selection_trace.csv", "hyper_table.csv", "states.csv", "manifest.json"):
        assert (out / name).exists()


def test_discover_criterion_and_refine_flags(tmp_path):
    out = tmp_path / "aic"
    assert main(["discover", "--system", "vdp", "--noise", "0.05", "--criterion", "aic", "--refine", "2",
                 "--out", str(out)] + FAST) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["args"]["criterion"] == "aic" and man["args"]["refine"] == 2
    states = _rows(out / "states.csv")
    assert len(states) - 1 == 2 * 501 - 1
    # AIC scores: 2 per parameter instead of ln(n_hat)
    tr = _rows(out / "selection_trace.csv")
    assert tr[0][:5] == ["iteration", "mode", "k", "n_params", "score"]


def test_benchmark_report_and_replay(tmp_path):
    out = tmp_path / "bench"
    argv = ["benchmark", "--system", "vdp", "--noise", "0.1", "--seeds", "2", "--seed", "3",
            "--out", str(out)] + FAST
    assert main(argv) == 0
    res = _rows(out / "results.csv")
    assert res[0] == ["system", "noise_pct", "seed", "lambda", "R", "RE_theta", "RE_u", "TPR", "bic", "iters",
                      "wall_time"]
    assert len(res) == 3
    summ = _rows(out / "summary.csv")
    assert len(summ) == 2 and "tpr_median" in summ[0]

    replay = tmp_path / "replay"
    assert main(["benchmark", "--manifest", str(out / "manifest.json"), "--out", str(replay)]) == 0
    strip = lambda rows: [r[:-1] for r in rows]
    assert strip(_rows(replay / "results.csv")) == strip(res)

    rep = tmp_path / "rep"
    assert main(["report", str(out), "--out", str(rep)]) == 0
    rows = _rows(rep / "report.csv")
    assert rows[0][0] == "system" and len(rows) == 2


def test_report_on_empty_directory(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 1
    assert "no results" in capsys.readouterr().err


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("HYBRID_DISCOVERY_OUT", str(tmp_path / "envout"))
    assert main(["simulate", "--system", "vdp"]) == 0
    assert (tmp_path / "envout" / "observations.csv").exists()
    monkeypatch.setenv("HYBRID_DISCOVERY_WORKERS", "zero")
    assert main(["discover", "--system", "vdp"] + FAST) == 2
