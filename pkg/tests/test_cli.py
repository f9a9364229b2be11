import csv
import json
import subprocess
import sys

import pytest

from robust_mhe import cli


def write_config(tmp_path, stage_cost="beta", **kw):
    est = {"name": "est", "kind": "mhe", "horizon": 3}
    if stage_cost == "beta":
        est.update(stage_cost="beta", beta=1e-4)
    d = {
        "schema_version": 1,
        "model": "wiener",
        "contamination": {"p_c": 0.2},
        "estimators": [{"name": "KF", "kind": "kf"}, est],
        "n_trials": 2,
        "n_steps": 40,
        "base_seed": 3,
    }
    d.update(kw)
    p = tmp_path / f"{stage_cost}.json"
    p.write_text(json.dumps(d))
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(a)]) == 0
    assert cli.main(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.csv"
    cli.main(["simulate", "--config", str(cfg), "--seed", "2", "--out", str(c)])
    assert c.read_bytes() != a.read_bytes()


def test_simulate_layout(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "t.csv"
    cli.main(["simulate", "--config", str(cfg), "--out", str(out)])
    rows = read_csv(out)
    assert rows[0] == ["t", "x0", "x1", "x2", "x3", "y0", "y1", "outlier_flag"]
    assert len(rows) == 40 + 1
    assert {r[-1] for r in rows[1:]} <= {"0", "1"}
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 41))


def test_simulate_leaves_config_untouched(tmp_path):
    cfg = write_config(tmp_path)
    before = cfg.read_bytes()
    cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "t.csv")])
    assert cfg.read_bytes() == before


def test_estimate_writes_results(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "r.csv"
    assert cli.main(["estimate", "--config", str(cfg), "--out", str(out), "--trials", "1"]) == 0
    rows = read_csv(out)
    assert rows[0] == ["estimator", "trial", "rmse", "mean_step_ms", "status"]
    assert len(rows) == 1 + 2
    assert "KF" in capsys.readouterr().out


def test_estimate_json(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "r.json"
    assert cli.main(["estimate", "--config", str(cfg), "--out", str(out), "--format", "json"]) == 0
    data = json.loads(out.read_text())
    assert len(data) == 4 and {"errors", "checksum", "status"} <= set(data[0])


def test_sweep_pc_directory(tmp_path):
    cfg = write_config(tmp_path, pc_grid=[0.0, 0.2], n_trials=1, n_steps=20)
    out = tmp_path / "pc"
    assert cli.main(["sweep-pc", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "results_pc0.csv").exists() and (out / "results_pc0.2.csv").exists()
    assert len(read_csv(out / "summary.csv")) == 1 + 2 * 2


def test_sweep_beta(tmp_path):
    cfg = write_config(tmp_path, beta_grid=[1e-4, 1e-2], n_trials=1, n_steps=20)
    out = tmp_path / "b.csv"
    assert cli.main(["sweep-beta", "--config", str(cfg), "--out", str(out)]) == 0
    names = {r[0] for r in read_csv(out)[1:]}
    assert len(names) == 3


def test_analyze_if_bounded(tmp_path):
    cfg = write_config(tmp_path, "beta")
    out = tmp_path / "if.json"
    assert cli.main(["analyze-if", "--config", str(cfg), "--out", str(out), "--z-points", "21"]) == 0
    rep = json.loads(out.read_text())
    assert rep["verdict"] == "bounded"
    assert rep["bound"] is not None and rep["empirical_sup"] <= rep["bound"]


def test_analyze_if_unbounded(tmp_path):
    cfg = write_config(tmp_path, "standard")
    out = tmp_path / "if.json"
    assert cli.main(["analyze-if", "--config", str(cfg), "--out", str(out), "--z-points", "21"]) == 0
    rep = json.loads(out.read_text())
    assert rep["verdict"] == "unbounded"
    assert rep["bound"] is None
    assert rep["growth_ratio"] == pytest.approx(2.0, rel=0.1)


def test_malformed_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"schema_version": 1, "model": "wiener", "estimators": [], "n_trials": 1}))
    assert cli.main(["analyze-if", "--config", str(p)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path):
    assert cli.main(["estimate", "--config", str(tmp_path / "nope.json")]) == 2


def test_unwritable_output_exit_code(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "no" / "t.csv")]) == 3


def test_reproduce_unknown_figure(capsys):
    assert cli.main(["reproduce", "fig7"]) == 2
    err = capsys.readouterr().err
    assert "fig2" in err and "fig10" in err


def test_reproduce_small_fig5(tmp_path):
    out = tmp_path / "fig5"
    assert cli.main(["reproduce", "fig5", "--trials", "2", "--out", str(out)]) == 0
    bands = read_csv(out / "bands.csv")
    assert bands[0] == ["t", "estimator", "state", "mean", "lo95", "hi95"]
    assert (out / "summary.csv").exists()


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "t.csv"
    proc = subprocess.run([sys.executable, "-m", "robust_mhe", "simulate", "--config", str(cfg),
                           "--out", str(out), "-q"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
