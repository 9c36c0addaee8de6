import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from taskph.cli import experiment_checks, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(tmp_path, *argv):
    out = tmp_path / "out"
    code = main([*argv, "--out", str(out)])
    meta = json.loads((out / "metadata.json").read_text()) if (out / "metadata.json").exists() else None
    return code, out, meta


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_missing_config_exits_2(tmp_path):
    code, out, meta = run(tmp_path, "simulate", "--config", str(tmp_path / "missing.yaml"))
    assert code == 2
    assert meta is None


def test_bad_override_exits_2(tmp_path):
    code, _, _ = run(tmp_path, "simulate", "--config", str(CONFIGS / "pendulum.yaml"), "--override", "integrator.foo=1")
    assert code == 2


def test_simulate_pendulum(tmp_path):
    code, out, meta = run(tmp_path, "simulate", "--config", str(CONFIGS / "pendulum.yaml"),
                          "--override", "integrator.duration=2.0", "--override", "integrator.dt=5e-4")
    assert code == 0
    assert meta["exit_code"] == 0
    assert meta["overrides"] == ["integrator.duration=2.0", "integrator.dt=5e-4"]
    assert meta["config"]["integrator"]["dt"] == 5e-4
    assert meta["version"] and meta["numpy"] == np.__version__
    assert meta["energy_account_error"] <= 1e-8 * abs(meta["H0"])
    rows = read_csv(out / "trace.csv")
    assert float(rows[-1]["t"]) == pytest.approx(2.0)
    assert rows[0]["status"] == "ok"


def test_simulate_singularity_exits_3(tmp_path):
    code, out, meta = run(tmp_path, "simulate", "--config", str(CONFIGS / "planar3_open.yaml"),
                          "--override", "task.rank_tol=0.05", "--override", "initial.q=[0.3, 0.2, 0.1]",
                          "--override", "torques=[{start: 0.0, duration: 1.0, tau: [0.0, -5.0, -5.0]}]")
    assert code == 3
    assert meta["status"] == "singularity"
    assert read_csv(out / "trace.csv")[-1]["status"].startswith("abort:")


def test_verify_structure_toy(tmp_path):
    code, out, meta = run(tmp_path, "verify-structure", "--config", str(CONFIGS / "toy_constant.yaml"))
    assert code == 0
    assert meta["samples"] == 50
    assert max(meta["max_residuals"].values()) <= 1e-12
    assert "ok" in (out / "summary.txt").read_text()


def test_verify_structure_identity_n_is_caught(tmp_path):
    code, out, meta = run(tmp_path, "verify-structure", "--config", str(CONFIGS / "planar3_verify.yaml"),
                          "--samples", "20", "--debug-identity-n")
    assert code == 4
    assert "Lambda_bar_offdiag" in meta["failures"]


def test_verify_structure_planar(tmp_path):
    code, out, meta = run(tmp_path, "verify-structure", "--config", str(CONFIGS / "planar3_verify.yaml"),
                          "--samples", "30", "--seed", "7")
    assert code == 0
    assert len(read_csv(out / "residuals.csv")) == 30


def test_pulse_experiment_short(tmp_path):
    code, out, meta = run(tmp_path, "paper-experiment", "--config", str(CONFIGS / "pulse_grid.yaml"),
                          "--override", "experiment.duration=0.6", "--override", "integrator.dt=2e-3")
    assert code == 0, meta
    assert sorted(p.name for p in out.glob("trace_*.csv")) == [
        "trace_qstar0_W30.csv", "trace_qstar0_W7.csv", "trace_qstar1_W30.csv", "trace_qstar1_W7.csv"]
    summary = read_csv(out / "summary.csv")
    assert len(summary) == 4
    assert all(meta["checks"].values())


def test_experiment_checks_flag_failures():
    row = lambda q, w, peak, account, increase: ["r", q, w, peak, 0, 0, 0, 0, account, increase, 0, 0, "ok"]  # noqa: E731
    good = [row(0, 7, 0.2, 1e-9, -1), row(0, 30, 0.1, 1e-9, -1)]
    assert all(experiment_checks(good).values())
    bad = [row(0, 7, 0.1, 1e-3, 1.0), row(0, 30, 0.2, 1e-9, -1)]
    assert not any(experiment_checks(bad).values())


def test_analyze_impedance_toy(tmp_path):
    code, out, meta = run(tmp_path, "analyze-impedance", "--config", str(CONFIGS / "impedance_toy.yaml"))
    assert code == 0
    rows = read_csv(out / "impedance.csv")
    K = {(int(r["row"]), int(r["col"])): float(r["value"]) for r in rows if r["quantity"] == "K_tilde"}
    np.testing.assert_allclose([[K[0, 0], K[0, 1]], [K[1, 0], K[1, 1]]], 5.0 * np.eye(2), atol=1e-12)
    assert len([r for r in read_csv(out / "eigenvalues.csv") if r["kind"] == "companion"]) == 4
    assert "K_tilde" in (out / "report.txt").read_text()


def test_analyze_impedance_needs_controller(tmp_path):
    code, _, _ = run(tmp_path, "analyze-impedance", "--config", str(CONFIGS / "pendulum.yaml"))
    assert code == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "taskph.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("simulate", "verify-structure", "paper-experiment", "analyze-impedance"):
        assert name in proc.stdout
