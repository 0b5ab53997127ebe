import json
import os
import subprocess
import sys

import pytest

from parest.cli import (ConfigError, ExperimentConfig, main, parse_config,
                        run_experiment)


def write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_parse_config_diagnostics(tmp_path):
    path = write(tmp_path, "experiment identity_suite\n")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config(path)
    path = write(tmp_path, "bogus.key = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(path)
    path = write(tmp_path, "threads = 1\nthreads = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(path)
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(str(tmp_path / "missing.cfg"))


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown experiment"):
        ExperimentConfig({"experiment": "nope"})
    with pytest.raises(ConfigError, match="positive"):
        ExperimentConfig({"experiment": "identity_suite",
                          "mesh.resolution": "0"})
    with pytest.raises(ConfigError, match="uniform"):
        ExperimentConfig({"experiment": "identity_suite",
                          "time.grading": "geometric"})
    cfg = ExperimentConfig({"experiment": "identity_suite"})
    assert cfg.threads == 1 and cfg.prefix == "identity_suite"


def test_threads_env_override(monkeypatch):
    monkeypatch.setenv("PAREST_THREADS", "3")
    cfg = ExperimentConfig({"experiment": "identity_suite"})
    assert cfg.threads == 3
    monkeypatch.setenv("PAREST_THREADS", "many")
    with pytest.raises(ConfigError):
        ExperimentConfig({"experiment": "identity_suite"})


def test_malformed_config_exit_2_no_partial_csv(tmp_path):
    path = write(tmp_path, "experiment = identity_suite\nmesh.dim = seven\n"
                 f"output.dir = {tmp_path}\n")
    rc = main(["run", path])
    assert rc == 2
    assert not list(tmp_path.glob("*.csv"))


def test_identity_suite_end_to_end(tmp_path, capsys):
    path = write(tmp_path, f"""
experiment = identity_suite
mesh.dim = 1
mesh.resolution = 8
mesh.degree = 1
time.steps = 3
identity.samples = 4
output.dir = {tmp_path}
""")
    rc = main(["run", path])
    out = capsys.readouterr().out
    assert rc == 0
    assert "PASS identity_residuals" in out
    manifest = json.loads((tmp_path / "identity_suite.json").read_text())
    assert manifest["passed"] is True
    assert manifest["tolerances"]["identity_residual"] == 1e-10
    csv = (tmp_path / "identity_suite.csv").read_text().splitlines()
    assert csv[0] == "sample,infsup_residual,ys_residual"
    assert len(csv) == 5


def test_list_and_schema(capsys):
    assert main(["list-experiments"]) == 0
    out = capsys.readouterr().out
    assert "hypercircle_check" in out
    assert main(["schema"]) == 0
    out = capsys.readouterr().out
    assert "experiment" in out and "mesh.resolution" in out


def test_estimator_report_csv_layout(tmp_path):
    path = write(tmp_path, f"""
experiment = estimator_report
problem.kind = polynomial_in_time
mesh.dim = 1
mesh.resolution = 8
mesh.degree = 1
time.steps = 3
output.dir = {tmp_path}
""")
    assert main(["run", path]) == 0
    lines = (tmp_path / "estimator_report.csv").read_text().splitlines()
    assert lines[0] == "cell_id,interval_index,eta_J_sq,eta_F_sq,osc_sq"
    assert len(lines) == 1 + 8 * 3


def test_determinism_bitwise(tmp_path):
    cfg_text = """
experiment = estimator_report
problem.kind = fourier_1d
problem.params = 1, 2.0
mesh.dim = 1
mesh.resolution = 8
mesh.degree = 1
time.steps = 3
output.dir = {}
"""
    outputs = []
    for sub in ("a", "b"):
        d = tmp_path / sub
        d.mkdir()
        path = write(tmp_path, cfg_text.format(d), f"{sub}.cfg")
        proc = subprocess.run(
            [sys.executable, "-m", "parest.cli", "run", path],
            capture_output=True, env={**os.environ, "PAREST_THREADS": "1"})
        assert proc.returncode == 0, proc.stderr.decode()
        outputs.append((d / "estimator_report.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_modal_only_for_inefficiency(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig({"experiment": "identity_suite",
                          "problem.kind": "modal"})
    cfg = ExperimentConfig({"experiment": "inefficiency_study",
                            "problem.kind": "modal",
                            "problem.params": "0.001, 1, 1000"})
    manifest, csv_path, json_path = run_experiment(cfg)
    assert manifest.passed()
    os.remove(csv_path)
    os.remove(json_path)
