import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from app import cli

TINY_CONFIG = {"K": 2, "restarts": 1, "max_iters": 100, "gp_budget": 10, "elbo_window": 10, "tol_window": 20}


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def simfsData(tmp_path, runner) -> str:
    path = str(tmp_path / "simfs.csv")
    result = runner.invoke(cli, ["simulate", "--scenario", "simfs", "--n", "80", "--seed", "1", "--out", path])
    assert result.exit_code == 0, result.output
    return path


@pytest.fixture
def modelPath(tmp_path, runner, simfsData) -> str:
    configPath = tmp_path / "config.json"
    configPath.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
    path = str(tmp_path / "model.json")
    result = runner.invoke(cli, ["fit", "--data", simfsData, "--config", str(configPath), "--out", path])
    assert result.exit_code == 0, result.output
    assert "final_elbo:" in result.output
    return path


def testSimulateIsByteIdentical(tmp_path, runner, simfsData):
    again = str(tmp_path / "again.csv")
    runner.invoke(cli, ["simulate", "--scenario", "simfs", "--n", "80", "--seed", "1", "--out", again])
    with open(simfsData, "rb") as first, open(again, "rb") as second:
        assert first.read() == second.read()
    assert (tmp_path / "simfs.schema.json").exists()
    frame = pd.read_csv(simfsData)
    assert list(frame.columns) == ["x1", "x2", "a", "y", "true_tau", "true_cluster", "true_y0", "true_y1"]


def testSimulateUsageErrors(tmp_path, runner):
    out = str(tmp_path / "bad.csv")
    result = runner.invoke(cli, ["simulate", "--scenario", "simhte", "--treat-prop", "1.5", "--out", out])
    assert result.exit_code == 2
    assert runner.invoke(cli, ["simulate", "--scenario", "simhte"]).exit_code == 2
    assert runner.invoke(cli, ["simulate", "--scenario", "simx", "--out", out]).exit_code == 2


def testPrintSpec(runner):
    result = runner.invoke(cli, ["simulate", "--scenario", "simhte", "--print-spec"])
    assert result.exit_code == 0
    info = json.loads(result.output)
    assert info["tau"] == [0.5, 5.0, -5.0, 0.0, 0.0]


def testAssignAndEvaluate(tmp_path, runner, simfsData, modelPath):
    out = str(tmp_path / "assign.csv")
    result = runner.invoke(cli, ["assign", "--model", modelPath, "--data", simfsData, "--out", out])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out)
    assert list(table.columns) == ["row_id", "prob_1", "prob_2", "hard_label", "tie_broken", "mu0_hat", "ite_hat"]
    np.testing.assert_allclose(table[["prob_1", "prob_2"]].sum(axis=1), 1.0, atol=1e-9)
    assert set(table["hard_label"]) <= {1, 2}

    report = str(tmp_path / "report.json")
    profile = str(tmp_path / "profile.csv")
    result = runner.invoke(cli, ["evaluate", "--model", modelPath, "--data", simfsData, "--out", report,
                                 "--baseline-gmm", "--profile-out", profile])
    assert result.exit_code == 0, result.output
    with open(report, encoding="utf-8") as f:
        info = json.load(f)
    for key in ("ari", "pehe", "policy_risk", "sate_per_cluster", "control_rmse", "baseline_gmm"):
        assert key in info
    assert list(pd.read_csv(profile).columns) == ["covariate", "Max", "Min", "Popu", "Cluster1", "Cluster2"]

    result = runner.invoke(cli, ["evaluate", "--model", modelPath, "--data", simfsData,
                                 "--contingency-out", str(tmp_path / "table.csv")])
    assert result.exit_code == 1


def testSchemaMismatchExitsWithUsageCode(tmp_path, runner, modelPath):
    other = str(tmp_path / "simbin.csv")
    runner.invoke(cli, ["simulate", "--scenario", "simbin", "--n", "40", "--out", other])
    result = runner.invoke(cli, ["assign", "--model", modelPath, "--data", other, "--out", str(tmp_path / "a.csv")])
    assert result.exit_code == 2


def testUnknownConfigKey(tmp_path, runner, simfsData):
    configPath = tmp_path / "bad.json"
    configPath.write_text('{"learning_rate": 0.1}', encoding="utf-8")
    result = runner.invoke(cli, ["fit", "--data", simfsData, "--config", str(configPath),
                                 "--out", str(tmp_path / "m.json")])
    assert result.exit_code == 2


def testPotentialOutcomesExport(tmp_path, runner):
    path = str(tmp_path / "po.csv")
    result = runner.invoke(cli, ["simulate", "--scenario", "simhte", "--n", "50", "--potential-outcomes", path])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(path)
    assert list(table.columns) == ["row_id", "y0", "y1", "cluster", "tau", "flagged"]
    assert len(table) == 50
