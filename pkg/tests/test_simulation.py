import json

import numpy as np
import pandas as pd
import pytest

from Service.Data import BINARY, OutcomeType, encodeFrame
from Service.Simulation import (SANITY_LL, SCENARIOS, SIMBIN, SIMFS, SIMFS_MEANS, SIMHTE, SIMHTE_PI, SIMHTE_TAU,
                                SIMNULL, ScenarioSpec, matchClusters, parameterRecovery, potentialOutcomeTable,
                                relativeL2Error, scenarioConstants, simhteControlSurface, simulate, simulateFrame)
from Service.errorResponse import ConfigError, DataError


def testSimhteStructure():
    frame, schema, outcomeType = simulateFrame(ScenarioSpec(SIMHTE, 1200, seed=1))
    assert schema.names == [f"x{d}" for d in range(1, 13)]
    assert not outcomeType.isBinary
    shares = frame["true_cluster"].value_counts(normalize=True).sort_index().to_numpy()
    np.testing.assert_allclose(shares, SIMHTE_PI, atol=0.04)
    assert set(frame["true_tau"]) <= set(SIMHTE_TAU)
    assert set(frame["x7"].unique()) <= {0, 1}
    assert frame["a"].mean() == pytest.approx(0.5, abs=0.05)


def testTreatmentIsIndependentOfCovariates():
    for seed in range(10):
        frame, schema, _ = simulateFrame(ScenarioSpec(SIMHTE, 1200, seed=seed))
        for column in schema.names:
            assert abs(np.corrcoef(frame["a"], frame[column])[0, 1]) < 0.1


def testSimhteControlSurfaceAtOrigin():
    assert simhteControlSurface(np.zeros((1, 12)))[0] == pytest.approx(1.05)


def testOutcomesComposeFromPotentialOutcomes():
    frame, _, _ = simulateFrame(ScenarioSpec(SANITY_LL, 300, treatProp=0.3, seed=2))
    a = frame["a"].to_numpy()
    np.testing.assert_array_equal(frame["y"], np.where(a == 1, frame["true_y1"], frame["true_y0"]))
    # 线性效应场景中同一簇内的τ随x1变化
    assert frame.groupby("true_cluster")["true_tau"].nunique().min() > 1


def testSimnullHasNoEffect():
    ds = simulate(ScenarioSpec(SIMNULL, 200, seed=3))
    np.testing.assert_array_equal(ds.trueTau, np.zeros(200))
    np.testing.assert_array_equal(ds.trueCluster, np.ones(200))
    assert ds.D == 6


def testSimfsSecondDimensionCarriesNoSignal():
    frame, _, _ = simulateFrame(ScenarioSpec(SIMFS, 800, seed=4))
    means = frame.groupby("true_cluster")[["x1", "x2"]].mean()
    np.testing.assert_allclose(means["x1"], SIMFS_MEANS, atol=0.3)
    np.testing.assert_allclose(means["x2"], frame["x2"].mean(), atol=1e-10)


def testSimbinIsBinary():
    ds = simulate(ScenarioSpec(SIMBIN, 400, seed=5))
    assert ds.outcomeType.isBinary
    assert set(np.unique(ds.y)) <= {0.0, 1.0}
    assert ds.columnKinds[2:] == (BINARY, BINARY)


def testDeterministicPerSeed():
    first, _, _ = simulateFrame(ScenarioSpec(SIMHTE, 100, seed=7))
    again, _, _ = simulateFrame(ScenarioSpec(SIMHTE, 100, seed=7))
    other, _, _ = simulateFrame(ScenarioSpec(SIMHTE, 100, seed=8))
    pd.testing.assert_frame_equal(first, again)
    assert not first["y"].equals(other["y"])


def testInvalidScenarioSpec():
    for kwargs in ({"scenario": "simx", "n": 100}, {"scenario": SIMHTE, "n": 10},
                   {"scenario": SIMHTE, "n": 100, "treatProp": 1.5}, {"scenario": SIMHTE, "n": 100, "noiseSd": 0.0}):
        with pytest.raises(ConfigError):
            ScenarioSpec(**kwargs)


def testScenarioConstants():
    for scenario in SCENARIOS:
        info = scenarioConstants(scenario)
        assert sum(info["pi"]) == pytest.approx(1.0)
        json.dumps(info)
    with pytest.raises(ConfigError):
        scenarioConstants("simx")


def testPotentialOutcomeTable(smallFrame, schema):
    frame = smallFrame.copy()
    frame.loc[0, "true_y1"] = frame.loc[0, "true_y0"] + 100.0
    table = potentialOutcomeTable(encodeFrame(frame, schema, OutcomeType()), noiseSd=1.0)
    assert list(table.columns) == ["row_id", "y0", "y1", "cluster", "tau", "flagged"]
    assert table["flagged"].tolist() == [True] + [False] * (len(frame) - 1)
    bare = encodeFrame(smallFrame.drop(columns=["true_y0", "true_y1"]), schema, OutcomeType())
    with pytest.raises(DataError):
        potentialOutcomeTable(bare)


def testRelativeL2Error():
    assert relativeL2Error([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0)
    assert relativeL2Error([3.0, 4.0], [0.0, 0.0]) == pytest.approx(5.0)
    with pytest.raises(DataError):
        relativeL2Error([1.0], [1.0, 2.0])


def testMatchClusters():
    order = matchClusters(np.array([2, 2, 1, 1, 1]), np.array([1, 1, 2, 2, 2]), 2)
    np.testing.assert_array_equal(order, [1, 0])


def testParameterRecoveryPreconditions(fittedModel):
    model, ds = fittedModel
    with pytest.raises(ConfigError):
        parameterRecovery(model, ds, SIMHTE)
    with pytest.raises(DataError, match="K=5"):
        parameterRecovery(model, ds, SANITY_LL)
