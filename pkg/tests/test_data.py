import numpy as np
import pandas as pd
import pytest

from Service.Data import (BINARY, CATEGORICAL, CONTINUOUS, ColumnSpec, CovariateSchema, OutcomeType,
                          applyStandardization, computeStandardization, decodeCategorical, encodeFrame,
                          ingestCsv, inverseStandardization, split)
from Service.errorResponse import DataError, SchemaError


def _frame(**columns) -> pd.DataFrame:
    base = {"a": [0, 1, 0, 1], "y": [1.0, 2.0, 3.0, 4.0]}
    base.update(columns)
    return pd.DataFrame(base)


def testCategoricalOneHot():
    schema = CovariateSchema((ColumnSpec("site", CATEGORICAL, ("n", "s", "e")),))
    ds = encodeFrame(_frame(site=["n", "s", "e", "s"]), schema, OutcomeType())
    assert ds.columnNames == ("site_n", "site_s", "site_e")
    assert ds.columnKinds == (BINARY, BINARY, BINARY)
    np.testing.assert_array_equal(ds.X.sum(axis=1), np.ones(4))
    np.testing.assert_array_equal(decodeCategorical(ds, "site"), ["n", "s", "e", "s"])


def testStandardizationUsesSampleSd():
    schema = CovariateSchema((ColumnSpec("x", CONTINUOUS),))
    frame = pd.DataFrame({"x": [1.0, 2.0, 3.0], "a": [0, 1, 0], "y": [0.0, 1.0, 2.0]})
    ds = encodeFrame(frame, schema, OutcomeType())
    np.testing.assert_allclose(ds.X[:, 0], [-1.0, 0.0, 1.0])
    assert ds.standardizationStats["x"] == (2.0, 1.0)


def testInvalidTreatmentValue():
    schema = CovariateSchema((ColumnSpec("x", CONTINUOUS),))
    with pytest.raises(SchemaError, match="invalid treatment value"):
        encodeFrame(_frame(x=[1.0, 2.0, 3.0, 4.0], a=[0, 1, 2, 1]), schema, OutcomeType())


def testMissingValues():
    schema = CovariateSchema((ColumnSpec("x", CONTINUOUS),))
    frame = _frame(x=[1.0, np.nan, 3.0, 4.0])
    with pytest.raises(SchemaError):
        encodeFrame(frame, schema, OutcomeType())
    ds = encodeFrame(frame, schema, OutcomeType(), dropMissing=True)
    assert ds.N == 3
    np.testing.assert_array_equal(ds.rowIds, [0, 2, 3])


def testHeaderMismatch():
    schema = CovariateSchema((ColumnSpec("x", CONTINUOUS),))
    with pytest.raises(SchemaError, match="schema mismatch"):
        encodeFrame(_frame(z=[1.0, 2.0, 3.0, 4.0]), schema, OutcomeType())


def testSchemaValidation():
    with pytest.raises(SchemaError):
        CovariateSchema((ColumnSpec("x", CONTINUOUS), ColumnSpec("x", BINARY)))
    with pytest.raises(SchemaError):
        CovariateSchema((ColumnSpec("y", CONTINUOUS),))
    with pytest.raises(SchemaError):
        CovariateSchema.fromDict({"x": {"kind": "ordinal"}})
    schema = CovariateSchema.fromDict({"x": {"kind": "continuous"}, "g": {"kind": "categorical", "levels": ["a", "b"]}})
    assert CovariateSchema.fromDict(schema.toDict()) == schema


def testBinaryOutcomeFavorableLabel():
    schema = CovariateSchema((ColumnSpec("x", CONTINUOUS),))
    frame = _frame(x=[1.0, 2.0, 3.0, 4.0], y=[0, 1, 1, 0])
    ds = encodeFrame(frame, schema, OutcomeType(BINARY, favorableLabel=0))
    np.testing.assert_array_equal(ds.y, [1.0, 0.0, 0.0, 1.0])
    with pytest.raises(SchemaError):
        encodeFrame(_frame(x=[1.0, 2.0, 3.0, 4.0], y=[0, 2, 1, 0]), schema, OutcomeType(BINARY))


def testApplyStandardization(smallDataset):
    stats = {"x1": (3.0, 2.0), "x2": (0.0, 1.0)}
    ds = applyStandardization(smallDataset, stats)
    np.testing.assert_allclose(ds.X[:, 0], (smallDataset.rawX[:, 0] - 3.0) / 2.0)
    np.testing.assert_allclose(ds.X[:, 1], smallDataset.rawX[:, 1])
    np.testing.assert_array_equal(ds.X[:, 2], smallDataset.rawX[:, 2])
    np.testing.assert_allclose(inverseStandardization(ds.X, ds.columnNames, ds.columnKinds, stats), ds.rawX)
    with pytest.raises(SchemaError):
        applyStandardization(smallDataset, {"x1": (0.0, 1.0)})


def testZeroVarianceColumn():
    stats = computeStandardization(np.array([[2.0], [2.0], [2.0]]), ("x",), (CONTINUOUS,))
    assert stats["x"] == (2.0, 1.0)


def testSplitPartition(smallDataset):
    first, second = split(smallDataset, 0.5, seed=4)
    assert (first.N, second.N) == (30, 30)
    assert set(first.rowIds) | set(second.rowIds) == set(smallDataset.rowIds)
    assert not set(first.rowIds) & set(second.rowIds)
    again, _ = split(smallDataset, 0.5, seed=4)
    np.testing.assert_array_equal(first.rowIds, again.rowIds)
    # 第二份复用第一份的统计量
    assert second.standardizationStats == first.standardizationStats
    np.testing.assert_allclose(first.X[:, 0].mean(), 0.0, atol=1e-12)


def testSplitRejectsEmptyPart(smallDataset):
    with pytest.raises(DataError):
        split(smallDataset, 0.001, seed=0)


def testIngestCsv(tmp_path, smallFrame, schema):
    path = tmp_path / "d.csv"
    smallFrame.to_csv(path, index=False)
    ds = ingestCsv(str(path), schema, OutcomeType())
    assert ds.N == len(smallFrame)
    np.testing.assert_array_equal(ds.trueCluster, smallFrame["true_cluster"].to_numpy())
    with pytest.raises(FileNotFoundError):
        ingestCsv(str(tmp_path / "missing.csv"), schema, OutcomeType())
