import numpy as np
import pandas as pd
import pytest

from Service.Data import BINARY, CONTINUOUS, ColumnSpec, CovariateSchema, OutcomeType, encodeFrame
from Service.Model.Params import ModelConfig

__doc__ = """
测试公共设施

- --runslow: 运行标记为slow的端到端验收测试(默认跳过)
- 小规模数据集和快速拟合配置的fixture
"""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行标记为slow的验收测试")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skipSlow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skipSlow)


def mixedSchema() -> CovariateSchema:
    return CovariateSchema((ColumnSpec("x1", CONTINUOUS), ColumnSpec("x2", CONTINUOUS), ColumnSpec("x3", BINARY)))


def twoClusterFrame(n: int = 60, seed: int = 0, effects=(2.0, -2.0)) -> pd.DataFrame:
    """两个分离良好的簇，连续结局，效应相反"""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centers = np.array([[-3.0, -3.0], [3.0, 3.0]])
    X = centers[labels] + 0.5 * rng.standard_normal((n, 2))
    binary = (rng.random(n) < np.where(labels == 0, 0.2, 0.8)).astype(int)
    a = rng.permutation(np.arange(n) % 2)
    tau = np.asarray(effects)[labels]
    y0 = 0.5 * X[:, 0] + 0.1 * rng.standard_normal(n)
    y1 = y0 + tau
    return pd.DataFrame({"x1": X[:, 0], "x2": X[:, 1], "x3": binary, "a": a, "y": np.where(a == 1, y1, y0),
                         "true_tau": tau, "true_cluster": labels + 1, "true_y0": y0, "true_y1": y1})


@pytest.fixture
def schema() -> CovariateSchema:
    return mixedSchema()


@pytest.fixture
def smallFrame() -> pd.DataFrame:
    return twoClusterFrame()


@pytest.fixture
def smallDataset(smallFrame, schema):
    return encodeFrame(smallFrame, schema, OutcomeType())


@pytest.fixture
def quickConfig() -> ModelConfig:
    """迭代次数很少的配置，只用于检查流程"""
    return ModelConfig.fromDict({"K": 2, "restarts": 2, "max_iters": 150, "gp_budget": 20, "seed": 3,
                                 "elbo_window": 10, "tol_window": 20})


@pytest.fixture(scope="session")
def fittedModel():
    """整个测试会话共用的一个快速拟合结果"""
    from Service.Inference.VI import fit

    ds = encodeFrame(twoClusterFrame(), mixedSchema(), OutcomeType())
    config = ModelConfig.fromDict({"K": 2, "restarts": 2, "max_iters": 300, "gp_budget": 20, "seed": 3,
                                   "elbo_window": 10, "tol_window": 20})
    return fit(ds, config), ds
