from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import special
from scipy.optimize import linear_sum_assignment

from Service.Data import BINARY, CONTINUOUS, ColumnSpec, CovariateSchema, Dataset, OutcomeType, encodeFrame
from Service.Evaluation.Metrics import estimatedClusterProfile
from Service.Evaluation.Predict import assign
from Service.errorResponse import ConfigError, DataError
from Service.utils import getLogger

__doc__ = """
模拟数据模块

该模块生成全部模拟场景的数据，每个场景都带真值列(true_tau、true_cluster、true_y0、true_y1)：
1. simhte: N=1200、12个协变量(6连续、6二值)、5个簇，τ=(0.5, 5, −5, 0, 0)，非线性控制组曲面
   - 簇2与簇3在协变量空间中接近但效应相反，簇4与簇5分离明显但效应相同
2. simnull: 单簇，零效应
3. simfs: 二维4个簇，第二维在每个簇内的均值都等于总体均值，效应分两组(+2/−2)
4. sanity_lc / sanity_ll: 9个协变量(3个二值)、5个簇，线性控制组曲面；
   lc为每簇常数效应，ll为每簇线性效应
5. simbin: 二分类结局，2个簇，对数OR为(+1, −1)

处理变量与其它一切独立，观测结局 y = a·y¹ + (1−a)·y⁰。
同样的参数和种子生成完全相同的数据。
"""

logger = getLogger("simulation")

SIMHTE = "simhte"
SIMNULL = "simnull"
SIMFS = "simfs"
SANITY_LC = "sanity_lc"
SANITY_LL = "sanity_ll"
SIMBIN = "simbin"
SCENARIOS = (SIMHTE, SIMNULL, SIMFS, SANITY_LC, SANITY_LL, SIMBIN)
# 未指定样本量时的默认值
DEFAULT_SIZES = {SIMHTE: 1200, SIMNULL: 1000, SIMFS: 800, SANITY_LC: 720, SANITY_LL: 740, SIMBIN: 2000}

# simhte的簇参数：连续维度均值、标准差，二值维度概率
SIMHTE_PI = (0.19, 0.21, 0.17, 0.21, 0.22)
SIMHTE_TAU = (0.5, 5.0, -5.0, 0.0, 0.0)
SIMHTE_MEANS = ((-2.0, 2.0, -2.0, 0.0, 1.0, -1.5),
                (1.0, 1.0, 1.0, 1.0, 0.0, 1.0),
                (1.8, 0.2, 1.0, 1.0, 0.0, 1.0),
                (-1.0, -2.0, 2.0, -1.0, -1.0, 0.5),
                (2.5, -1.5, -1.5, 2.0, 2.0, -1.0))
SIMHTE_SD = 0.5
SIMHTE_PROBS = ((0.8, 0.2, 0.7, 0.3, 0.6, 0.4),
                (0.3, 0.7, 0.3, 0.7, 0.2, 0.8),
                (0.35, 0.65, 0.35, 0.65, 0.25, 0.75),
                (0.9, 0.9, 0.1, 0.1, 0.9, 0.1),
                (0.1, 0.1, 0.9, 0.9, 0.1, 0.9))

SANITY_PI = (0.2, 0.2, 0.2, 0.2, 0.2)
SANITY_TAU = (-3.0, -1.0, 0.0, 2.0, 4.0)
SANITY_SLOPES = (0.3, -0.3, 0.2, -0.2, 0.1)
SANITY_MEANS = ((-3.0, 0.0, 2.0, -1.0, 1.0, 0.0),
                (3.0, -2.0, 0.0, 1.0, -1.0, 2.0),
                (0.0, 3.0, -2.0, 2.0, 0.0, -2.0),
                (-2.0, -3.0, -1.0, -2.0, 2.0, 1.0),
                (2.0, 2.0, 3.0, 0.0, -2.0, -1.0))
SANITY_SD = 0.5
SANITY_PROBS = ((0.9, 0.1, 0.5), (0.1, 0.9, 0.5), (0.5, 0.5, 0.9), (0.9, 0.9, 0.1), (0.1, 0.1, 0.1))
SANITY_WEIGHTS = (0.8, -0.5, 0.6, 0.3, -0.7, 0.4, 0.5, -0.6, 0.3)
SANITY_BIAS = 1.0

SIMFS_PI = (0.25, 0.25, 0.25, 0.25)
SIMFS_TAU = (2.0, -2.0, 2.0, -2.0)
SIMFS_MEANS = (-6.0, -2.0, 2.0, 6.0)
SIMFS_SD = (0.7, 1.5)

SIMNULL_WEIGHTS = (0.3, -0.2, 0.5, 0.3)

SIMBIN_PI = (0.5, 0.5)
SIMBIN_TAU = (1.0, -1.0)
SIMBIN_MEANS = ((-1.5, 1.0), (1.5, -1.0))
SIMBIN_SD = 0.7
SIMBIN_PROBS = ((0.7, 0.3), (0.3, 0.7))
SIMBIN_WEIGHTS = (0.5, -0.3, 0.4, -0.2)
SIMBIN_BIAS = 0.2


@dataclass(frozen=True)
class ScenarioSpec:
    """
    模拟参数

    Attributes:
        scenario: 场景名
        n: 样本量，至少20
        treatProp: 处理组比例，(0,1)
        seed: 随机种子
        noiseSd: 连续结局的噪声标准差
    """
    scenario: str
    n: int
    treatProp: float = 0.5
    seed: int = 0
    noiseSd: float = 1.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario '{self.scenario}', expected one of {list(SCENARIOS)}")
        if int(self.n) != self.n or self.n < 20:
            raise ConfigError("n must be an integer of at least 20")
        if not 0 < self.treatProp < 1:
            raise ConfigError("treat_prop must lie strictly inside (0, 1)")
        if not self.noiseSd > 0:
            raise ConfigError("noise_sd must be positive")


def simhteControlSurface(X: np.ndarray) -> np.ndarray:
    """simhte的控制组曲面μ⁰(x)，x为12维"""
    x = [X[:, d] for d in range(12)]
    return (np.sin(np.pi * x[0] * x[1]) + 0.2 * (x[2] - 0.5) ** 2 + np.exp(x[3]) / (1 + np.exp(x[4])) + x[5] ** 2
            + 0.3 * x[6] + np.log(1 + x[7] * x[8]) + 2 * (x[9] - 0.5) ** 2 + x[10] * x[11])


def _simnullSurface(X: np.ndarray) -> np.ndarray:
    return np.sin(X[:, 0]) + 0.5 * X[:, 1] ** 2 + X[:, 2:] @ np.array(SIMNULL_WEIGHTS)


def _clusterLabels(rng: np.random.Generator, pi, n: int) -> np.ndarray:
    """按 round(π·n) 精确分配各簇人数(最大余数法补齐)，再随机打乱"""
    pi = np.asarray(pi, dtype=float)
    counts = np.floor(pi * n).astype(int)
    remainder = pi * n - counts
    for k in np.argsort(-remainder, kind="stable")[:n - counts.sum()]:
        counts[k] += 1
    return rng.permutation(np.repeat(np.arange(len(pi)), counts))


def _mixedCovariates(rng: np.random.Generator, labels: np.ndarray, means, sd, probs) -> np.ndarray:
    means, probs = np.asarray(means, dtype=float), np.asarray(probs, dtype=float)
    continuous = means[labels] + sd * rng.standard_normal((len(labels), means.shape[1]))
    binary = (rng.random((len(labels), probs.shape[1])) < probs[labels]).astype(float)
    return np.hstack([continuous, binary])


def _schema(nContinuous: int, nBinary: int) -> CovariateSchema:
    kinds = [CONTINUOUS] * nContinuous + [BINARY] * nBinary
    return CovariateSchema(tuple(ColumnSpec(f"x{d + 1}", kind) for d, kind in enumerate(kinds)))


def _generate(spec: ScenarioSpec, rng: np.random.Generator) -> tuple:
    """返回 (X, 簇标签(从0开始), μ⁰, 每行τ, 协变量连续/二值个数, 是否二分类)"""
    n = spec.n
    if spec.scenario == SIMHTE:
        labels = _clusterLabels(rng, SIMHTE_PI, n)
        X = _mixedCovariates(rng, labels, SIMHTE_MEANS, SIMHTE_SD, SIMHTE_PROBS)
        return X, labels, simhteControlSurface(X), np.asarray(SIMHTE_TAU)[labels], (6, 6), False
    if spec.scenario == SIMNULL:
        labels = np.zeros(n, dtype=int)
        X = np.hstack([rng.standard_normal((n, 4)), (rng.random((n, 2)) < 0.5).astype(float)])
        return X, labels, _simnullSurface(X), np.zeros(n), (4, 2), False
    if spec.scenario == SIMFS:
        labels = _clusterLabels(rng, SIMFS_PI, n)
        first = np.asarray(SIMFS_MEANS)[labels] + SIMFS_SD[0] * rng.standard_normal(n)
        second = SIMFS_SD[1] * rng.standard_normal(n)
        for k in range(len(SIMFS_PI)):
            second[labels == k] -= second[labels == k].mean()
        X = np.column_stack([first, second])
        return X, labels, 0.5 * X[:, 0], np.asarray(SIMFS_TAU)[labels], (2, 0), False
    if spec.scenario in (SANITY_LC, SANITY_LL):
        labels = _clusterLabels(rng, SANITY_PI, n)
        X = _mixedCovariates(rng, labels, SANITY_MEANS, SANITY_SD, SANITY_PROBS)
        tau = np.asarray(SANITY_TAU)[labels]
        if spec.scenario == SANITY_LL:
            tau = tau + np.asarray(SANITY_SLOPES)[labels] * X[:, 0]
        return X, labels, X @ np.asarray(SANITY_WEIGHTS) + SANITY_BIAS, tau, (6, 3), False
    labels = _clusterLabels(rng, SIMBIN_PI, n)
    X = _mixedCovariates(rng, labels, SIMBIN_MEANS, SIMBIN_SD, SIMBIN_PROBS)
    return X, labels, X @ np.asarray(SIMBIN_WEIGHTS) + SIMBIN_BIAS, np.asarray(SIMBIN_TAU)[labels], (2, 2), True


def simulateFrame(spec: ScenarioSpec) -> tuple:
    """
    生成一个模拟数据表

    Args:
        spec: 模拟参数

    Returns:
        tuple: (DataFrame, CovariateSchema, OutcomeType)；
        表的列为 x1..xD、a、y、true_tau、true_cluster(从1开始)、true_y0、true_y1
    """
    rng = np.random.default_rng(spec.seed)
    X, labels, mu0, tau, (nContinuous, nBinary), binary = _generate(spec, rng)
    a = (rng.random(spec.n) < spec.treatProp).astype(int)
    if binary:
        y0 = (rng.random(spec.n) < special.expit(mu0)).astype(float)
        y1 = (rng.random(spec.n) < special.expit(mu0 + tau)).astype(float)
    else:
        y0 = mu0 + spec.noiseSd * rng.standard_normal(spec.n)
        y1 = mu0 + tau + spec.noiseSd * rng.standard_normal(spec.n)
    y = a * y1 + (1 - a) * y0

    schema = _schema(nContinuous, nBinary)
    frame = pd.DataFrame(X, columns=schema.names)
    for column in schema.columns:
        if column.kind == BINARY:
            frame[column.name] = frame[column.name].astype(int)
    frame["a"] = a
    frame["y"] = y.astype(int) if binary else y
    frame["true_tau"] = tau
    frame["true_cluster"] = labels + 1
    frame["true_y0"] = y0.astype(int) if binary else y0
    frame["true_y1"] = y1.astype(int) if binary else y1
    logger.info("simulated %s: n=%d, treat_prop=%.3g, seed=%d", spec.scenario, spec.n, spec.treatProp, spec.seed)
    return frame, schema, OutcomeType("binary" if binary else "continuous")


def simulate(spec: ScenarioSpec, standardize: bool = True) -> Dataset:
    """
    生成模拟数据集

    Args:
        spec: 模拟参数
        standardize: 是否标准化连续列

    Returns:
        Dataset: 带真值列
    """
    frame, schema, outcomeType = simulateFrame(spec)
    return encodeFrame(frame, schema, outcomeType, standardize=standardize)


def scenarioConstants(scenario: str) -> dict:
    """
    场景的真值常数(可直接序列化为JSON)

    Args:
        scenario: 场景名

    Returns:
        dict: π、τ、簇均值/标准差/概率以及控制组曲面的描述
    """
    if scenario == SIMHTE:
        return {"scenario": scenario, "D": 12, "continuous": 6, "binary": 6, "pi": list(SIMHTE_PI),
                "tau": list(SIMHTE_TAU), "cluster_means": [list(m) for m in SIMHTE_MEANS], "cluster_sd": SIMHTE_SD,
                "cluster_probs": [list(p) for p in SIMHTE_PROBS],
                "mu0": "sin(pi*x1*x2) + 0.2*(x3-0.5)^2 + exp(x4)/(1+exp(x5)) + x6^2 + 0.3*x7 + log(1+x8*x9)"
                       " + 2*(x10-0.5)^2 + x11*x12"}
    if scenario == SIMNULL:
        return {"scenario": scenario, "D": 6, "continuous": 4, "binary": 2, "pi": [1.0], "tau": [0.0],
                "covariates": "x1..x4 ~ N(0,1), x5,x6 ~ Bernoulli(0.5)",
                "mu0": "sin(x1) + 0.5*x2^2 + w.(x3..x6)", "mu0_weights": list(SIMNULL_WEIGHTS)}
    if scenario == SIMFS:
        return {"scenario": scenario, "D": 2, "continuous": 2, "binary": 0, "pi": list(SIMFS_PI),
                "tau": list(SIMFS_TAU), "x1_means": list(SIMFS_MEANS), "x1_sd": SIMFS_SD[0],
                "x2_sd": SIMFS_SD[1], "x2_means": "equal to the population mean in every cluster", "mu0": "0.5*x1"}
    if scenario in (SANITY_LC, SANITY_LL):
        info = {"scenario": scenario, "D": 9, "continuous": 6, "binary": 3, "pi": list(SANITY_PI),
                "tau": list(SANITY_TAU), "cluster_means": [list(m) for m in SANITY_MEANS], "cluster_sd": SANITY_SD,
                "cluster_probs": [list(p) for p in SANITY_PROBS], "mu0": "w.x + b",
                "mu0_weights": list(SANITY_WEIGHTS), "mu0_bias": SANITY_BIAS}
        if scenario == SANITY_LL:
            info["tau_slopes_on_x1"] = list(SANITY_SLOPES)
        return info
    if scenario == SIMBIN:
        return {"scenario": scenario, "D": 4, "continuous": 2, "binary": 2, "pi": list(SIMBIN_PI),
                "tau": list(SIMBIN_TAU), "cluster_means": [list(m) for m in SIMBIN_MEANS], "cluster_sd": SIMBIN_SD,
                "cluster_probs": [list(p) for p in SIMBIN_PROBS], "mu0": "logit scale: w.x + b",
                "mu0_weights": list(SIMBIN_WEIGHTS), "mu0_bias": SIMBIN_BIAS, "outcome_type": "binary"}
    raise ConfigError(f"unknown scenario '{scenario}'")


def potentialOutcomeTable(ds: Dataset, noiseSd: float = 1.0) -> pd.DataFrame:
    """
    潜在结局表，用于(y⁰, y¹)散点诊断

    Args:
        ds: 带真值列的数据集
        noiseSd: 生成时的噪声标准差

    Returns:
        pd.DataFrame: 列为 row_id, y0, y1, cluster, tau, flagged；
        连续结局中 |y¹−y⁰−τ| > 6·noise_sd 的行被标记

    Raises:
        DataError: 缺少真值列
    """
    if ds.trueY0 is None or ds.trueY1 is None or ds.trueCluster is None or ds.trueTau is None:
        raise DataError("potential outcome table needs true_y0, true_y1, true_cluster and true_tau columns")
    flagged = np.zeros(ds.N, dtype=bool)
    if not ds.outcomeType.isBinary:
        flagged = np.abs(ds.trueY1 - ds.trueY0 - ds.trueTau) > 6 * noiseSd
    rowIds = ds.rowIds if ds.rowIds is not None else np.arange(ds.N)
    return pd.DataFrame({"row_id": rowIds, "y0": ds.trueY0, "y1": ds.trueY1, "cluster": ds.trueCluster,
                         "tau": ds.trueTau, "flagged": flagged})


def relativeL2Error(estimate, truth) -> float:
    """||估计−真值||₂ / ||真值||₂；真值为零向量时返回绝对误差"""
    estimate, truth = np.ravel(np.asarray(estimate, dtype=float)), np.ravel(np.asarray(truth, dtype=float))
    if estimate.shape != truth.shape:
        raise DataError("estimate and truth must have the same size")
    scale = np.linalg.norm(truth)
    error = np.linalg.norm(estimate - truth)
    return float(error / scale) if scale > 0 else float(error)


def matchClusters(labelsHat: np.ndarray, labelsTrue: np.ndarray, K: int) -> np.ndarray:
    """
    把估计簇与真实簇一一对应(匈牙利算法，最大化重叠)

    Returns:
        np.ndarray: order[k] 为与真实簇k+1对应的估计簇下标(从0开始)
    """
    overlap = np.zeros((K, K))
    for k in range(K):
        for j in range(K):
            overlap[k, j] = np.sum((labelsTrue == k + 1) & (labelsHat == j + 1))
    _, order = linear_sum_assignment(-overlap)
    return order


def parameterRecovery(model, ds: Dataset, scenario: str) -> dict:
    """
    线性合理性检查场景下的参数恢复误差

    对 θ_k(原始尺度的连续均值和二值概率)、β_k、π、μ⁰ 分别计算相对L2误差并取平均。
    β_k的真值取真实簇内true_tau的均值，μ⁰的真值为生成公式在训练行上的值。

    Args:
        model: 在ds上拟合的FitResult(K与真实簇数一致)
        ds: 训练数据
        scenario: sanity_lc或sanity_ll

    Returns:
        dict: {"theta", "beta", "pi", "mu0", "average"}
    """
    if scenario not in (SANITY_LC, SANITY_LL):
        raise ConfigError("parameter recovery is defined for the sanity scenarios")

    K = len(SANITY_PI)
    if model.K != K or ds.trueCluster is None:
        raise DataError("parameter recovery needs a K=5 model and true_cluster labels")
    order = matchClusters(assign(model, ds).hard, ds.trueCluster, K)
    profile = estimatedClusterProfile(model)
    thetaHat = profile[[f"Cluster{j + 1}" for j in order]].to_numpy().T
    thetaTrue = np.hstack([np.asarray(SANITY_MEANS), np.asarray(SANITY_PROBS)])
    betaTrue = np.array([ds.trueTau[ds.trueCluster == k + 1].mean() for k in range(K)])
    mu0Hat = model.globalParams.mu0
    mu0True = ds.rawX @ np.asarray(SANITY_WEIGHTS) + SANITY_BIAS
    errors = {"theta": relativeL2Error(thetaHat, thetaTrue),
              "beta": relativeL2Error(model.tauHat[order], betaTrue),
              "pi": relativeL2Error(model.globalParams.pi[order], SANITY_PI),
              "mu0": relativeL2Error(mu0Hat, mu0True)}
    errors["average"] = float(np.mean(list(errors.values())))
    return errors
