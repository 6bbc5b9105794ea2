import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.metrics import adjusted_rand_score

from Service.Data import CONTINUOUS, Dataset, OutcomeType, inverseStandardization
from Service.Evaluation.Predict import SOFT, Assignment, assign, iteFromAssignment, predictControl
from Service.errorResponse import DataError
from Service.utils import getLogger

__doc__ = """
评估指标模块

该模块实现了全部评估指标和导出表：
1. 聚类与效应
   - ARI(调用sklearn)
   - PEHE：估计与真实个体效应的均方根误差
   - 各簇SATE及95% Wald置信区间
     连续结局为两组均值之差(合并方差)，二分类结局为2×2表的对数OR，有0格时加0.5(Haldane校正)
2. 决策
   - 策略风险：τ̂>0时治疗(τ̂=0归为对照)，在与策略一致的个体上估计期望结局
3. 控制组拟合
   - 连续结局为RMSE(总体分母)，二分类结局为 1{logistic(μ̂⁰)>0.5} 的准确率
4. 导出
   - MetricsReport(JSON)、列联表、簇画像表(原始尺度，含Max/Min参考行)

二分类结局在这里一律是"1=有利"。
"""

logger = getLogger("evaluation")

Z_975 = float(norm.ppf(0.975))
HALDANE = 0.5


def _checkLengths(first, second, what: str):
    if len(first) != len(second):
        raise DataError(f"length mismatch in {what}: {len(first)} vs {len(second)}")


def ari(labelsA, labelsB) -> float:
    """
    调整兰德指数

    Raises:
        DataError: 长度不一致或少于2个点
    """
    _checkLengths(labelsA, labelsB, "ARI")
    if len(labelsA) < 2:
        raise DataError("ARI needs at least two points")
    return float(adjusted_rand_score(np.asarray(labelsA), np.asarray(labelsB)))


def pehe(tauHat, tauTrue) -> float:
    """sqrt(mean((τ̂−τ)²))"""
    _checkLengths(tauHat, tauTrue, "PEHE")
    difference = np.asarray(tauHat, dtype=float) - np.asarray(tauTrue, dtype=float)
    return float(np.sqrt(np.mean(difference ** 2)))


@dataclass
class SateEstimate:
    """
    一个簇的SATE

    Attributes:
        cluster: 簇编号(从1开始)
        estimate: 连续结局为均值差，二分类为对数OR；未定义时为None
        ciLow, ciHigh: 95% Wald区间(对数尺度)
        nTreated, nControl: 两组人数
        defined: 两组都至少有1人
        haldane: 是否做了0.5校正
        oddsRatio, orCiLow, orCiHigh: 二分类时OR尺度的估计和区间
    """
    cluster: int
    estimate: Optional[float]
    ciLow: Optional[float]
    ciHigh: Optional[float]
    nTreated: int
    nControl: int
    defined: bool
    haldane: bool = False
    oddsRatio: Optional[float] = None
    orCiLow: Optional[float] = None
    orCiHigh: Optional[float] = None


def _labels(assignment) -> np.ndarray:
    return assignment.hard if isinstance(assignment, Assignment) else np.asarray(assignment, dtype=int)


def _continuousSate(cluster: int, y1: np.ndarray, y0: np.ndarray) -> SateEstimate:
    n1, n0 = len(y1), len(y0)
    estimate = float(np.mean(y1) - np.mean(y0))
    if n1 + n0 <= 2:
        return SateEstimate(cluster, estimate, None, None, n1, n0, True)
    pooled = ((n1 - 1) * np.var(y1, ddof=1 if n1 > 1 else 0) + (n0 - 1) * np.var(y0, ddof=1 if n0 > 1 else 0)) / (
            n1 + n0 - 2)
    se = float(np.sqrt(pooled * (1.0 / n1 + 1.0 / n0)))
    return SateEstimate(cluster, estimate, estimate - Z_975 * se, estimate + Z_975 * se, n1, n0, True)


def twoByTwo(y1: np.ndarray, y0: np.ndarray) -> tuple:
    """(处理组事件, 处理组非事件, 对照组事件, 对照组非事件)，事件为y=1"""
    return float(np.sum(y1 == 1)), float(np.sum(y1 == 0)), float(np.sum(y0 == 1)), float(np.sum(y0 == 0))


def logOddsRatio(d1: float, s1: float, d0: float, s0: float) -> tuple:
    """
    2×2表的对数OR及Wald标准误

    Returns:
        tuple: (log OR, se, 是否做了Haldane校正)
    """
    cells = np.array([d1, s1, d0, s0], dtype=float)
    corrected = bool(np.any(cells == 0))
    if corrected:
        cells = cells + HALDANE
    d1, s1, d0, s0 = cells
    return float(np.log((d1 / s1) / (d0 / s0))), float(np.sqrt(np.sum(1.0 / cells))), corrected


def _binarySate(cluster: int, y1: np.ndarray, y0: np.ndarray) -> SateEstimate:
    value, se, corrected = logOddsRatio(*twoByTwo(y1, y0))
    if corrected:
        logger.warning("cluster %d has an empty cell in its 2x2 table; applied Haldane correction", cluster)
    low, high = value - Z_975 * se, value + Z_975 * se
    return SateEstimate(cluster, value, low, high, len(y1), len(y0), True, corrected, float(np.exp(value)),
                        float(np.exp(low)), float(np.exp(high)))


def sate(ds: Dataset, assignment, outcomeType: Optional[OutcomeType] = None, K: Optional[int] = None) -> list:
    """
    各簇的SATE

    Args:
        ds: 数据
        assignment: Assignment或从1开始的硬标签
        outcomeType: 结局类型，默认取ds的
        K: 簇数，默认取标签最大值

    Returns:
        list: 每个簇一个SateEstimate；某组为空的簇defined=False
    """
    labels = _labels(assignment)
    _checkLengths(labels, ds.y, "SATE")
    outcomeType = ds.outcomeType if outcomeType is None else outcomeType
    K = int(labels.max()) if K is None else K
    estimates = []
    for k in range(1, K + 1):
        rows = labels == k
        y1, y0 = ds.y[rows & (ds.a == 1)], ds.y[rows & (ds.a == 0)]
        if len(y1) == 0 or len(y0) == 0:
            estimates.append(SateEstimate(k, None, None, None, len(y1), len(y0), False))
        elif outcomeType.isBinary:
            estimates.append(_binarySate(k, y1, y0))
        else:
            estimates.append(_continuousSate(k, y1, y0))
    return estimates


def sateRange(estimates: list) -> tuple:
    """已定义簇的(最小, 最大)SATE；都未定义时为(None, None)"""
    values = [item.estimate for item in estimates if item.defined]
    return (min(values), max(values)) if values else (None, None)


def policyRiskDetail(ds: Dataset, tauHat) -> tuple:
    """
    策略风险及空子组标记

    Returns:
        tuple: (风险, 用了整组均值代替的子组列表)

    Raises:
        DataError: 两个一致子组都为空
    """
    tauHat = np.asarray(tauHat, dtype=float)
    _checkLengths(tauHat, ds.y, "policy risk")
    policy = (tauHat > 0).astype(int)
    treatedConcordant = (policy == 1) & (ds.a == 1)
    controlConcordant = (policy == 0) & (ds.a == 0)
    if not treatedConcordant.any() and not controlConcordant.any():
        raise DataError("policy risk undefined: no concordant units in either arm")
    share = float(np.mean(policy))
    flagged, value = [], 0.0
    for weight, rows, arm, name in ((share, treatedConcordant, 1, "treated"),
                                    (1.0 - share, controlConcordant, 0, "control")):
        if weight == 0:
            continue
        if rows.any():
            value += weight * float(np.mean(ds.y[rows]))
        else:
            logger.warning("empty concordant %s subgroup; using the overall arm mean", name)
            flagged.append(name)
            value += weight * float(np.mean(ds.y[ds.a == arm]))
    return 1.0 - value, flagged


def policyRisk(ds: Dataset, tauHat, outcomeType: Optional[OutcomeType] = None) -> float:
    """
    策略风险 1 − (E[y|Pol=1,a=1]·p(Pol=1) + E[y|Pol=0,a=0]·p(Pol=0))

    Args:
        ds: 数据(结局已定向为越大越有利)
        tauHat: 每行的估计效应，τ̂>0时治疗
        outcomeType: 结局类型，默认取ds的；二分类时结局只能是0/1

    Returns:
        float

    Raises:
        DataError: 二分类结局中出现0/1以外的取值
    """
    outcomeType = ds.outcomeType if outcomeType is None else outcomeType
    if outcomeType.isBinary and not np.all(np.isin(ds.y, (0.0, 1.0))):
        raise DataError("policy risk on a binary outcome needs 0/1 outcomes")
    return policyRiskDetail(ds, tauHat)[0]


def controlOutcomeScore(yTrue, mu0Hat, binary: bool) -> float:
    """连续结局返回RMSE，二分类结局返回 1{logistic(μ̂⁰)>0.5} 的准确率"""
    _checkLengths(yTrue, mu0Hat, "control fit")
    yTrue, mu0Hat = np.asarray(yTrue, dtype=float), np.asarray(mu0Hat, dtype=float)
    if binary:
        return float(np.mean((mu0Hat > 0).astype(float) == yTrue))
    return float(np.sqrt(np.mean((yTrue - mu0Hat) ** 2)))


def controlFitMetrics(ds: Dataset, model) -> float:
    """
    控制组结局的拟合质量

    Raises:
        DataError: 没有控制组行
    """
    control = ds.a == 0
    if not control.any():
        raise DataError("control fit metrics need control-arm rows")
    mu0Hat = predictControl(model, ds)[control]
    return controlOutcomeScore(ds.y[control], mu0Hat, model.outcomeType.isBinary)


def contingencyTable(ds: Dataset, labels, K: Optional[int] = None) -> pd.DataFrame:
    """
    每个簇的2×2列联表

    Returns:
        pd.DataFrame: 列为 Cluster, Group, Events, NonEvents, EventProp
    """
    labels = _labels(labels)
    K = int(labels.max()) if K is None else K
    rows = []
    for k in range(1, K + 1):
        for group, arm in (("Treated", 1), ("Control", 0)):
            y = ds.y[(labels == k) & (ds.a == arm)]
            events, nonEvents = int(np.sum(y == 1)), int(np.sum(y == 0))
            total = events + nonEvents
            rows.append({"Cluster": k, "Group": group, "Events": events, "NonEvents": nonEvents,
                         "EventProp": events / total if total else None})
    return pd.DataFrame(rows, columns=["Cluster", "Group", "Events", "NonEvents", "EventProp"])


@dataclass
class MetricsReport:
    """
    评估报告

    没有真值列时ari、pehe为None；连续结局只有controlRmse，二分类结局只有controlAccuracy和contingency。
    """
    K: int
    sateEstimates: list
    sateRange: tuple
    policyRisk: float
    policyRiskFlags: list = field(default_factory=list)
    ari: Optional[float] = None
    pehe: Optional[float] = None
    controlRmse: Optional[float] = None
    controlAccuracy: Optional[float] = None
    contingency: Optional[list] = None
    tieCount: int = 0
    iteMode: str = SOFT
    featureImportance: Optional[dict] = None

    def toDict(self) -> dict:
        info = {"K": self.K, "ite_mode": self.iteMode, "ari": self.ari, "pehe": self.pehe,
                "sate_per_cluster": [asdict(item) for item in self.sateEstimates],
                "sate_range": list(self.sateRange), "policy_risk": self.policyRisk,
                "policy_risk_flags": list(self.policyRiskFlags), "tie_count": self.tieCount}
        if self.controlRmse is not None:
            info["control_rmse"] = self.controlRmse
        if self.controlAccuracy is not None:
            info["control_accuracy"] = self.controlAccuracy
        if self.contingency is not None:
            info["contingency"] = self.contingency
        if self.featureImportance is not None:
            info["feature_importance"] = self.featureImportance
        return {key: value for key, value in info.items() if value is not None}

    def toJson(self) -> str:
        return json.dumps(self.toDict(), indent=2, ensure_ascii=False)

    @classmethod
    def fromDict(cls, info: dict) -> "MetricsReport":
        return cls(K=info["K"], sateEstimates=[SateEstimate(**item) for item in info["sate_per_cluster"]],
                   sateRange=tuple(info["sate_range"]), policyRisk=info["policy_risk"],
                   policyRiskFlags=list(info.get("policy_risk_flags", [])), ari=info.get("ari"),
                   pehe=info.get("pehe"), controlRmse=info.get("control_rmse"),
                   controlAccuracy=info.get("control_accuracy"), contingency=info.get("contingency"),
                   tieCount=info.get("tie_count", 0), iteMode=info.get("ite_mode", SOFT),
                   featureImportance=info.get("feature_importance"))


def featureImportance(model) -> Optional[dict]:
    """{ClusterK: {列名: γ}}；未启用特征选择时为None"""
    if not model.config.featureSelection:
        return None
    return {f"Cluster{k + 1}": {name: float(value) for name, value in zip(model.columnNames, row)}
            for k, row in enumerate(model.params.gamma)}


def evaluateLabels(ds: Dataset, labels, K: int, tauHat=None) -> MetricsReport:
    """
    只根据硬标签评估(用于GMM对照方法)

    Args:
        ds: 数据
        labels: 从1开始的硬标签
        K: 簇数
        tauHat: 每行的估计效应；为None时使用所在簇的SATE(未定义的簇记为0)

    Returns:
        MetricsReport
    """
    labels = _labels(labels)
    estimates = sate(ds, labels, K=K)
    if tauHat is None:
        perCluster = np.array([item.estimate if item.defined else 0.0 for item in estimates])
        tauHat = perCluster[labels - 1]
    risk, flags = policyRiskDetail(ds, tauHat)
    report = MetricsReport(K=K, sateEstimates=estimates, sateRange=sateRange(estimates), policyRisk=risk,
                           policyRiskFlags=flags, iteMode="hard")
    if ds.trueCluster is not None:
        report.ari = ari(ds.trueCluster, labels)
    if ds.trueTau is not None:
        report.pehe = pehe(tauHat, ds.trueTau)
    if ds.outcomeType.isBinary:
        report.contingency = contingencyTable(ds, labels, K).to_dict(orient="records")
    return report


def evaluate(model, ds: Dataset, outcomeType: Optional[OutcomeType] = None, mode: str = SOFT) -> MetricsReport:
    """
    计算所有可以计算的指标

    Args:
        model: FitResult
        ds: 评估数据(使用训练集的标准化统计量)
        outcomeType: 结局类型，默认取模型的
        mode: PEHE和策略风险使用的ITE模式

    Returns:
        MetricsReport: SATE和列联表按硬标签计算
    """
    outcomeType = model.outcomeType if outcomeType is None else outcomeType
    assignment = assign(model, ds)
    tauHat = iteFromAssignment(assignment, model.tauHat, mode)
    estimates = sate(ds, assignment, outcomeType, model.K)
    risk, flags = policyRiskDetail(ds, tauHat)
    report = MetricsReport(K=model.K, sateEstimates=estimates, sateRange=sateRange(estimates), policyRisk=risk,
                           policyRiskFlags=flags, tieCount=int(assignment.tieBroken.sum()), iteMode=mode,
                           featureImportance=featureImportance(model))
    if ds.trueCluster is not None:
        report.ari = ari(ds.trueCluster, assignment.hard)
    if ds.trueTau is not None:
        report.pehe = pehe(tauHat, ds.trueTau)
    if (ds.a == 0).any():
        score = controlFitMetrics(ds, model)
        if outcomeType.isBinary:
            report.controlAccuracy = score
        else:
            report.controlRmse = score
    if outcomeType.isBinary:
        report.contingency = contingencyTable(ds, assignment, model.K).to_dict(orient="records")
    return report


def _referenceRows(names, kinds, means: np.ndarray, sds: np.ndarray) -> tuple:
    binary = np.array([kind != CONTINUOUS for kind in kinds])
    upper = np.where(binary, 1.0, means + sds)
    lower = np.where(binary, 0.0, means - sds)
    return upper, lower


def clusterProfile(ds: Dataset, labels, K: Optional[int] = None) -> pd.DataFrame:
    """
    各簇协变量的经验均值(原始尺度)

    Returns:
        pd.DataFrame: 列为 covariate, Max, Min, Popu, Cluster1..ClusterK；
        Max/Min为连续列的总体均值±1个总体标准差，二值列为1/0
    """
    labels = _labels(labels)
    K = int(labels.max()) if K is None else K
    means = ds.rawX.mean(axis=0)
    upper, lower = _referenceRows(ds.columnNames, ds.columnKinds, means, ds.rawX.std(axis=0))
    table = pd.DataFrame({"covariate": list(ds.columnNames), "Max": upper, "Min": lower, "Popu": means})
    for k in range(1, K + 1):
        rows = labels == k
        table[f"Cluster{k}"] = ds.rawX[rows].mean(axis=0) if rows.any() else np.nan
    return table


def estimatedClusterProfile(model) -> pd.DataFrame:
    """
    拟合得到的簇参数画像(混合后的θ̄，还原到原始尺度)

    Returns:
        pd.DataFrame: 与clusterProfile相同的列
    """
    params, reference = model.params, model.reference
    continuous = np.array([kind == CONTINUOUS for kind in model.columnKinds])
    gamma = params.gamma if model.config.featureSelection else np.ones_like(params.gamma)
    blendedMu = gamma * params.thetaMu + (1 - gamma) * reference.theta0Mu
    blendedP = gamma * params.thetaP + (1 - gamma) * reference.theta0P
    standardized = np.where(continuous, blendedMu, blendedP)
    stats = model.standardizationStats
    clusters = inverseStandardization(standardized, model.columnNames, model.columnKinds, stats)
    popu = inverseStandardization(np.where(continuous, reference.theta0Mu, reference.theta0P)[None, :],
                                  model.columnNames, model.columnKinds, stats)[0]
    sds = np.array([stats[name][1] if name in stats else 1.0 for name in model.columnNames])
    upper, lower = _referenceRows(model.columnNames, model.columnKinds, popu, sds)
    table = pd.DataFrame({"covariate": list(model.columnNames), "Max": upper, "Min": lower, "Popu": popu})
    for k in range(model.K):
        table[f"Cluster{k + 1}"] = clusters[k]
    return table
