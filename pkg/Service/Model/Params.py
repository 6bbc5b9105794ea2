from dataclasses import dataclass, field, fields
from typing import NamedTuple, Optional, Union

import numpy as np

from Service.Data import BINARY, CONTINUOUS, Dataset, OutcomeType
from Service.GP import LINEAR, SE_ARD, GpHyper, GpLatent
from Service.errorResponse import ConfigError, SchemaError
from Service.utils import getConfig

__doc__ = """
模型参数与配置模块

该模块定义了模型用到的全部参数类型和配置类型：
1. 参数
   - ClusterParams: 每个簇的协变量参数θ_k、特征选择权重γ_k、处理效应β_k
   - PopulationReference: 特征选择收缩的目标θ_0(总体均值/患病率)
   - GlobalParams: 混合权重π、两组噪声σ0/σ1、GP潜在曲面及超参数
2. 配置
   - PriorConfig: 全部先验超参数
   - ModelConfig: K、核函数、结局类型、推断预算和种子

配置的默认值来自config.yaml，JSON/YAML中的未知键会被拒绝。
"""


@dataclass(frozen=True, eq=False)
class ClusterParams:
    """
    全部K个簇的参数

    Attributes:
        thetaMu: K×D 簇均值(只在连续维度上使用)
        thetaSd: K×D 簇标准差(只在连续维度上使用)
        thetaP: K×D 伯努利概率(只在二值维度上使用)
        gamma: K×D 特征选择权重
        beta: 长度K的常数处理效应

    Note:
        - 未使用的位置保存中性值(均值0、标准差1、概率0.5)，计算时按列类型屏蔽
    """
    thetaMu: np.ndarray
    thetaSd: np.ndarray
    thetaP: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name in ("thetaMu", "thetaSd", "thetaP", "gamma", "beta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        shape = self.thetaMu.shape
        if self.thetaSd.shape != shape or self.thetaP.shape != shape or self.gamma.shape != shape:
            raise SchemaError("cluster parameter matrices must share the K×D shape")
        if self.beta.shape != (shape[0],):
            raise SchemaError("beta must have one entry per cluster")
        if not np.all(self.thetaSd > 0):
            raise SchemaError("theta_sd must be positive")
        if not (np.all(self.thetaP > 0) and np.all(self.thetaP < 1)):
            raise SchemaError("theta_p must lie strictly inside (0, 1)")
        if not (np.all(self.gamma >= 0) and np.all(self.gamma <= 1)):
            raise SchemaError("gamma must lie inside [0, 1]")

    @property
    def K(self) -> int:
        return self.thetaMu.shape[0]

    def permuted(self, order) -> "ClusterParams":
        """按给定顺序重排簇"""
        order = np.asarray(order)
        return ClusterParams(self.thetaMu[order], self.thetaSd[order], self.thetaP[order], self.gamma[order],
                             self.beta[order])


@dataclass(frozen=True, eq=False)
class PopulationReference:
    """
    特征选择的总体参考值

    Attributes:
        theta0Mu: 长度D，连续维度的样本均值(二值维度为0)
        theta0P: 长度D，二值维度的样本患病率(连续维度为0.5)
    """
    theta0Mu: np.ndarray
    theta0P: np.ndarray

    @classmethod
    def fromDataset(cls, ds: Dataset) -> "PopulationReference":
        means = ds.X.mean(axis=0)
        theta0Mu = np.where(ds.continuousMask, means, 0.0)
        theta0P = np.where(ds.binaryMask, np.clip(means, 0.0, 1.0), 0.5)
        return cls(theta0Mu=theta0Mu, theta0P=theta0P)


@dataclass(frozen=True, eq=False)
class GlobalParams:
    """
    全局参数

    Attributes:
        pi: 长度K的混合权重
        sigma0, sigma1: 控制组/处理组噪声标准差(二分类结局时为None)
        gpLatent: 白化潜在曲面
        gpHyper: 预拟合的GP超参数
        offset: 控制组结局的常数偏移，μ⁰ = offset + Lη
    """
    pi: np.ndarray
    sigma0: Optional[float]
    sigma1: Optional[float]
    gpLatent: GpLatent
    gpHyper: GpHyper
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=float))
        if not np.all(self.pi > 0) or abs(self.pi.sum() - 1.0) > 1e-10:
            raise SchemaError("pi must be a strictly positive simplex vector")
        for sigma in (self.sigma0, self.sigma1):
            if sigma is not None and not sigma > 0:
                raise SchemaError("sigma0 and sigma1 must be positive")

    @property
    def mu0(self) -> np.ndarray:
        return self.offset + self.gpLatent.values


class PriorArrays(NamedTuple):
    """PriorConfig展开为数组后的形式，供jax计算使用"""
    betaMean: np.ndarray
    betaSd: float
    sigmaSd: float
    gammaA: float
    gammaB: float
    piConc: float
    thetaMuSd: float
    thetaSdSd: float
    thetaPA: float
    thetaPB: float


def _key(name: str) -> dict:
    return {"key": name}


@dataclass(frozen=True)
class PriorConfig:
    """
    先验超参数

    Attributes:
        betaPriorMean: β_k的先验均值，标量或长度为K的序列
        betaPriorSd: β_k的先验标准差
        sigmaHalfnormalSd: σ0、σ1的半正态先验标准差
        gammaBetaA, gammaBetaB: γ的Beta先验参数
        piDirichletConc: π的Dirichlet浓度
        thetaMuSd: 簇均值的正态先验标准差(以总体均值为中心)
        thetaSdHalfnormalSd: 簇标准差的半正态先验标准差
        thetaPBetaA, thetaPBetaB: 簇内伯努利概率的Beta先验参数
    """
    betaPriorMean: Union[float, tuple] = field(default=None, metadata=_key("beta_prior_mean"))
    betaPriorSd: float = field(default=None, metadata=_key("beta_prior_sd"))
    sigmaHalfnormalSd: float = field(default=None, metadata=_key("sigma_halfnormal_sd"))
    gammaBetaA: float = field(default=None, metadata=_key("gamma_beta_a"))
    gammaBetaB: float = field(default=None, metadata=_key("gamma_beta_b"))
    piDirichletConc: float = field(default=None, metadata=_key("pi_dirichlet_conc"))
    thetaMuSd: float = field(default=None, metadata=_key("theta_mu_sd"))
    thetaSdHalfnormalSd: float = field(default=None, metadata=_key("theta_sd_halfnormal_sd"))
    thetaPBetaA: float = field(default=None, metadata=_key("theta_p_beta_a"))
    thetaPBetaB: float = field(default=None, metadata=_key("theta_p_beta_b"))

    def __post_init__(self):
        defaults = getConfig("Prior")
        for item in fields(self):
            if getattr(self, item.name) is None:
                object.__setattr__(self, item.name, defaults[item.metadata["key"]])
        mean = self.betaPriorMean
        object.__setattr__(self, "betaPriorMean",
                           tuple(float(v) for v in mean) if isinstance(mean, (list, tuple)) else float(mean))
        for item in fields(self):
            if item.name != "betaPriorMean":
                value = float(getattr(self, item.name))
                if not value > 0:
                    raise ConfigError(f"prior setting {item.metadata['key']} must be positive")
                object.__setattr__(self, item.name, value)

    def betaMean(self, K: int) -> np.ndarray:
        if isinstance(self.betaPriorMean, tuple):
            if len(self.betaPriorMean) != K:
                raise ConfigError(f"beta_prior_mean has {len(self.betaPriorMean)} entries but K={K}")
            return np.array(self.betaPriorMean)
        return np.full(K, self.betaPriorMean)

    def toArrays(self, K: int) -> PriorArrays:
        return PriorArrays(self.betaMean(K), self.betaPriorSd, self.sigmaHalfnormalSd, self.gammaBetaA,
                           self.gammaBetaB, self.piDirichletConc, self.thetaMuSd, self.thetaSdHalfnormalSd,
                           self.thetaPBetaA, self.thetaPBetaB)

    @classmethod
    def fromDict(cls, info: dict) -> "PriorConfig":
        return cls(**_translate(cls, info or {}, "priors"))

    def toDict(self) -> dict:
        info = {item.metadata["key"]: getattr(self, item.name) for item in fields(self)}
        if isinstance(self.betaPriorMean, tuple):
            info["beta_prior_mean"] = list(self.betaPriorMean)
        return info


def _translate(cls, info: dict, where: str) -> dict:
    """把snake_case的键翻译成字段名，并拒绝未知键"""
    if not isinstance(info, dict):
        raise ConfigError(f"{where} must be a mapping")
    byKey = {item.metadata["key"]: item.name for item in fields(cls)}
    unknown = sorted(set(info) - set(byKey))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    return {byKey[key]: value for key, value in info.items()}


_MODEL_DEFAULT = {"K": ("Model", "K"), "outcome_type": ("Model", "outcome_type"),
                  "favorable_label": ("Model", "favorable_label"), "kernel": ("Model", "kernel"),
                  "feature_selection": ("Model", "feature_selection"), "seed": ("Model", "seed"),
                  "gp_budget": ("GP", "budget")}


@dataclass(frozen=True)
class ModelConfig:
    """
    模型配置

    Attributes:
        K: 簇数
        outcomeType: continuous或binary
        favorableLabel: 二分类结局的有利取值
        kernel: se_ard或linear
        featureSelection: 是否启用软特征选择
        priors: PriorConfig
        restarts, maxIters, mcSamples, baseStep, stepDecay: 推断预算与优化器设置
        initLogSd, initJitterScale: 初始化设置
        elboWindow, tolRel, tolWindow: 收敛判断
        gmmMaxIters, gmmTol: GMM初始化设置
        gpBudget: GP预拟合迭代数
        seed: 随机种子
    """
    K: int = field(default=None, metadata=_key("K"))
    outcomeType: str = field(default=None, metadata=_key("outcome_type"))
    favorableLabel: int = field(default=None, metadata=_key("favorable_label"))
    kernel: str = field(default=None, metadata=_key("kernel"))
    featureSelection: bool = field(default=None, metadata=_key("feature_selection"))
    priors: PriorConfig = field(default=None, metadata=_key("priors"))
    restarts: int = field(default=None, metadata=_key("restarts"))
    maxIters: int = field(default=None, metadata=_key("max_iters"))
    mcSamples: int = field(default=None, metadata=_key("mc_samples"))
    baseStep: float = field(default=None, metadata=_key("base_step"))
    stepDecay: float = field(default=None, metadata=_key("step_decay"))
    initLogSd: float = field(default=None, metadata=_key("init_log_sd"))
    initJitterScale: float = field(default=None, metadata=_key("init_jitter_scale"))
    elboWindow: int = field(default=None, metadata=_key("elbo_window"))
    tolRel: float = field(default=None, metadata=_key("tol_rel"))
    tolWindow: int = field(default=None, metadata=_key("tol_window"))
    gmmMaxIters: int = field(default=None, metadata=_key("gmm_max_iters"))
    gmmTol: float = field(default=None, metadata=_key("gmm_tol"))
    gpBudget: int = field(default=None, metadata=_key("gp_budget"))
    seed: int = field(default=None, metadata=_key("seed"))

    def __post_init__(self):
        for item in fields(self):
            if getattr(self, item.name) is not None:
                continue
            key = item.metadata["key"]
            if key == "priors":
                value = PriorConfig()
            elif key in _MODEL_DEFAULT:
                value = getConfig(*_MODEL_DEFAULT[key])
            else:
                value = getConfig("Inference", key)
            object.__setattr__(self, item.name, value)
        if isinstance(self.priors, dict):
            object.__setattr__(self, "priors", PriorConfig.fromDict(self.priors))
        for name in ("K", "restarts", "maxIters", "mcSamples", "elboWindow", "tolWindow", "gmmMaxIters",
                     "gpBudget", "favorableLabel", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise ConfigError(f"{name} must be an integer")
            object.__setattr__(self, name, int(value))
        for name in ("K", "restarts", "maxIters", "mcSamples", "elboWindow", "tolWindow", "gmmMaxIters",
                     "gpBudget"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("baseStep", "stepDecay", "initJitterScale", "tolRel", "gmmTol"):
            value = float(getattr(self, name))
            if not value > 0:
                raise ConfigError(f"{name} must be positive")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "initLogSd", float(self.initLogSd))
        if self.kernel not in (SE_ARD, LINEAR):
            raise ConfigError(f"kernel must be '{SE_ARD}' or '{LINEAR}'")
        if self.outcomeType not in (CONTINUOUS, BINARY):
            raise ConfigError(f"outcome_type must be '{CONTINUOUS}' or '{BINARY}'")
        if self.favorableLabel not in (0, 1):
            raise ConfigError("favorable_label must be 0 or 1")
        if not isinstance(self.featureSelection, bool):
            raise ConfigError("feature_selection must be true or false")
        self.priors.betaMean(self.K)

    @property
    def outcome(self) -> OutcomeType:
        return OutcomeType(self.outcomeType, self.favorableLabel)

    @classmethod
    def fromDict(cls, info: dict) -> "ModelConfig":
        """
        从字典构造配置

        Args:
            info: snake_case键的字典，priors为嵌套字典

        Returns:
            ModelConfig

        Raises:
            ConfigError: 存在未知键或取值非法
        """
        values = _translate(cls, info or {}, "config")
        if "priors" in values:
            values["priors"] = PriorConfig.fromDict(values["priors"])
        return cls(**values)

    def toDict(self) -> dict:
        info = {}
        for item in fields(self):
            value = getattr(self, item.name)
            info[item.metadata["key"]] = value.toDict() if isinstance(value, PriorConfig) else value
        return info

    def withOverrides(self, **overrides) -> "ModelConfig":
        """返回覆盖了部分字段(snake_case键)的新配置"""
        info = self.toDict()
        info.update(overrides)
        return ModelConfig.fromDict(info)
