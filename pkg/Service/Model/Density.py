from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy import stats as jstats
from jax.scipy.special import logsumexp, xlog1py, xlogy
from scipy import special

from Service.Data import BINARY, Dataset, OutcomeType
from Service.Model.Params import ClusterParams, GlobalParams, PopulationReference, PriorArrays, PriorConfig
from Service.errorResponse import DataError, NumericalError, SchemaError

__doc__ = """
联合密度模块

模型的全部对数密度都在这里用jax.numpy写成，既可以直接求值，也可以被jax.grad求导：
1. 协变量似然
   - 连续维度为正态，二值维度为伯努利，各维度独立
   - 启用特征选择时，均值/患病率先与总体参考值混合：γθ_k+(1−γ)θ_0(标准差不混合)
2. 结局似然
   - 连续：N(μ⁰+aβ_k, aσ₁²+(1−a)σ₀²)
   - 二分类：Bernoulli(logistic(μ⁰+aβ_k))
3. 先验与对数联合密度
   - 混合求和一律使用logsumexp
   - 半正态密度保留×2的归一化常数

参数以字典(tree)的形式传入jax函数，键为
pi、thetaMu、thetaSd、thetaP、gamma、beta、sigma0、sigma1、eta。
"""

HALF_NORMAL_LOG2 = float(np.log(2.0))


class ModelData(NamedTuple):
    """
    jax计算用到的数据常量

    Attributes:
        X: N×D 协变量
        a: 处理变量
        y: 结局
        contMask, binMask: 连续/二值列的布尔掩码
        theta0Mu, theta0P: 总体参考值
        chol: N×N GP Cholesky因子；None表示不计算结局
        offset: μ⁰的常数偏移
    """
    X: jnp.ndarray
    a: jnp.ndarray
    y: jnp.ndarray
    contMask: jnp.ndarray
    binMask: jnp.ndarray
    theta0Mu: jnp.ndarray
    theta0P: jnp.ndarray
    chol: Optional[jnp.ndarray]
    offset: float


def modelData(ds: Dataset, ref: PopulationReference, chol: Optional[np.ndarray] = None, offset: float = 0.0) -> ModelData:
    """把Dataset和参考值打包为jax数组"""
    if chol is not None and np.shape(chol)[0] != ds.N:
        raise DataError(f"GP latent covers {np.shape(chol)[0]} rows but the dataset has {ds.N}")
    return ModelData(X=jnp.asarray(ds.X, dtype=float), a=jnp.asarray(ds.a, dtype=float),
                     y=jnp.asarray(ds.y, dtype=float), contMask=jnp.asarray(ds.continuousMask),
                     binMask=jnp.asarray(ds.binaryMask), theta0Mu=jnp.asarray(ref.theta0Mu, dtype=float),
                     theta0P=jnp.asarray(ref.theta0P, dtype=float),
                     chol=None if chol is None else jnp.asarray(chol, dtype=float), offset=float(offset))


def paramTree(params: ClusterParams, globals_: Optional[GlobalParams] = None) -> dict:
    """把参数对象转换为jax使用的字典"""
    tree = {"thetaMu": jnp.asarray(params.thetaMu), "thetaSd": jnp.asarray(params.thetaSd),
            "thetaP": jnp.asarray(params.thetaP), "gamma": jnp.asarray(params.gamma),
            "beta": jnp.asarray(params.beta)}
    if globals_ is not None:
        tree["pi"] = jnp.asarray(globals_.pi)
        tree["eta"] = jnp.asarray(globals_.gpLatent.whitened)
        if globals_.sigma0 is not None:
            tree["sigma0"] = jnp.asarray(globals_.sigma0)
            tree["sigma1"] = jnp.asarray(globals_.sigma1)
    return tree


def compositeBlend(thetaK, theta0, gamma):
    """
    特征选择的混合参数

    Args:
        thetaK: 簇参数
        theta0: 总体参考值
        gamma: 混合权重，[0,1]

    Returns:
        γ·θ_k + (1−γ)·θ_0(逐元素)
    """
    if not (np.all(np.asarray(gamma) >= 0) and np.all(np.asarray(gamma) <= 1)):
        raise SchemaError("gamma must lie inside [0, 1]")
    return gamma * thetaK + (1.0 - gamma) * theta0


def _blended(tree: dict, data: ModelData, featureSelection: bool) -> tuple:
    if not featureSelection:
        return tree["thetaMu"], tree["thetaP"]
    gamma = tree["gamma"]
    return gamma * tree["thetaMu"] + (1.0 - gamma) * data.theta0Mu, gamma * tree["thetaP"] + (1.0 - gamma) * data.theta0P


def covariateMatrix(tree: dict, data: ModelData, featureSelection: bool) -> jnp.ndarray:
    """N×K 协变量对数似然矩阵"""
    mu, p = _blended(tree, data, featureSelection)
    x = data.X[:, None, :]
    normal = jstats.norm.logpdf(x, mu[None], tree["thetaSd"][None])
    bernoulli = xlogy(x, p[None]) + xlog1py(1.0 - x, -p[None])
    return jnp.sum(jnp.where(data.contMask, normal, 0.0) + jnp.where(data.binMask, bernoulli, 0.0), axis=-1)


def controlSurface(tree: dict, data: ModelData) -> jnp.ndarray:
    """μ⁰ = offset + Lη"""
    return data.offset + data.chol @ tree["eta"]


def outcomeMatrix(tree: dict, data: ModelData, binary: bool) -> jnp.ndarray:
    """N×K 结局对数似然矩阵"""
    mean = controlSurface(tree, data)[:, None] + data.a[:, None] * tree["beta"][None, :]
    if binary:
        y = data.y[:, None]
        return y * jax.nn.log_sigmoid(mean) + (1.0 - y) * jax.nn.log_sigmoid(-mean)
    sd = jnp.where(data.a == 1, tree["sigma1"], tree["sigma0"])[:, None]
    return jstats.norm.logpdf(data.y[:, None], mean, sd)


def pointwiseMatrix(tree: dict, data: ModelData, binary: bool, featureSelection: bool,
                    includeOutcome: bool) -> jnp.ndarray:
    """N×K 矩阵，(n,k)元素为 log π_k + 协变量似然 + [includeOutcome]·结局似然"""
    matrix = jnp.log(tree["pi"])[None, :] + covariateMatrix(tree, data, featureSelection)
    if includeOutcome:
        matrix = matrix + outcomeMatrix(tree, data, binary)
    return matrix


def _halfNormal(value, sd):
    return jstats.norm.logpdf(value, 0.0, sd) + HALF_NORMAL_LOG2


def logPrior(tree: dict, data: ModelData, priors: PriorArrays, binary: bool, featureSelection: bool):
    """
    全部参数的对数先验

    Note:
        - 簇均值以总体均值为中心，只计入连续维度；θ_p只计入二值维度
        - γ的Beta先验只在启用特征选择时计入
        - 二分类结局没有σ0、σ1
    """
    K = tree["beta"].shape[0]
    total = 0.0
    if K > 1:
        total = total + jstats.dirichlet.logpdf(tree["pi"], jnp.full(K, priors.piConc))
    total = total + jnp.sum(jstats.norm.logpdf(tree["beta"], priors.betaMean, priors.betaSd))
    if not binary:
        total = total + _halfNormal(tree["sigma0"], priors.sigmaSd) + _halfNormal(tree["sigma1"], priors.sigmaSd)
    if featureSelection:
        total = total + jnp.sum(jstats.beta.logpdf(tree["gamma"], priors.gammaA, priors.gammaB))
    muPrior = jstats.norm.logpdf(tree["thetaMu"], data.theta0Mu[None, :], priors.thetaMuSd)
    sdPrior = _halfNormal(tree["thetaSd"], priors.thetaSdSd)
    pPrior = jstats.beta.logpdf(tree["thetaP"], priors.thetaPA, priors.thetaPB)
    total = total + jnp.sum(jnp.where(data.contMask, muPrior + sdPrior, 0.0)) + jnp.sum(
        jnp.where(data.binMask, pPrior, 0.0))
    if "eta" in tree:
        total = total + jnp.sum(jstats.norm.logpdf(tree["eta"]))
    return total


def treeLogJoint(tree: dict, data: ModelData, priors: Optional[PriorArrays], binary: bool,
                 featureSelection: bool):
    """Σ_n logsumexp_k(逐点矩阵) + 对数先验；priors为None时不计先验"""
    total = jnp.sum(logsumexp(pointwiseMatrix(tree, data, binary, featureSelection, True), axis=1))
    if priors is not None:
        total = total + logPrior(tree, data, priors, binary, featureSelection)
    return total


def covariateLoglik(x: np.ndarray, k: int, params: ClusterParams, ref: PopulationReference, columnKinds,
                    featureSelection: bool = True) -> float:
    """
    单行在第k个簇下的协变量对数似然

    Args:
        x: 长度D的一行
        k: 簇下标(从0开始)
        params: 簇参数
        ref: 总体参考值
        columnKinds: 每列的类型
        featureSelection: 是否先做混合

    Returns:
        float: Σ连续维度的正态对数密度 + Σ二值维度的伯努利对数概率

    Raises:
        SchemaError: 二值维度取值不在{0,1}
    """
    x = np.asarray(x, dtype=float)
    binMask = np.array([kind == BINARY for kind in columnKinds])
    if not np.isin(x[binMask], (0.0, 1.0)).all():
        raise SchemaError("binary covariate value outside {0,1}")
    data = ModelData(X=jnp.asarray(x[None, :]), a=jnp.zeros(1), y=jnp.zeros(1), contMask=jnp.asarray(~binMask),
                     binMask=jnp.asarray(binMask), theta0Mu=jnp.asarray(ref.theta0Mu, dtype=float),
                     theta0P=jnp.asarray(ref.theta0P, dtype=float), chol=None, offset=0.0)
    return float(covariateMatrix(paramTree(params), data, featureSelection)[0, k])


def outcomeLoglik(y: float, a: int, mu0: float, tauK: float, globals_: Optional[GlobalParams],
                  outcomeType: OutcomeType, sigma0: Optional[float] = None, sigma1: Optional[float] = None) -> float:
    """
    单个结局的对数似然

    Args:
        y: 结局
        a: 处理变量
        mu0: 控制组曲面在该点的值
        tauK: 簇的处理效应
        globals_: 全局参数，提供σ0、σ1；也可以直接传sigma0/sigma1
        outcomeType: 结局类型

    Returns:
        float
    """
    if not np.all(np.isfinite([y, mu0, tauK])):
        raise NumericalError("non-finite input to the outcome likelihood")
    mean = mu0 + a * tauK
    if outcomeType.isBinary:
        if y not in (0, 1):
            raise SchemaError("binary outcome must be 0 or 1")
        return float(jax.nn.log_sigmoid(mean) if y == 1 else jax.nn.log_sigmoid(-mean))
    if globals_ is not None:
        sigma0, sigma1 = globals_.sigma0, globals_.sigma1
    sd = sigma1 if a == 1 else sigma0
    return float(jstats.norm.logpdf(y, mean, sd))


def _checkFinite(matrix, what: str):
    matrix = np.asarray(matrix)
    if not np.all(np.isfinite(matrix)):
        row = int(np.where((~np.isfinite(matrix)).reshape(len(matrix), -1).any(axis=1))[0][0])
        raise NumericalError(f"non-finite {what} at row {row}")
    return matrix


def pointwiseClusterLogliks(ds: Dataset, params: ClusterParams, globals_: GlobalParams, ref: PopulationReference,
                            outcomeType: OutcomeType, includeOutcome: bool, featureSelection: bool = True) -> np.ndarray:
    """
    逐点、逐簇的对数似然矩阵

    Args:
        ds: 数据集
        params: 簇参数
        globals_: 全局参数
        ref: 总体参考值
        outcomeType: 结局类型
        includeOutcome: 是否计入结局；测试时为False，只依据协变量
        featureSelection: 是否启用特征选择

    Returns:
        np.ndarray: N×K
    """
    chol = globals_.gpLatent.cholFactor if includeOutcome else None
    data = modelData(ds, ref, chol, globals_.offset)
    matrix = pointwiseMatrix(paramTree(params, globals_), data, outcomeType.isBinary, featureSelection,
                             includeOutcome)
    return _checkFinite(matrix, "pointwise log-likelihood")


def logJoint(ds: Dataset, params: ClusterParams, globals_: GlobalParams, ref: PopulationReference,
             priors: Optional[PriorConfig], outcomeType: OutcomeType, featureSelection: bool = True) -> float:
    """
    对数联合密度

    Args:
        priors: 先验配置；为None时只返回似然部分

    Returns:
        float: Σ_n logsumexp_k(逐点矩阵) + 对数先验

    Raises:
        NumericalError: 结果非有限(消息中给出出问题的行)
    """
    pointwiseClusterLogliks(ds, params, globals_, ref, outcomeType, True, featureSelection)
    data = modelData(ds, ref, globals_.gpLatent.cholFactor, globals_.offset)
    arrays = None if priors is None else priors.toArrays(params.K)
    value = float(treeLogJoint(paramTree(params, globals_), data, arrays, outcomeType.isBinary, featureSelection))
    if not np.isfinite(value):
        raise NumericalError("non-finite log joint in the prior terms")
    return value


def responsibilities(pointwise: np.ndarray) -> np.ndarray:
    """按行softmax，得到簇成员的后验概率"""
    pointwise = np.asarray(pointwise, dtype=float)
    return np.exp(pointwise - special.logsumexp(pointwise, axis=1, keepdims=True))
