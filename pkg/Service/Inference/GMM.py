from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm
from sklearn.cluster import kmeans_plusplus

from Service.Data import Dataset
from Service.errorResponse import DataError, NumericalError
from Service.utils import getLogger

__doc__ = """
高斯混合模型(GMM)模块

对角协方差的GMM，用EM拟合，二值列也当作连续列处理。该模块有两个用途：
1. 为变分推断提供初值(簇均值、标准差、混合权重)
2. 作为只使用协变量的无监督对照方法(GmmBaseline)

初值使用k-means++，方差有1e-6的下界。
某个分量负责的点少于2个时，把它的均值重新放到离自身簇中心最远的点上，最多3次。
"""

logger = getLogger("inference.gmm")

REG_COVAR = 1e-6
MAX_RESEEDS = 3


@dataclass(frozen=True, eq=False)
class GmmResult:
    """
    GMM拟合结果

    Attributes:
        means: K×D 均值
        sds: K×D 标准差
        weights: 长度K的混合权重
        responsibilities: N×K 后验概率
        loglikTrace: 每次EM迭代后的对数似然
    """
    means: np.ndarray
    sds: np.ndarray
    weights: np.ndarray
    responsibilities: np.ndarray
    loglikTrace: tuple

    @property
    def K(self) -> int:
        return self.means.shape[0]


def _jointLogDensity(X: np.ndarray, means: np.ndarray, sds: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.log(weights)[None, :] + norm.logpdf(X[:, None, :], means[None], sds[None]).sum(axis=-1)


def _mStep(X: np.ndarray, resp: np.ndarray) -> tuple:
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = resp.T @ X / nk[:, None]
    variances = resp.T @ (X ** 2) / nk[:, None] - means ** 2
    return means, np.sqrt(np.maximum(variances, 0.0) + REG_COVAR), nk / len(X)


def gmmEm(X: np.ndarray, K: int, seed: int, maxIters: int = 200, tol: float = 1e-6,
          initMeans: Optional[np.ndarray] = None) -> GmmResult:
    """
    对角协方差GMM的EM拟合

    Args:
        X: N×D 数据
        K: 分量数
        seed: 随机种子(用于k-means++)
        maxIters: 最大迭代次数
        tol: 对数似然变化小于该值时停止
        initMeans: 可选的初始均值，给出时跳过k-means++

    Returns:
        GmmResult

    Raises:
        DataError: N < K 或 K < 1
        NumericalError: 分量退化且重新播种3次后仍然退化
    """
    X = np.asarray(X, dtype=float)
    N = len(X)
    if K < 1 or N < K:
        raise DataError(f"GMM needs 1 <= K <= N, got K={K}, N={N}")
    if initMeans is None:
        means, _ = kmeans_plusplus(X, n_clusters=K, random_state=seed)
    else:
        means = np.asarray(initMeans, dtype=float).copy()
    sds = np.tile(np.sqrt(X.var(axis=0) + REG_COVAR), (K, 1))
    weights = np.full(K, 1.0 / K)

    trace, reseeds, previous = [], 0, -np.inf
    for iteration in range(maxIters):
        joint = _jointLogDensity(X, means, sds, weights)
        rowNorm = logsumexp(joint, axis=1, keepdims=True)
        resp = np.exp(joint - rowNorm)
        loglik = float(rowNorm.sum())
        trace.append(loglik)

        degenerate = np.where(resp.sum(axis=0) < 2.0)[0] if K > 1 else []
        if len(degenerate):
            if reseeds >= MAX_RESEEDS:
                raise NumericalError(f"GMM component {int(degenerate[0]) + 1} stayed degenerate after "
                                     f"{MAX_RESEEDS} re-seeds")
            hard = np.argmax(resp, axis=1)
            distance = np.sum(((X - means[hard]) / sds[hard]) ** 2, axis=1)
            for k in degenerate:
                farthest = int(np.argmax(distance))
                means[k] = X[farthest]
                sds[k] = np.sqrt(X.var(axis=0) + REG_COVAR)
                distance[farthest] = -np.inf
            weights = np.full(K, 1.0 / K)
            reseeds += 1
            logger.debug("re-seeded degenerate GMM components %s", (degenerate + 1).tolist())
            previous = -np.inf
            continue

        if abs(loglik - previous) < tol:
            break
        previous = loglik
        means, sds, weights = _mStep(X, resp)
    else:
        logger.debug("GMM reached max_iters=%d", maxIters)

    joint = _jointLogDensity(X, means, sds, weights)
    resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
    return GmmResult(means=means, sds=sds, weights=weights, responsibilities=resp, loglikTrace=tuple(trace))


class GmmBaseline:
    """
    只使用协变量的GMM对照方法

    fit之后用predict给新数据分配簇，得到的标签和BASICCS模型的标签走同样的评估流程。
    """

    def __init__(self, K: int, seed: int = 0, maxIters: int = 200, tol: float = 1e-6):
        self.K = K
        self.seed = seed
        self.maxIters = maxIters
        self.tol = tol
        self.result: Optional[GmmResult] = None

    def fit(self, ds: Dataset) -> "GmmBaseline":
        return self.fitInputs(ds.X)

    def fitInputs(self, X: np.ndarray) -> "GmmBaseline":
        """直接在编码后的协变量矩阵上拟合(例如模型文件中保存的训练输入)"""
        self.result = gmmEm(X, self.K, self.seed, self.maxIters, self.tol)
        logger.info("GMM baseline fitted with K=%d, final loglik=%.6g", self.K, self.result.loglikTrace[-1])
        return self

    def predictProba(self, ds: Dataset) -> np.ndarray:
        if self.result is None:
            raise DataError("GMM baseline must be fitted before predicting")
        if ds.D != self.result.means.shape[1]:
            raise DataError("dimension mismatch between data and fitted GMM")
        joint = _jointLogDensity(ds.X, self.result.means, self.result.sds, self.result.weights)
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))

    def predict(self, ds: Dataset) -> np.ndarray:
        """返回从1开始的硬标签"""
        return np.argmax(self.predictProba(ds), axis=1) + 1
