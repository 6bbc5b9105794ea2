from dataclasses import dataclass, replace
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import cho_solve as jaxChoSolve
from scipy import linalg, optimize

from Service.errorResponse import DataError, NumericalError, SchemaError
from Service.utils import getLogger

__doc__ = """
高斯过程先验模块

控制组结局曲面μ⁰使用零均值GP先验，该模块提供：
1. 核函数
   - 带噪声的平方指数ARD核(每个维度独立的长度尺度)
   - 线性核 alpha²·(xᵀx′+1)，用于线性对照的合理性检查
2. 超参数预拟合
   - 在控制组上对(alpha, rho, noise_sd)的对数做边际似然极大化
   - 超参数只拟合一次，变分推断期间保持不变
3. 白化的潜在曲面
   - μ⁰ = Lη，η ~ N(0, I)，L为 K(X)+jitter·I 的Cholesky因子
   - jitter从1e-8·alpha²开始，失败时乘10，最多到1e-4·alpha²
4. 样本外条件均值预测
"""

logger = getLogger("gp")

SE_ARD = "se_ard"
LINEAR = "linear"
JITTER_START = 1e-8
JITTER_MAX = 1e-4

LOG_ALPHA_BOUNDS = (np.log(1e-4), np.log(1e3))
LOG_RHO_BOUNDS = (np.log(1e-2), np.log(1e3))
LOG_NOISE_BOUNDS = (np.log(1e-4), np.log(1e2))


@dataclass(frozen=True, eq=False)
class GpHyper:
    """
    GP超参数

    Attributes:
        alpha: 边际标准差
        rho: 每个维度的长度尺度(线性核时不使用)
        noiseSd: 预拟合时的观测噪声标准差
        jitter: 加在核矩阵对角线上的数值稳定项
        kernel: se_ard或linear
    """
    alpha: float
    rho: np.ndarray
    noiseSd: float
    jitter: float = 0.0
    kernel: str = SE_ARD

    def __post_init__(self):
        object.__setattr__(self, "rho", np.atleast_1d(np.asarray(self.rho, dtype=float)))
        if self.kernel not in (SE_ARD, LINEAR):
            raise SchemaError(f"unknown kernel '{self.kernel}'")
        if not (self.alpha > 0 and self.noiseSd > 0 and np.all(self.rho > 0)):
            raise SchemaError("GP hyperparameters must be strictly positive")
        if self.jitter == 0.0:
            object.__setattr__(self, "jitter", JITTER_START * self.alpha ** 2)
        if not 0 < self.jitter <= JITTER_MAX * self.alpha ** 2 * (1 + 1e-9):
            raise SchemaError("jitter must be positive and at most 1e-4·alpha²")

    def logParams(self) -> np.ndarray:
        """优化用的对数参数：[log alpha, log rho..., log noise_sd]，线性核不含rho"""
        if self.kernel == LINEAR:
            return np.array([np.log(self.alpha), np.log(self.noiseSd)])
        return np.concatenate([[np.log(self.alpha)], np.log(self.rho), [np.log(self.noiseSd)]])

    def withLogParams(self, logParams: np.ndarray) -> "GpHyper":
        alpha = float(np.exp(logParams[0]))
        rho = self.rho if self.kernel == LINEAR else np.exp(logParams[1:-1])
        return GpHyper(alpha=alpha, rho=rho, noiseSd=float(np.exp(logParams[-1])), kernel=self.kernel)

    def toDict(self) -> dict:
        return {"alpha": self.alpha, "rho": self.rho.tolist(), "noise_sd": self.noiseSd,
                "jitter": self.jitter, "kernel": self.kernel}

    @classmethod
    def fromDict(cls, info: dict) -> "GpHyper":
        return cls(alpha=float(info["alpha"]), rho=np.asarray(info["rho"], dtype=float),
                   noiseSd=float(info["noise_sd"]), jitter=float(info["jitter"]), kernel=info["kernel"])


@dataclass(frozen=True, eq=False)
class GpLatent:
    """
    白化参数化的潜在控制组曲面

    Attributes:
        trainInputs: M×D 训练输入
        cholFactor: 下三角L，LLᵀ = K(X)+jitter·I
        whitened: 长度M的η
        values: μ⁰ = Lη(不含常数偏移)
    """
    trainInputs: np.ndarray
    cholFactor: np.ndarray
    whitened: np.ndarray
    values: np.ndarray

    def withWhitened(self, whitened: np.ndarray) -> "GpLatent":
        whitened = np.asarray(whitened, dtype=float)
        return replace(self, whitened=whitened, values=self.cholFactor @ whitened)


def _checkInputs(X: np.ndarray, hyper: GpHyper):
    if X.ndim != 2:
        raise DataError("GP inputs must be a 2-D matrix")
    if hyper.kernel == SE_ARD and X.shape[1] != len(hyper.rho):
        raise DataError(f"dimension mismatch: inputs have {X.shape[1]} columns, rho has {len(hyper.rho)}")


def _kernelJax(X, X2, logAlpha, logRho, kernel: str):
    alpha2 = jnp.exp(2.0 * logAlpha)
    if kernel == LINEAR:
        return alpha2 * (X @ X2.T + 1.0)
    diff = (X[:, None, :] - X2[None, :, :]) / jnp.exp(logRho)
    return alpha2 * jnp.exp(-0.5 * jnp.sum(diff ** 2, axis=-1))


def kernelMatrix(X: np.ndarray, X2: Optional[np.ndarray], hyper: GpHyper, addDiagNoise: bool = False) -> np.ndarray:
    """
    计算核矩阵

    Args:
        X: M×D 输入
        X2: P×D 输入；为None或与X是同一个对象时表示K(X, X)
        hyper: 超参数
        addDiagNoise: K(X, X)时是否在对角线加上 noise_sd²+jitter

    Returns:
        np.ndarray: M×P 核矩阵，(i,j)元素为 alpha²·exp(-½Σ_d((x_id-x2_jd)/rho_d)²)

    Raises:
        DataError: 列数与rho长度不一致
    """
    X = np.asarray(X, dtype=float)
    same = X2 is None or X2 is X
    X2 = X if same else np.asarray(X2, dtype=float)
    _checkInputs(X, hyper)
    _checkInputs(X2, hyper)
    K = np.asarray(_kernelJax(jnp.asarray(X), jnp.asarray(X2), np.log(hyper.alpha), np.log(hyper.rho),
                              hyper.kernel))
    if same:
        K = 0.5 * (K + K.T)
        if addDiagNoise:
            K = K + (hyper.noiseSd ** 2 + hyper.jitter) * np.eye(len(X))
    return K


def _negLogMarginal(logParams, X, y, kernel: str):
    logAlpha = logParams[0]
    logRho = logParams[1:-1] if kernel == SE_ARD else jnp.zeros(X.shape[1])
    noise2 = jnp.exp(2.0 * logParams[-1]) + JITTER_START * jnp.exp(2.0 * logAlpha)
    K = _kernelJax(X, X, logAlpha, logRho, kernel) + noise2 * jnp.eye(X.shape[0])
    L = jnp.linalg.cholesky(K)
    weights = jaxChoSolve((L, True), y)
    return 0.5 * y @ weights + jnp.sum(jnp.log(jnp.diag(L))) + 0.5 * X.shape[0] * jnp.log(2.0 * jnp.pi)


_negLogMarginalGrad = jax.jit(jax.value_and_grad(_negLogMarginal), static_argnums=(3,))


def marginalLogLik(X: np.ndarray, y: np.ndarray, hyper: GpHyper) -> tuple:
    """
    高斯边际对数似然及其对对数超参数的梯度

    Args:
        X: 输入
        y: 已中心化的输出
        hyper: 超参数

    Returns:
        tuple: (−½yᵀK⁻¹y − ½log|K| − (M/2)log2π, 对logParams()的梯度)
    """
    _checkInputs(np.asarray(X), hyper)
    value, grad = _negLogMarginalGrad(jnp.asarray(hyper.logParams()), jnp.asarray(X, dtype=float),
                                      jnp.asarray(y, dtype=float), hyper.kernel)
    return -float(value), -np.asarray(grad)


def gpMleFit(X: np.ndarray, y: np.ndarray, init: GpHyper, budget: int = 200, history: Optional[list] = None) -> GpHyper:
    """
    在控制组上用极大边际似然拟合GP超参数

    Args:
        X: 控制组协变量
        y: 控制组结局(函数内部会减去均值)
        init: 初始超参数
        budget: 最大迭代次数
        history: 如果给出，每次迭代后追加当前边际对数似然

    Returns:
        GpHyper: 边际似然不低于init的超参数

    Raises:
        DataError: 行数少于D+2
        NumericalError: 初始点的核矩阵无法分解
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] < X.shape[1] + 2:
        raise DataError(f"GP prefit needs at least D+2={X.shape[1] + 2} control rows, got {X.shape[0]}")
    y = np.asarray(y, dtype=float) - np.mean(y)
    Xj, yj = jnp.asarray(X), jnp.asarray(y)

    def objective(logParams):
        value, grad = _negLogMarginalGrad(jnp.asarray(logParams), Xj, yj, init.kernel)
        value, grad = float(value), np.asarray(grad, dtype=float)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return 1e300, np.zeros_like(logParams)
        return value, grad

    def callback(logParams):
        if history is not None:
            history.append(-objective(logParams)[0])

    start = init.logParams()
    startValue = objective(start)[0]
    if startValue >= 1e300:
        raise NumericalError("ill-conditioned kernel at the initial GP hyperparameters")
    if history is not None:
        history.append(-startValue)
    bounds = [LOG_ALPHA_BOUNDS] + ([LOG_RHO_BOUNDS] * (len(start) - 2)) + [LOG_NOISE_BOUNDS]
    result = optimize.minimize(objective, np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds]),
                               jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
                               options={"maxiter": budget})
    if result.fun > startValue:
        logger.info("GP prefit did not improve on the initial hyperparameters")
        return GpHyper(alpha=init.alpha, rho=init.rho, noiseSd=init.noiseSd, kernel=init.kernel)
    fitted = init.withLogParams(result.x)
    logger.info("GP prefit (%s): alpha=%.4g, noise_sd=%.4g, log marginal likelihood=%.6g",
                fitted.kernel, fitted.alpha, fitted.noiseSd, -result.fun)
    return fitted


def choleskyWithJitter(K: np.ndarray, alpha: float) -> tuple:
    """
    带jitter递增的Cholesky分解

    Args:
        K: 对称半正定矩阵(不含jitter)
        alpha: 边际标准差，jitter以alpha²为单位

    Returns:
        tuple: (下三角因子L, 实际使用的jitter)

    Raises:
        NumericalError: jitter增大到1e-4·alpha²仍然失败
    """
    jitter = JITTER_START * alpha ** 2
    while jitter <= JITTER_MAX * alpha ** 2 * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(K)))
            if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
                return L, jitter
        except np.linalg.LinAlgError:
            pass
        logger.debug("Cholesky failed with jitter %.3g, escalating", jitter)
        jitter *= 10.0
    raise NumericalError("ill-conditioned kernel: Cholesky failed even with jitter 1e-4·alpha²")


def buildLatent(X: np.ndarray, hyper: GpHyper, whitened: Optional[np.ndarray] = None) -> tuple:
    """
    构造白化的潜在曲面

    Args:
        X: 全部训练行的协变量
        hyper: 预拟合的超参数
        whitened: η；为None时取零向量

    Returns:
        tuple: (GpLatent, 记录了实际jitter的GpHyper)
    """
    X = np.asarray(X, dtype=float)
    L, jitter = choleskyWithJitter(kernelMatrix(X, None, hyper), hyper.alpha)
    hyper = GpHyper(alpha=hyper.alpha, rho=hyper.rho, noiseSd=hyper.noiseSd, jitter=jitter, kernel=hyper.kernel)
    whitened = np.zeros(len(X)) if whitened is None else np.asarray(whitened, dtype=float)
    return GpLatent(trainInputs=X, cholFactor=L, whitened=whitened, values=L @ whitened), hyper


def gpConditionalMean(latent: GpLatent, hyper: GpHyper, Xnew: np.ndarray) -> np.ndarray:
    """
    潜在曲面在新输入上的条件均值

    计算 K(Xnew, X)·(K(X)+jitter·I)⁻¹·values。由于 values = Lη，该式等于 (L⁻¹K(X, Xnew))ᵀη，
    只需要一次三角求解。

    Args:
        latent: 潜在曲面
        hyper: 超参数
        Xnew: P×D 新输入

    Returns:
        np.ndarray: 长度P的预测(不含常数偏移)
    """
    Xnew = np.asarray(Xnew, dtype=float)
    if Xnew.ndim != 2 or Xnew.shape[1] != latent.trainInputs.shape[1]:
        raise DataError("dimension mismatch between new inputs and GP training inputs")
    cross = kernelMatrix(latent.trainInputs, Xnew, hyper)
    projected = linalg.solve_triangular(latent.cholFactor, cross, lower=True)
    return projected.T @ latent.whitened


def whitenedRidgeFit(cholFactor: np.ndarray, rows: np.ndarray, target: np.ndarray, noiseSd: float) -> np.ndarray:
    """
    白化坐标下的岭回归，用于初始化η

    求解 min ||target − (Lη)[rows]||²/noiseSd² + ||η||²。

    Args:
        cholFactor: L
        rows: 有观测的行(通常为控制组)
        target: 这些行的中心化结局
        noiseSd: 噪声标准差

    Returns:
        np.ndarray: η
    """
    Lr = cholFactor[rows]
    precision = Lr.T @ Lr / noiseSd ** 2 + np.eye(cholFactor.shape[1])
    factor = linalg.cho_factor(precision, lower=True)
    return linalg.cho_solve(factor, Lr.T @ target / noiseSd ** 2)


def restoreLatent(X: np.ndarray, hyper: GpHyper, whitened: np.ndarray) -> GpLatent:
    """
    使用超参数中记录的jitter重建潜在曲面(不再递增jitter)

    Raises:
        NumericalError: 记录的jitter下分解失败
    """
    X = np.asarray(X, dtype=float)
    try:
        L = np.linalg.cholesky(kernelMatrix(X, None, hyper) + hyper.jitter * np.eye(len(X)))
    except np.linalg.LinAlgError:
        raise NumericalError("ill-conditioned kernel: stored jitter no longer factorizes the training kernel")
    whitened = np.asarray(whitened, dtype=float)
    return GpLatent(trainInputs=X, cholFactor=L, whitened=whitened, values=L @ whitened)
