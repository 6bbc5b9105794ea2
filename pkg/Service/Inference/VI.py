from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import special

from Service.Data import CovariateSchema, Dataset
from Service.Evaluation.Metrics import evaluate
from Service.GP import LINEAR, GpHyper, GpLatent, buildLatent, gpMleFit, whitenedRidgeFit
from Service.Inference.GMM import gmmEm
from Service.Inference.Transform import ParamLayout
from Service.Model.Density import modelData, pointwiseClusterLogliks, responsibilities, treeLogJoint
from Service.Model.Params import ClusterParams, GlobalParams, ModelConfig, PopulationReference
from Service.errorResponse import DataError, NumericalError
from Service.utils import getConfig, getLogger, getThreadCount

__doc__ = """
变分推断模块

在无约束参数向量上做平均场高斯变分推断(ADVI)：
1. ELBO估计与梯度
   - 重参数化采样 z = mean + exp(logSd)⊙ε，ε来自给定种子，梯度由jax自动求导
   - 目标 = E[log p(constrain(z)) + log|J|] + q的熵
   - 采样得到非有限值时重新采样，最多5次
2. 优化器
   - 按坐标的自适应步长：平方梯度的指数滑动平均，整体步长按 1/sqrt(1+t/step_decay) 衰减
   - 平滑ELBO(窗口50)在200次迭代内相对变化小于1e-5时停止
3. 拟合流程
   - 在控制组上预拟合GP超参数
   - 多次重启(默认8次，joblib线程并行)，每次用不同种子的GMM加扰动初始化
   - 取最终平滑ELBO最高的一次
4. K扫描
   - 对一组K分别拟合，在验证集上评估，返回按K排序的表
"""

logger = getLogger("inference")

MAX_RESAMPLES = 5
LOG_SD_BOUNDS = (-30.0, 10.0)
PROB_EPS = 1e-12
PI_FLOOR = 1e-12


def gaussianEntropy(logSd):
    """平均场高斯的熵 Σ logSd + P/2·(1+log2π)"""
    return jnp.sum(logSd) + 0.5 * logSd.shape[0] * (1.0 + jnp.log(2.0 * jnp.pi))


class VariationalProblem:
    """
    一个待优化的ELBO

    Args:
        logDensity: 无约束向量 → 对数密度(已包含雅可比项)的jax函数
        size: 向量长度
    """

    def __init__(self, logDensity: Callable, size: int):
        self.logDensity = logDensity
        self.size = size

        def surrogate(mean, logSd, eps):
            draws = mean[None, :] + jnp.exp(logSd)[None, :] * eps
            return jnp.mean(jax.vmap(logDensity)(draws)) + gaussianEntropy(logSd)

        self.objective = jax.jit(surrogate)
        self.valueAndGrad = jax.jit(jax.value_and_grad(surrogate, argnums=(0, 1)))


def modelProblem(layout: ParamLayout, ds: Dataset, reference: PopulationReference, latent: GpLatent,
                 offset: float, config: ModelConfig) -> VariationalProblem:
    """构造模型的ELBO问题：对数联合密度加变换的雅可比项"""
    data = modelData(ds, reference, latent.cholFactor, offset)
    priors = config.priors.toArrays(config.K)
    binary, featureSelection = config.outcome.isBinary, config.featureSelection

    def logDensity(z):
        tree, logJac = layout.constrain(z)
        return treeLogJoint(tree, data, priors, binary, featureSelection) + logJac

    return VariationalProblem(logDensity, layout.size)


@dataclass(frozen=True, eq=False)
class VariationalPosterior:
    """
    平均场高斯变分分布

    Attributes:
        mean: 无约束向量的均值
        logSd: 同形状的对数标准差
    """
    mean: np.ndarray
    logSd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "logSd", np.asarray(self.logSd, dtype=float))
        if self.mean.shape != self.logSd.shape:
            raise DataError("variational mean and log_sd must have the same shape")
        if not np.all(np.isfinite(self.logSd)):
            raise NumericalError("variational log_sd must be finite")

    @property
    def sd(self) -> np.ndarray:
        return np.exp(self.logSd)


def _evaluate(problem: VariationalProblem, q: VariationalPosterior, numSamples: int, rng: np.random.Generator,
              withGrad: bool):
    if numSamples < 1:
        raise DataError("num_samples must be at least 1")
    mean, logSd = jnp.asarray(q.mean), jnp.asarray(q.logSd)
    for attempt in range(MAX_RESAMPLES + 1):
        eps = jnp.asarray(rng.standard_normal((numSamples, problem.size)))
        if withGrad:
            value, (gradMean, gradLogSd) = problem.valueAndGrad(mean, logSd, eps)
            gradMean, gradLogSd = np.asarray(gradMean), np.asarray(gradLogSd)
            finite = np.isfinite(value) and np.all(np.isfinite(gradMean)) and np.all(np.isfinite(gradLogSd))
        else:
            value = problem.objective(mean, logSd, eps)
            finite = bool(np.isfinite(value))
        if finite:
            return (float(value), gradMean, gradLogSd) if withGrad else float(value)
        logger.debug("non-finite ELBO draw (attempt %d), resampling", attempt + 1)
    raise NumericalError(f"non-finite ELBO after {MAX_RESAMPLES} resamples "
                         f"(last value {float(value)}, mean range [{q.mean.min():.3g}, {q.mean.max():.3g}])")


def elboEstimate(q: VariationalPosterior, problem: VariationalProblem, numSamples: int, seed: int) -> float:
    """
    ELBO的蒙特卡洛估计

    Args:
        q: 变分分布
        problem: ELBO问题
        numSamples: 样本数
        seed: 噪声种子；同一种子得到同一组ε

    Returns:
        float

    Raises:
        NumericalError: 重新采样5次后仍非有限
    """
    return _evaluate(problem, q, numSamples, np.random.default_rng(seed), False)


def elboGradient(q: VariationalPosterior, problem: VariationalProblem, numSamples: int, seed: int) -> tuple:
    """
    重参数化梯度，噪声与同一种子下的elboEstimate相同

    Returns:
        tuple: (对mean的梯度, 对logSd的梯度)
    """
    _, gradMean, gradLogSd = _evaluate(problem, q, numSamples, np.random.default_rng(seed), True)
    return gradMean, gradLogSd


class AdaptiveStepSize:
    """
    按坐标的自适应步长(梯度上升)

    s_t = decay·g² + (1−decay)·s_{t−1}，步长 = baseStep/sqrt(1+t/stepDecay)/(1+sqrt(s_t))
    """

    def __init__(self, baseStep: float = 0.05, stepDecay: float = 100.0, decay: float = 0.1):
        self.baseStep = baseStep
        self.stepDecay = stepDecay
        self.decay = decay
        self.t = 0
        self.s = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.s is None:
            self.s = grad ** 2
        else:
            self.s = self.decay * grad ** 2 + (1 - self.decay) * self.s
        rate = self.baseStep / np.sqrt(1.0 + self.t / self.stepDecay)
        self.t += 1
        return params + rate * grad / (1.0 + np.sqrt(self.s))


def optimizeElbo(problem: VariationalProblem, initMean: np.ndarray, initLogSd: np.ndarray, config: ModelConfig,
                 seed: int, label: str = "") -> tuple:
    """
    用自适应步长最大化ELBO

    Args:
        problem: ELBO问题
        initMean, initLogSd: 初始变分参数
        config: 提供步长、迭代数、收敛窗口等设置
        seed: 噪声种子
        label: 日志中的标识

    Returns:
        tuple: (VariationalPosterior, 平滑ELBO轨迹)

    Raises:
        NumericalError: ELBO持续非有限
    """
    rng = np.random.default_rng(seed)
    P = problem.size
    params = np.concatenate([np.asarray(initMean, dtype=float), np.asarray(initLogSd, dtype=float)])
    optimizer = AdaptiveStepSize(config.baseStep, config.stepDecay)
    raw, smoothed = [], []
    for t in range(config.maxIters):
        q = VariationalPosterior(params[:P], params[P:])
        value, gradMean, gradLogSd = _evaluate(problem, q, config.mcSamples, rng, True)
        params = optimizer.step(params, np.concatenate([gradMean, gradLogSd]))
        params[P:] = np.clip(params[P:], *LOG_SD_BOUNDS)
        raw.append(value)
        window = raw[-config.elboWindow:]
        smoothed.append(sum(window) / len(window))
        if t % 500 == 0:
            logger.debug("%s iteration %d: smoothed ELBO %.6g", label, t, smoothed[-1])
        if t >= config.elboWindow + config.tolWindow:
            reference = smoothed[-1 - config.tolWindow]
            if abs(smoothed[-1] - reference) < config.tolRel * max(abs(reference), 1e-12):
                logger.debug("%s converged after %d iterations", label, t + 1)
                break
    return VariationalPosterior(params[:P], params[P:]), np.array(smoothed)


@dataclass(frozen=True, eq=False)
class FitResult:
    """
    拟合结果，也是assign/evaluate所需的全部信息

    Attributes:
        posterior: 选中的变分分布
        params: 后验均值处的簇参数
        globalParams: 后验均值处的全局参数
        reference: 总体参考值
        config: 模型配置
        elboTrace: 平滑ELBO轨迹
        finalElbo: 轨迹的最后一个值
        responsibilities: 训练集上(含结局)的N×K后验概率
        seed: 选中重启的种子
        restartsSummary: 每次重启的 {restart, seed, final_elbo, status, reason}
        schema, columnNames, columnKinds, standardizationStats: 训练数据的编码信息
    """
    posterior: VariationalPosterior
    params: ClusterParams
    globalParams: GlobalParams
    reference: PopulationReference
    config: ModelConfig
    elboTrace: np.ndarray
    finalElbo: float
    responsibilities: np.ndarray
    seed: int
    restartsSummary: tuple
    schema: CovariateSchema
    columnNames: tuple
    columnKinds: tuple
    standardizationStats: dict

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def outcomeType(self):
        return self.config.outcome

    @property
    def tauHat(self) -> np.ndarray:
        return self.params.beta

    @property
    def pointEstimate(self) -> tuple:
        return self.params, self.globalParams


def pointEstimate(layout: ParamLayout, mean: np.ndarray, latent: GpLatent, hyper: GpHyper,
                  offset: float) -> tuple:
    """
    在变分均值处取受约束参数

    Returns:
        tuple: (ClusterParams, GlobalParams)
    """
    tree = layout.constrainNumpy(mean)
    pi = np.maximum(tree["pi"], PI_FLOOR)
    params = ClusterParams(thetaMu=tree["thetaMu"], thetaSd=tree["thetaSd"],
                           thetaP=np.clip(tree["thetaP"], PROB_EPS, 1 - PROB_EPS),
                           gamma=tree["gamma"], beta=tree["beta"])
    globalParams = GlobalParams(pi=pi / pi.sum(), sigma0=None if layout.binary else float(tree["sigma0"]),
                                sigma1=None if layout.binary else float(tree["sigma1"]),
                                gpLatent=latent.withWhitened(tree["eta"]), gpHyper=hyper, offset=offset)
    return params, globalParams


def prefitGp(ds: Dataset, config: ModelConfig) -> tuple:
    """
    在控制组上预拟合GP超参数

    Args:
        ds: 训练数据
        config: 模型配置

    Returns:
        tuple: (GpHyper, 常数偏移)

    Note:
        - 连续结局的偏移是控制组均值；二分类结局是控制组有利率的logit，
          0/1结局上拟合的alpha和噪声再除以 p(1−p) 换算到logit尺度
    """
    control = ds.a == 0
    yControl = ds.y[control]
    gpInfo = getConfig("GP")
    spread = max(float(np.std(yControl, ddof=1)) if len(yControl) > 1 else 0.0, 0.1)
    init = GpHyper(alpha=gpInfo["init_alpha"] * spread, rho=np.full(ds.D, gpInfo["init_rho"] * np.sqrt(ds.D)),
                   noiseSd=gpInfo["init_noise_sd"] * spread, kernel=config.kernel)
    hyper = gpMleFit(ds.X[control], yControl, init, budget=config.gpBudget)
    if not config.outcome.isBinary:
        return hyper, float(np.mean(yControl))
    rate = float(np.clip(np.mean(yControl), 0.01, 0.99))
    scale = 1.0 / (rate * (1.0 - rate))
    hyper = GpHyper(alpha=hyper.alpha * scale, rho=hyper.rho, noiseSd=hyper.noiseSd * scale, kernel=hyper.kernel)
    return hyper, float(special.logit(rate))


def initialMean(layout: ParamLayout, ds: Dataset, reference: PopulationReference, latent: GpLatent,
                hyper: GpHyper, offset: float, config: ModelConfig, seed: int) -> np.ndarray:
    """
    一次重启的初始变分均值

    Note:
        - θ来自该种子的GMM，均值再加 N(0, init_jitter_scale·sd) 的扰动
        - 启用特征选择时γ从0.5开始，θ按 θ0+2(θ_gmm−θ0) 修正，使混合后的值等于GMM的值
        - β ~ N(0, 0.1)，σ0=σ1=预拟合噪声，η为控制组的白化岭回归
    """
    rng = np.random.default_rng(seed)
    gmm = gmmEm(ds.X, config.K, int(rng.integers(2 ** 31)), config.gmmMaxIters, config.gmmTol)
    means = gmm.means + rng.normal(0.0, 1.0, gmm.means.shape) * config.initJitterScale * gmm.sds
    if config.featureSelection:
        thetaMu = reference.theta0Mu + 2.0 * (means - reference.theta0Mu)
        thetaP = reference.theta0P + 2.0 * (gmm.means - reference.theta0P)
    else:
        thetaMu, thetaP = means, gmm.means
    weights = np.maximum(gmm.weights, 1e-3)
    tree = {"pi": weights / weights.sum(), "thetaMu": thetaMu, "thetaSd": gmm.sds,
            "thetaP": np.clip(thetaP, 0.02, 0.98), "gamma": np.full((config.K, ds.D), 0.5),
            "beta": rng.normal(0.0, 0.1, config.K), "sigma0": hyper.noiseSd, "sigma1": hyper.noiseSd}

    control = np.where(ds.a == 0)[0]
    yControl = ds.y[control]
    if config.outcome.isBinary:
        rate = float(np.clip(np.mean(yControl), 0.01, 0.99))
        target = (yControl - rate) / (rate * (1.0 - rate))
    else:
        target = yControl - offset
    tree["eta"] = whitenedRidgeFit(latent.cholFactor, control, target, hyper.noiseSd)
    return layout.unconstrain(tree)


def _restartSeeds(seed: int, restarts: int) -> list:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(restarts)]


def _runRestart(index: int, seed: int, problem: VariationalProblem, layout: ParamLayout, ds: Dataset,
                reference: PopulationReference, latent: GpLatent, hyper: GpHyper, offset: float,
                config: ModelConfig) -> dict:
    label = f"restart {index + 1}/{config.restarts}"
    logger.info("%s started (seed %d)", label, seed)
    try:
        mean = initialMean(layout, ds, reference, latent, hyper, offset, config, seed)
        q, trace = optimizeElbo(problem, mean, np.full(layout.size, config.initLogSd), config, seed, label)
    except NumericalError as error:
        logger.warning("%s diverged: %s", label, error)
        return {"restart": index + 1, "seed": seed, "final_elbo": None, "status": "diverged",
                "reason": str(error)}
    if len(trace) == 0 or not np.isfinite(trace[-1]):
        logger.warning("%s diverged: non-finite smoothed ELBO", label)
        return {"restart": index + 1, "seed": seed, "final_elbo": None, "status": "diverged",
                "reason": "non-finite smoothed ELBO"}
    logger.info("%s finished after %d iterations, final ELBO %.6f", label, len(trace), trace[-1])
    return {"restart": index + 1, "seed": seed, "final_elbo": float(trace[-1]), "status": "ok", "reason": "",
            "posterior": q, "trace": trace}


def fit(ds: Dataset, config: ModelConfig) -> FitResult:
    """
    拟合BASICCS模型

    Args:
        ds: 训练数据(已编码，通常已标准化)
        config: 模型配置

    Returns:
        FitResult: 最终平滑ELBO最高的重启

    Raises:
        DataError: 控制组行数不足以预拟合GP、N < K
        NumericalError: 全部重启都发散
    """
    if ds.N < config.K:
        raise DataError(f"cannot fit K={config.K} clusters to N={ds.N} rows")
    if ds.outcomeType.isBinary != config.outcome.isBinary:
        raise DataError("dataset outcome type does not match outcome_type in the model config")
    if config.kernel == LINEAR:
        logger.info("using the linear kernel for the control surface")
    reference = PopulationReference.fromDataset(ds)
    hyper, offset = prefitGp(ds, config)
    latent, hyper = buildLatent(ds.X, hyper)
    layout = ParamLayout(config.K, ds.columnKinds, ds.N, config.outcome.isBinary, config.featureSelection)
    problem = modelProblem(layout, ds, reference, latent, offset, config)

    seeds = _restartSeeds(config.seed, config.restarts)
    jobs = min(getThreadCount(), config.restarts)
    runs = Parallel(n_jobs=jobs, prefer="threads")(
        delayed(_runRestart)(index, seed, problem, layout, ds, reference, latent, hyper, offset, config)
        for index, seed in enumerate(seeds))
    finished = [run for run in runs if run["status"] == "ok"]
    if not finished:
        reasons = "; ".join(f"restart {run['restart']}: {run['reason']}" for run in runs)
        raise NumericalError(f"all {config.restarts} restarts diverged ({reasons})")
    best = max(finished, key=lambda run: run["final_elbo"])
    logger.info("selected restart %d with final ELBO %.6f", best["restart"], best["final_elbo"])

    params, globalParams = pointEstimate(layout, best["posterior"].mean, latent, hyper, offset)
    pointwise = pointwiseClusterLogliks(ds, params, globalParams, reference, config.outcome, True,
                                        config.featureSelection)
    summary = tuple({key: run[key] for key in ("restart", "seed", "final_elbo", "status", "reason")}
                    for run in runs)
    return FitResult(posterior=best["posterior"], params=params, globalParams=globalParams, reference=reference,
                     config=config, elboTrace=best["trace"], finalElbo=best["final_elbo"],
                     responsibilities=responsibilities(pointwise), seed=best["seed"], restartsSummary=summary,
                     schema=ds.schema, columnNames=ds.columnNames, columnKinds=ds.columnKinds,
                     standardizationStats=dict(ds.standardizationStats))


def kSweep(dsTrain: Dataset, dsVal: Dataset, config: ModelConfig, kList) -> pd.DataFrame:
    """
    对一组K拟合并在验证集上评估

    Args:
        dsTrain: 训练集
        dsVal: 验证集(使用训练集的标准化统计量)
        config: 基础配置，K会被逐个替换
        kList: 候选K

    Returns:
        pd.DataFrame: 每个K一行，按K排序；列包括final_elbo、pehe、ari、control_rmse或control_accuracy、
        policy_risk、sate_min、sate_max(没有真值列时相应列为空)
    """
    kList = sorted(set(int(k) for k in kList))
    if not kList:
        raise DataError("K list for the sweep must not be empty")
    rows = []
    for K in kList:
        model = fit(dsTrain, config.withOverrides(K=K))
        report = evaluate(model, dsVal).toDict()
        row = {"K": K, "final_elbo": model.finalElbo, "ari": report.get("ari"), "pehe": report.get("pehe"),
               "policy_risk": report.get("policy_risk"), "sate_min": report["sate_range"][0],
               "sate_max": report["sate_range"][1]}
        for key in ("control_rmse", "control_accuracy"):
            if key in report:
                row[key] = report[key]
        logger.info("K sweep: %s", row)
        rows.append(row)
    return pd.DataFrame(rows).sort_values("K").reset_index(drop=True)
