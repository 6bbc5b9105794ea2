import numpy as np

from Service.Data import CovariateSchema
from Service.GP import GpHyper, restoreLatent
from Service.Inference.Transform import ParamLayout
from Service.Inference.VI import FitResult, VariationalPosterior, pointEstimate
from Service.Model.Params import ModelConfig, PopulationReference
from Service.errorResponse import ArtifactError, BasiccsError

__doc__ = """
模型文件提取服务模块

该模块负责FitResult与模型文件(JSON)之间的转换。
模型文件是自包含的：assign和evaluate只需要它和一个数据文件。

主要内容：
- 模型配置、schema、标准化统计量、总体参考值
- GP超参数(含jitter)、训练输入和常数偏移
- 变分分布的均值和log标准差
- 训练集上的responsibilities、ELBO轨迹、每次重启的摘要

受约束的点估计和潜在曲面在读入时由变分均值重新计算，
读入后的评估结果与内存中的模型一致。
"""

ARTIFACT_VERSION = 1


def extractPosterior(posterior: VariationalPosterior) -> dict:
    """
    提取变分分布

    Args:
        posterior: 变分分布

    Returns:
        dict: mean和log_sd两个列表
    """
    return {"mean": posterior.mean.tolist(), "log_sd": posterior.logSd.tolist()}


def extractReference(reference: PopulationReference) -> dict:
    return {"theta0_mu": reference.theta0Mu.tolist(), "theta0_p": reference.theta0P.tolist()}


def extractPointEstimate(model: FitResult) -> dict:
    """
    提取受约束的点估计，供人阅读；读入时不使用

    Returns:
        dict: pi、beta、theta_mu、theta_sd、theta_p、gamma、sigma0、sigma1、offset
    """
    params, globalParams = model.pointEstimate
    return {"pi": globalParams.pi.tolist(), "beta": params.beta.tolist(), "theta_mu": params.thetaMu.tolist(),
            "theta_sd": params.thetaSd.tolist(), "theta_p": params.thetaP.tolist(), "gamma": params.gamma.tolist(),
            "sigma0": globalParams.sigma0, "sigma1": globalParams.sigma1, "offset": globalParams.offset}


def extractArtifact(model: FitResult) -> dict:
    """
    从拟合结果中提取模型文件内容

    Args:
        model: 拟合结果

    Returns:
        dict: 可以直接写成JSON的字典，字段包括：
            - version: 模型文件版本
            - config: ModelConfig.toDict()
            - schema: 训练数据的schema
            - column_names / column_kinds: 编码后的列
            - standardization: {列名: [均值, 标准差]}
            - reference: 总体参考值
            - gp: 超参数、训练输入、常数偏移
            - posterior: 变分分布
            - point_estimate: 受约束的点估计
            - diagnostics: ELBO轨迹、最终ELBO、选中的种子、每次重启的摘要、训练集responsibilities
    """
    globalParams = model.globalParams
    return {"version": ARTIFACT_VERSION,
            "config": model.config.toDict(),
            "schema": model.schema.toDict(),
            "column_names": list(model.columnNames),
            "column_kinds": list(model.columnKinds),
            "standardization": {name: list(stats) for name, stats in model.standardizationStats.items()},
            "reference": extractReference(model.reference),
            "gp": {"hyper": globalParams.gpHyper.toDict(),
                   "train_inputs": globalParams.gpLatent.trainInputs.tolist(),
                   "offset": globalParams.offset},
            "posterior": extractPosterior(model.posterior),
            "point_estimate": extractPointEstimate(model),
            "diagnostics": {"elbo_trace": np.asarray(model.elboTrace).tolist(),
                            "final_elbo": model.finalElbo,
                            "seed": model.seed,
                            "restarts": [dict(run) for run in model.restartsSummary],
                            "responsibilities": model.responsibilities.tolist()}}


def restoreArtifact(info: dict) -> FitResult:
    """
    从模型文件内容重建拟合结果

    Args:
        info: extractArtifact得到的字典(通常由JSON读入)

    Returns:
        FitResult

    Raises:
        ArtifactError: 版本不符、缺少字段或内容前后矛盾
    """
    if not isinstance(info, dict) or info.get("version") != ARTIFACT_VERSION:
        found = info.get("version") if isinstance(info, dict) else None
        raise ArtifactError(f"unsupported model artifact version {found}, expected {ARTIFACT_VERSION}")
    try:
        config = ModelConfig.fromDict(info["config"])
        schema = CovariateSchema.fromDict(info["schema"])
        columnNames, columnKinds = tuple(info["column_names"]), tuple(info["column_kinds"])
        stats = {name: (float(mean), float(sd)) for name, (mean, sd) in info["standardization"].items()}
        reference = PopulationReference(theta0Mu=np.asarray(info["reference"]["theta0_mu"], dtype=float),
                                        theta0P=np.asarray(info["reference"]["theta0_p"], dtype=float))
        gp = info["gp"]
        hyper = GpHyper.fromDict(gp["hyper"])
        trainInputs = np.asarray(gp["train_inputs"], dtype=float)
        posterior = VariationalPosterior(np.asarray(info["posterior"]["mean"], dtype=float),
                                         np.asarray(info["posterior"]["log_sd"], dtype=float))
        diagnostics = info["diagnostics"]
    except BasiccsError as error:
        raise ArtifactError(f"model artifact is invalid: {error}")
    except (KeyError, TypeError, ValueError) as error:
        raise ArtifactError(f"model artifact is missing or has a malformed field: {error}")

    layout = ParamLayout(config.K, columnKinds, len(trainInputs), config.outcome.isBinary, config.featureSelection)
    if layout.size != len(posterior.mean):
        raise ArtifactError("model artifact posterior length does not match its config and training inputs")
    latent = restoreLatent(trainInputs, hyper, np.zeros(len(trainInputs)))
    params, globalParams = pointEstimate(layout, posterior.mean, latent, hyper, float(gp["offset"]))
    trace = np.asarray(diagnostics["elbo_trace"], dtype=float)
    return FitResult(posterior=posterior, params=params, globalParams=globalParams, reference=reference,
                     config=config, elboTrace=trace, finalElbo=float(diagnostics["final_elbo"]),
                     responsibilities=np.asarray(diagnostics["responsibilities"], dtype=float),
                     seed=int(diagnostics["seed"]), restartsSummary=tuple(diagnostics["restarts"]),
                     schema=schema, columnNames=columnNames, columnKinds=columnKinds, standardizationStats=stats)
