import json
import os

import click
import pandas as pd

from Service.Data import encodeFrame, ingestCsv, readFrame, split
from Service.Evaluation.Metrics import (clusterProfile, contingencyTable, estimatedClusterProfile, evaluate,
                                        evaluateLabels)
from Service.Evaluation.Predict import HARD, SOFT, assign, iteFromAssignment, predictControl
from Service.File.Artifact import extractArtifact, restoreArtifact
from Service.File.File import FileMgr
from Service.Inference.GMM import GmmBaseline
from Service.Inference.VI import fit, kSweep
from Service.Model.Params import ModelConfig
from Service.Simulation import DEFAULT_SIZES, SCENARIOS, ScenarioSpec, potentialOutcomeTable, scenarioConstants, \
    simulate, simulateFrame
from Service.errorResponse import ConfigError, DataError, customizeCliResponse
from Service.utils import getLogger

__doc__ = """
BASICCS命令行主程序

该模块把数据读入、模拟、拟合、分配和评估串成四个命令：
1. simulate
   - 生成模拟场景的数据文件和sidecar schema
   - --print-spec 输出场景真值常数(JSON)
   - --potential-outcomes 导出潜在结局表
2. fit
   - 预拟合GP、多次重启变分推断，写出自包含的模型文件(JSON)
   - stdout输出最终ELBO和每次重启的摘要
3. assign
   - 只依据协变量给新数据分配簇，输出每行的簇概率、硬标签、μ̂⁰和预测的个体效应
4. evaluate
   - 输出评估报告(JSON)，可选GMM对照、簇画像和列联表导出
   - --sweep-k 在训练/验证切分上对多个K重新拟合并输出对比表

结果写到文件或stdout，日志写到stderr。
退出码：0成功，1运行期或数值错误，2用法错误。
"""

logger = getLogger("cli")
fileMgr = FileMgr(workPath=os.getcwd())  # 文件管理服务


def _loadConfig(configPath: str) -> ModelConfig:
    return ModelConfig.fromDict(fileMgr.readConfig(configPath) if configPath else {})


def _loadModel(modelPath: str):
    return restoreArtifact(fileMgr.readJson(modelPath))


def _encodeForModel(model, dataPath: str):
    """用模型的schema和训练集标准化统计量编码数据文件"""
    frame = readFrame(fileMgr.resolve(dataPath), model.schema)
    stats = model.standardizationStats
    return encodeFrame(frame, model.schema, model.outcomeType, stats=stats or None, standardize=bool(stats))


def _parseKList(text: str) -> list:
    try:
        kList = [int(item) for item in text.replace(" ", "").split(",") if item]
    except ValueError:
        raise ConfigError(f"--sweep-k must be a comma separated list of integers, got '{text}'")
    if not kList or min(kList) < 1:
        raise ConfigError("--sweep-k needs at least one K and every K must be positive")
    return kList


@click.group()
def cli():
    """贝叶斯有监督因果聚类(BASICCS)"""


"""1.模拟"""


@cli.command("simulate")
@click.option("--scenario", type=click.Choice(SCENARIOS), required=True, help="模拟场景")
@click.option("--n", "n", type=click.IntRange(min=20), default=None, help="样本量，默认取场景的标准规模")
@click.option("--treat-prop", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.5,
              show_default=True, help="处理组比例")
@click.option("--seed", type=int, default=0, show_default=True, help="随机种子")
@click.option("--noise-sd", type=click.FloatRange(0, min_open=True), default=1.0, show_default=True,
              help="连续结局的噪声标准差")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="数据文件(CSV)路径")
@click.option("--print-spec", is_flag=True, help="把场景真值常数以JSON打印到stdout")
@click.option("--potential-outcomes", type=click.Path(dir_okay=False), default=None, help="潜在结局表(CSV)路径")
@customizeCliResponse
def cmdSimulate(scenario, n, treat_prop, seed, noise_sd, out, print_spec, potential_outcomes):
    """
    生成模拟数据

    Note:
        - 数据文件旁写出同名的schema文件
        - 同样的参数两次运行得到逐字节相同的文件
    """
    if print_spec:
        click.echo(json.dumps(scenarioConstants(scenario), indent=2))
    if out is None and potential_outcomes is None:
        if not print_spec:
            raise click.UsageError("nothing to do: give --out, --potential-outcomes or --print-spec")
        return
    spec = ScenarioSpec(scenario=scenario, n=n or DEFAULT_SIZES[scenario], treatProp=treat_prop, seed=seed,
                        noiseSd=noise_sd)
    if out is not None:
        frame, schema, _ = simulateFrame(spec)
        dataPath, schemaPath = fileMgr.writeDataset(frame, schema, out)
        click.echo(f"wrote {len(frame)} rows to {dataPath} (schema {schemaPath})")
    if potential_outcomes is not None:
        table = potentialOutcomeTable(simulate(spec), noise_sd)
        fileMgr.writeTable(table, potential_outcomes)
        click.echo(f"wrote potential outcomes to {potential_outcomes} ({int(table['flagged'].sum())} flagged rows)")


"""2.拟合"""


@cli.command("fit")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True, help="训练数据(CSV)")
@click.option("--schema", type=click.Path(exists=True, dir_okay=False), default=None,
              help="schema文件，默认使用数据文件旁的sidecar")
@click.option("--config", "configPath", type=click.Path(exists=True, dir_okay=False), default=None,
              help="模型配置(JSON或YAML)，未出现的键取config.yaml中的默认值")
@click.option("--drop-missing", is_flag=True, help="丢弃含缺失值的行")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="模型文件(JSON)路径")
@customizeCliResponse
def cmdFit(data, schema, configPath, drop_missing, out):
    """拟合模型并写出模型文件"""
    config = _loadConfig(configPath)
    covariateSchema = fileMgr.readSchema(data, schema)
    ds = ingestCsv(fileMgr.resolve(data), covariateSchema, config.outcome, dropMissing=drop_missing)
    model = fit(ds, config)
    fileMgr.writeJson(extractArtifact(model), out)
    click.echo(f"final_elbo: {model.finalElbo:.6f} (restart seed {model.seed})")
    for run in model.restartsSummary:
        elbo = "-" if run["final_elbo"] is None else f"{run['final_elbo']:.6f}"
        reason = f" {run['reason']}" if run["reason"] else ""
        click.echo(f"restart {run['restart']}: seed={run['seed']} status={run['status']} elbo={elbo}{reason}")
    click.echo(f"wrote model to {out}")


"""3.分配"""


@cli.command("assign")
@click.option("--model", "modelPath", type=click.Path(exists=True, dir_okay=False), required=True,
              help="模型文件")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True, help="数据文件(CSV)")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="分配结果(CSV)路径")
@click.option("--mode", type=click.Choice([SOFT, HARD]), default=SOFT, show_default=True, help="个体效应的预测方式")
@customizeCliResponse
def cmdAssign(modelPath, data, out, mode):
    """
    只依据协变量给每一行分配簇

    输出列：row_id, prob_1..prob_K, hard_label, tie_broken, mu0_hat, ite_hat
    """
    model = _loadModel(modelPath)
    ds = _encodeForModel(model, data)
    assignment = assign(model, ds)
    table = pd.DataFrame({"row_id": ds.rowIds})
    for k in range(model.K):
        table[f"prob_{k + 1}"] = assignment.probs[:, k]
    table["hard_label"] = assignment.hard
    table["tie_broken"] = assignment.tieBroken
    table["mu0_hat"] = predictControl(model, ds)
    table["ite_hat"] = iteFromAssignment(assignment, model.tauHat, mode)
    fileMgr.writeTable(table, out)
    if assignment.tieBroken.any():
        logger.info("%d rows had tied cluster probabilities", int(assignment.tieBroken.sum()))
    click.echo(f"wrote {len(table)} assignments to {out}")


"""4.评估"""


def _sweep(data, schema, configPath, modelPath, kText, fraction, splitSeed) -> dict:
    """在训练/验证切分上对多个K拟合，返回可写成JSON的结果"""
    if configPath:
        config = _loadConfig(configPath)
        covariateSchema = fileMgr.readSchema(data, schema)
    elif modelPath:
        model = _loadModel(modelPath)
        config, covariateSchema = model.config, model.schema
    else:
        config = _loadConfig(None)
        covariateSchema = fileMgr.readSchema(data, schema)
    ds = ingestCsv(fileMgr.resolve(data), covariateSchema, config.outcome)
    train, validation = split(ds, fraction, splitSeed)
    table = kSweep(train, validation, config, _parseKList(kText))
    click.echo(table.to_string(index=False), err=True)
    records = json.loads(table.to_json(orient="records"))
    info = {"split_fraction": fraction, "split_seed": splitSeed, "n_train": train.N, "n_validation": validation.N,
            "sweep": records}
    if table["pehe"].notna().any():
        info["selected_k_by_pehe"] = int(table.loc[table["pehe"].idxmin(), "K"])
    return info


@cli.command("evaluate")
@click.option("--model", "modelPath", type=click.Path(exists=True, dir_okay=False), default=None,
              help="模型文件(不做K扫描时必需)")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True, help="评估数据(CSV)")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="评估报告(JSON)路径，默认打印到stdout")
@click.option("--mode", type=click.Choice([SOFT, HARD]), default=SOFT, show_default=True,
              help="PEHE和策略风险使用的个体效应")
@click.option("--sweep-k", "sweepK", default=None, help="逗号分隔的K列表，如1,2,3,4,5")
@click.option("--split-fraction", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.5,
              show_default=True, help="K扫描时训练集所占比例")
@click.option("--split-seed", type=int, default=0, show_default=True, help="K扫描时切分的随机种子")
@click.option("--schema", type=click.Path(exists=True, dir_okay=False), default=None,
              help="K扫描时的schema文件，默认使用数据文件旁的sidecar")
@click.option("--config", "configPath", type=click.Path(exists=True, dir_okay=False), default=None,
              help="K扫描时的基础配置，默认取模型文件中的配置")
@click.option("--baseline-gmm", is_flag=True, help="同时评估只使用协变量的GMM对照方法")
@click.option("--profile-out", type=click.Path(dir_okay=False), default=None, help="簇画像表(CSV)路径")
@click.option("--profile-kind", type=click.Choice(["empirical", "estimated"]), default="empirical",
              show_default=True, help="簇画像使用数据的经验均值还是模型估计的参数")
@click.option("--contingency-out", type=click.Path(dir_okay=False), default=None,
              help="各簇2×2列联表(CSV)路径，仅二分类结局")
@customizeCliResponse
def cmdEvaluate(modelPath, data, out, mode, sweepK, split_fraction, split_seed, schema, configPath, baseline_gmm,
                profile_out, profile_kind, contingency_out):
    """输出评估报告；给出--sweep-k时改为输出K扫描表"""
    if sweepK:
        info = _sweep(data, schema, configPath, modelPath, sweepK, split_fraction, split_seed)
    else:
        if modelPath is None:
            raise click.UsageError("--model is required unless --sweep-k is given")
        model = _loadModel(modelPath)
        ds = _encodeForModel(model, data)
        report = evaluate(model, ds, mode=mode)
        info = report.toDict()
        labels = assign(model, ds).hard
        if baseline_gmm:
            config = model.config
            baseline = GmmBaseline(model.K, seed=config.seed, maxIters=config.gmmMaxIters, tol=config.gmmTol)
            baseline.fitInputs(model.globalParams.gpLatent.trainInputs)
            info["baseline_gmm"] = evaluateLabels(ds, baseline.predict(ds), model.K).toDict()
        if profile_out:
            profile = estimatedClusterProfile(model) if profile_kind == "estimated" else \
                clusterProfile(ds, labels, model.K)
            fileMgr.writeTable(profile, profile_out)
        if contingency_out:
            if not ds.outcomeType.isBinary:
                raise DataError("contingency export needs a binary outcome")
            fileMgr.writeTable(contingencyTable(ds, labels, model.K), contingency_out)
    if out:
        fileMgr.writeJson(info, out)
        click.echo(f"wrote evaluation to {out}")
    else:
        click.echo(fileMgr.formatJson(info))


if __name__ == "__main__":
    cli()
