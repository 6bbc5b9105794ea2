from dataclasses import dataclass
from typing import Optional

import numpy as np

from Service.Data import Dataset
from Service.GP import gpConditionalMean
from Service.Model.Density import pointwiseClusterLogliks, responsibilities
from Service.errorResponse import DataError, SchemaError

__doc__ = """
预测模块

测试时只依据协变量分配簇，然后给出：
- 每行的簇概率和硬标签(从1开始，并列时取下标最小的簇并标记)
- 个体处理效应：soft为按概率加权的τ̂，hard为所属簇的τ̂
- 控制组曲面μ̂⁰的GP条件均值(二分类结局时为logit尺度)

model参数是Service.Inference.VI.FitResult。
"""

SOFT = "soft"
HARD = "hard"
TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Assignment:
    """
    簇分配结果

    Attributes:
        probs: N×K 只依据协变量的后验概率
        hard: 长度N的硬标签，取值1..K
        tieBroken: 最大概率并列的行
    """
    probs: np.ndarray
    hard: np.ndarray
    tieBroken: np.ndarray

    @classmethod
    def fromProbs(cls, probs: np.ndarray) -> "Assignment":
        probs = np.asarray(probs, dtype=float)
        top = probs.max(axis=1, keepdims=True)
        ties = np.sum(np.abs(probs - top) <= TIE_TOL, axis=1) > 1
        return cls(probs=probs, hard=np.argmax(probs, axis=1) + 1, tieBroken=ties)


def checkSchema(model, ds: Dataset):
    """数据集的编码列必须与训练时一致"""
    if tuple(ds.columnNames) != tuple(model.columnNames) or tuple(ds.columnKinds) != tuple(model.columnKinds):
        raise SchemaError("schema mismatch: dataset columns differ from the columns the model was fitted on")


def assign(model, ds: Dataset) -> Assignment:
    """
    只依据协变量把每一行分配到簇

    Args:
        model: FitResult
        ds: 用模型的schema和训练集标准化统计量编码的数据

    Returns:
        Assignment

    Raises:
        SchemaError: 列与模型不一致
    """
    checkSchema(model, ds)
    pointwise = pointwiseClusterLogliks(ds, model.params, model.globalParams, model.reference, model.outcomeType,
                                        includeOutcome=False, featureSelection=model.config.featureSelection)
    return Assignment.fromProbs(responsibilities(pointwise))


def predictIte(model, ds: Dataset, mode: str = SOFT, assignment: Optional[Assignment] = None) -> np.ndarray:
    """
    个体处理效应的预测

    Args:
        model: FitResult
        ds: 数据
        mode: soft或hard
        assignment: 已经算好的分配结果，为None时调用assign

    Returns:
        np.ndarray: 长度N；连续结局为结局单位，二分类结局为对数OR
    """
    if mode not in (SOFT, HARD):
        raise DataError(f"unknown prediction mode '{mode}', expected soft or hard")
    assignment = assign(model, ds) if assignment is None else assignment
    return iteFromAssignment(assignment, model.tauHat, mode)


def iteFromAssignment(assignment: Assignment, tauHat: np.ndarray, mode: str = SOFT) -> np.ndarray:
    tauHat = np.asarray(tauHat, dtype=float)
    if mode == HARD:
        return tauHat[assignment.hard - 1]
    return assignment.probs @ tauHat


def predictControl(model, ds: Dataset) -> np.ndarray:
    """
    控制组曲面μ̂⁰在数据各行上的预测(含常数偏移)

    Args:
        model: FitResult
        ds: 数据

    Returns:
        np.ndarray: 长度N
    """
    checkSchema(model, ds)
    globalParams = model.globalParams
    return globalParams.offset + gpConditionalMean(globalParams.gpLatent, globalParams.gpHyper, ds.X)
