import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from Service.errorResponse import DataError, SchemaError
from Service.utils import getLogger

__doc__ = """
数据模型模块

该模块负责数据集的表示和读入，主要包括：
1. 协变量schema
   - 连续、二值、分类三种列类型
   - 与JSON sidecar文件互相转换

2. CSV读入
   - 校验表头、处理变量a和结局y
   - 分类列展开为独热编码的二值列(列名为 <列名>_<水平>)
   - 连续列按样本均值和无偏标准差(N-1)标准化
   - 可选的整行缺失值丢弃(不做插补)

3. 数据切分
   - 按种子确定性地划分训练/测试集
   - 标准化统计量在第一份上重新计算，并原样应用到第二份

二分类结局在读入时统一转换为"1=有利"，有利取值由OutcomeType.favorableLabel指定。
所有操作都返回新对象，不修改输入。
"""

logger = getLogger("data")

CONTINUOUS = "continuous"
BINARY = "binary"
CATEGORICAL = "categorical"
REQUIRED_COLUMNS = ("a", "y")
TRUTH_COLUMNS = ("true_tau", "true_cluster", "true_y0", "true_y1")


@dataclass(frozen=True)
class ColumnSpec:
    """schema中的一列：列名、类型和分类水平"""
    name: str
    kind: str
    levels: tuple = ()


@dataclass(frozen=True)
class CovariateSchema:
    """
    协变量schema

    Attributes:
        columns: 按文件顺序排列的ColumnSpec

    Note:
        - 列名唯一，且不能与a、y或真值列重名
        - 分类列的水平列表非空且无重复
        - 至少一列协变量
    """
    columns: tuple

    def __post_init__(self):
        if len(self.columns) == 0:
            raise SchemaError("schema must contain at least one covariate column")
        names = [column.name for column in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        for column in self.columns:
            if column.name in REQUIRED_COLUMNS or column.name in TRUTH_COLUMNS:
                raise SchemaError(f"reserved column name used as covariate: {column.name}")
            if column.kind not in (CONTINUOUS, BINARY, CATEGORICAL):
                raise SchemaError(f"unknown column kind '{column.kind}' for {column.name}")
            if column.kind == CATEGORICAL:
                if len(column.levels) == 0:
                    raise SchemaError(f"categorical column {column.name} has no levels")
                if len(set(column.levels)) != len(column.levels):
                    raise SchemaError(f"categorical column {column.name} has duplicate levels")

    @property
    def names(self) -> list:
        return [column.name for column in self.columns]

    def encodedColumns(self) -> list:
        """
        独热展开后的列

        Returns:
            list: (编码后列名, continuous|binary, 原始列名, 水平或None) 的列表
        """
        encoded = []
        for column in self.columns:
            if column.kind == CATEGORICAL:
                for level in column.levels:
                    encoded.append((f"{column.name}_{level}", BINARY, column.name, level))
            else:
                encoded.append((column.name, column.kind, column.name, None))
        return encoded

    @classmethod
    def fromDict(cls, info: dict) -> "CovariateSchema":
        """
        从sidecar JSON对象构造schema

        Args:
            info: {列名: {"kind": ..., "levels": [...]}} 形式的字典

        Returns:
            CovariateSchema
        """
        if not isinstance(info, dict):
            raise SchemaError("schema must be a JSON object mapping column name to its kind")
        columns = []
        for name, entry in info.items():
            if not isinstance(entry, dict) or "kind" not in entry:
                raise SchemaError(f"schema entry for {name} must be an object with a 'kind'")
            unknown = set(entry) - {"kind", "levels"}
            if unknown:
                raise SchemaError(f"unknown keys {sorted(unknown)} in schema entry for {name}")
            levels = tuple(str(level) for level in entry.get("levels", []))
            if entry["kind"] != CATEGORICAL and levels:
                raise SchemaError(f"levels given for non-categorical column {name}")
            columns.append(ColumnSpec(str(name), entry["kind"], levels))
        return cls(tuple(columns))

    def toDict(self) -> dict:
        info = {}
        for column in self.columns:
            info[column.name] = {"kind": column.kind}
            if column.kind == CATEGORICAL:
                info[column.name]["levels"] = list(column.levels)
        return info

    @classmethod
    def fromJson(cls, path: str) -> "CovariateSchema":
        with open(path, "r", encoding="utf-8") as f:
            try:
                info = json.load(f)
            except json.JSONDecodeError as error:
                raise SchemaError(f"schema file {path} is not valid JSON: {error}")
        return cls.fromDict(info)


@dataclass(frozen=True)
class OutcomeType:
    """
    结局类型

    Attributes:
        tag: continuous或binary
        favorableLabel: 二分类时视为有利的原始取值(0或1)，读入后被映射为1
    """
    tag: str = CONTINUOUS
    favorableLabel: int = 1

    def __post_init__(self):
        if self.tag not in (CONTINUOUS, BINARY):
            raise SchemaError(f"unknown outcome type '{self.tag}'")
        if self.favorableLabel not in (0, 1):
            raise SchemaError("favorable label must be 0 or 1")

    @property
    def isBinary(self) -> bool:
        return self.tag == BINARY


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    编码后的数据集

    Attributes:
        X: N×D 编码后的协变量矩阵(连续列已标准化)
        rawX: N×D 编码后、未标准化的矩阵，用于重新标准化和还原原始尺度
        columnNames: 编码后的列名
        columnKinds: 每列 continuous 或 binary
        a: 处理变量，取值{0,1}
        y: 结局；二分类时已映射为 1=有利
        schema: 读入时使用的CovariateSchema
        outcomeType: 结局类型
        standardizationStats: {连续列名: (均值, 标准差)}，未标准化时为空
        rowIds: 每行在原始文件中的行号
        trueTau/trueCluster/trueY0/trueY1: 可选的真值列
    """
    X: np.ndarray
    rawX: np.ndarray
    columnNames: tuple
    columnKinds: tuple
    a: np.ndarray
    y: np.ndarray
    schema: CovariateSchema
    outcomeType: OutcomeType
    standardizationStats: dict = field(default_factory=dict)
    rowIds: Optional[np.ndarray] = None
    trueTau: Optional[np.ndarray] = None
    trueCluster: Optional[np.ndarray] = None
    trueY0: Optional[np.ndarray] = None
    trueY1: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    @property
    def continuousMask(self) -> np.ndarray:
        return np.array([kind == CONTINUOUS for kind in self.columnKinds])

    @property
    def binaryMask(self) -> np.ndarray:
        return np.array([kind == BINARY for kind in self.columnKinds])

    @property
    def standardized(self) -> bool:
        return len(self.standardizationStats) > 0

    def subset(self, rows: np.ndarray) -> "Dataset":
        """按行号取子集，不重新标准化"""
        rows = np.asarray(rows)
        pick = lambda values: None if values is None else values[rows]
        return dataclasses.replace(self, X=self.X[rows], rawX=self.rawX[rows], a=self.a[rows], y=self.y[rows],
                                   rowIds=pick(self.rowIds), trueTau=pick(self.trueTau),
                                   trueCluster=pick(self.trueCluster), trueY0=pick(self.trueY0),
                                   trueY1=pick(self.trueY1))


def computeStandardization(rawX: np.ndarray, columnNames, columnKinds) -> dict:
    """
    计算连续列的标准化统计量

    Args:
        rawX: 未标准化的编码矩阵
        columnNames: 编码后的列名
        columnKinds: 列类型

    Returns:
        dict: {列名: (均值, 无偏标准差)}

    Note:
        - 标准差为0(或只有一行)的列记为1.0并给出警告，使变换退化为平移
    """
    stats = {}
    for d, (name, kind) in enumerate(zip(columnNames, columnKinds)):
        if kind != CONTINUOUS:
            continue
        values = rawX[:, d]
        mean = float(np.mean(values))
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        if not sd > 0:
            logger.warning("column %s has zero variance; using sd=1 for standardization", name)
            sd = 1.0
        stats[name] = (mean, sd)
    return stats


def _standardize(rawX: np.ndarray, columnNames, columnKinds, stats: dict) -> np.ndarray:
    X = rawX.astype(float).copy()
    for d, (name, kind) in enumerate(zip(columnNames, columnKinds)):
        if kind != CONTINUOUS:
            continue
        if name not in stats:
            raise SchemaError(f"missing standardization stats for column {name}")
        mean, sd = stats[name]
        X[:, d] = (rawX[:, d] - mean) / sd
    return X


def applyStandardization(ds: Dataset, stats: dict) -> Dataset:
    """
    使用给定的统计量标准化数据集

    测试集必须复用训练集的统计量，而不是用自己的均值和标准差。

    Args:
        ds: 数据集(使用其rawX)
        stats: {连续列名: (均值, 标准差)}，需要覆盖全部连续列

    Returns:
        Dataset: 标准化后的新数据集

    Raises:
        SchemaError: 某个连续列缺少统计量
    """
    X = _standardize(ds.rawX, ds.columnNames, ds.columnKinds, stats)
    kept = {name: tuple(map(float, stats[name])) for name, kind in zip(ds.columnNames, ds.columnKinds)
            if kind == CONTINUOUS}
    return dataclasses.replace(ds, X=X, standardizationStats=kept)


def inverseStandardization(X: np.ndarray, columnNames, columnKinds, stats: dict) -> np.ndarray:
    """把标准化后的矩阵还原到原始尺度(二值列不变)"""
    raw = np.asarray(X, dtype=float).copy()
    for d, (name, kind) in enumerate(zip(columnNames, columnKinds)):
        if kind == CONTINUOUS and name in stats:
            mean, sd = stats[name]
            raw[..., d] = raw[..., d] * sd + mean
    return raw


def decodeCategorical(ds: Dataset, column: str) -> np.ndarray:
    """
    把一个分类列的独热编码组还原为水平字符串

    Args:
        ds: 数据集
        column: 原始分类列名

    Returns:
        np.ndarray: 每行的水平
    """
    spec = next((c for c in ds.schema.columns if c.name == column), None)
    if spec is None or spec.kind != CATEGORICAL:
        raise SchemaError(f"{column} is not a categorical column")
    positions = [ds.columnNames.index(f"{column}_{level}") for level in spec.levels]
    group = ds.rawX[:, positions]
    return np.array(spec.levels, dtype=object)[np.argmax(group, axis=1)]


def _checkHeader(frame: pd.DataFrame, schema: CovariateSchema):
    header = list(frame.columns)
    missing = [name for name in list(schema.names) + list(REQUIRED_COLUMNS) if name not in header]
    if missing:
        raise SchemaError(f"schema mismatch: missing columns {missing}")
    allowed = set(schema.names) | set(REQUIRED_COLUMNS) | set(TRUTH_COLUMNS)
    extra = [name for name in header if name not in allowed]
    if extra:
        raise SchemaError(f"schema mismatch: unexpected columns {extra}")


def _numeric(frame: pd.DataFrame, name: str) -> np.ndarray:
    try:
        return pd.to_numeric(frame[name]).to_numpy(dtype=float)
    except (ValueError, TypeError):
        raise SchemaError(f"column {name} contains non-numeric values")


def encodeFrame(frame: pd.DataFrame, schema: CovariateSchema, outcomeType: OutcomeType,
                stats: Optional[dict] = None, standardize: bool = True, dropMissing: bool = False) -> Dataset:
    """
    把原始数据表编码为Dataset

    Args:
        frame: 原始数据表，列包含schema中的协变量、a、y以及可选的真值列
        schema: 协变量schema
        outcomeType: 结局类型
        stats: 标准化统计量；为None时在本表上计算
        standardize: 是否标准化连续列
        dropMissing: 是否丢弃含缺失值的行；为False时任何缺失值都是错误

    Returns:
        Dataset

    Raises:
        SchemaError: 表头不符、取值越界
        DataError: 丢弃缺失值后为空、只含一个处理组
    """
    _checkHeader(frame, schema)
    used = [name for name in frame.columns]
    isMissing = frame[used].isna() | frame[used].astype(str).apply(lambda col: col.str.strip() == "")
    if isMissing.to_numpy().any():
        if not dropMissing:
            rows = list(np.where(isMissing.any(axis=1).to_numpy())[0][:5])
            raise SchemaError(f"missing values in rows {rows} (use drop_missing to drop them)")
        before = len(frame)
        frame = frame.loc[~isMissing.any(axis=1)]
        logger.info("dropped %d rows with missing values", before - len(frame))
    if len(frame) == 0:
        raise DataError("dataset is empty after dropping missing values")

    blocks, names, kinds = [], [], []
    for column in schema.columns:
        if column.kind == CATEGORICAL:
            values = frame[column.name].astype(str).str.strip().to_numpy()
            unknown = sorted(set(values) - set(column.levels))
            if unknown:
                raise SchemaError(f"column {column.name} has values outside its levels: {unknown[:5]}")
            for level in column.levels:
                blocks.append((values == level).astype(float))
                names.append(f"{column.name}_{level}")
                kinds.append(BINARY)
        else:
            values = _numeric(frame, column.name)
            if column.kind == BINARY and not np.isin(values, (0.0, 1.0)).all():
                raise SchemaError(f"binary column {column.name} has values outside {{0,1}}")
            blocks.append(values)
            names.append(column.name)
            kinds.append(column.kind)
    rawX = np.column_stack(blocks)

    a = _numeric(frame, "a")
    if not np.isin(a, (0.0, 1.0)).all():
        raise SchemaError("invalid treatment value: column a must contain only 0 and 1")
    if a.min() == a.max():
        raise DataError("treatment column a must contain both arms")
    y = _numeric(frame, "y")
    if not np.isfinite(y).all():
        raise SchemaError("column y contains non-finite values")
    if outcomeType.isBinary:
        if not np.isin(y, (0.0, 1.0)).all():
            raise SchemaError("binary outcome y must contain only 0 and 1")
        y = (y == outcomeType.favorableLabel).astype(float)

    truth = {}
    for name in TRUTH_COLUMNS:
        if name in frame.columns:
            truth[name] = _numeric(frame, name)
    if "true_cluster" in truth:
        truth["true_cluster"] = truth["true_cluster"].astype(int)

    names, kinds = tuple(names), tuple(kinds)
    if standardize:
        stats = computeStandardization(rawX, names, kinds) if stats is None else stats
        X = _standardize(rawX, names, kinds, stats)
        stats = {name: tuple(map(float, stats[name])) for name, kind in zip(names, kinds) if kind == CONTINUOUS}
    else:
        X, stats = rawX.copy(), {}
    return Dataset(X=X, rawX=rawX, columnNames=names, columnKinds=kinds, a=a.astype(int), y=y,
                   schema=schema, outcomeType=outcomeType, standardizationStats=stats,
                   rowIds=frame.index.to_numpy().astype(int),
                   trueTau=truth.get("true_tau"), trueCluster=truth.get("true_cluster"),
                   trueY0=truth.get("true_y0"), trueY1=truth.get("true_y1"))


def readFrame(path: str, schema: CovariateSchema) -> pd.DataFrame:
    """读取CSV，分类列按字符串读入"""
    dtypes = {column.name: str for column in schema.columns if column.kind == CATEGORICAL}
    frame = pd.read_csv(path, encoding="utf-8", dtype=dtypes, keep_default_na=True)
    frame.columns = [str(name).strip() for name in frame.columns]
    return frame.reset_index(drop=True)


def ingestCsv(path: str, schema: CovariateSchema, outcomeType: OutcomeType,
              dropMissing: bool = False, standardize: bool = True) -> Dataset:
    """
    读入CSV数据文件

    Args:
        path: UTF-8、逗号分隔、带表头的CSV文件路径
        schema: 协变量schema
        outcomeType: 结局类型
        dropMissing: 是否丢弃含缺失值的行
        standardize: 是否标准化连续列(统计量取自本文件)

    Returns:
        Dataset

    Raises:
        FileNotFoundError: 文件不存在
        SchemaError: 表头与schema不符、a不是0/1、二分类y越界
        DataError: 丢弃缺失值后为空
    """
    frame = readFrame(path, schema)
    ds = encodeFrame(frame, schema, outcomeType, standardize=standardize, dropMissing=dropMissing)
    logger.info("ingested %s: N=%d, D=%d", path, ds.N, ds.D)
    return ds


def split(ds: Dataset, fraction: float, seed: int) -> tuple:
    """
    确定性地把数据集切分为两份

    Args:
        ds: 数据集
        fraction: 第一份所占比例，(0,1)
        seed: 随机种子

    Returns:
        tuple: (第一份, 第二份)，大小为 floor(fN) 和 N-floor(fN)

    Raises:
        DataError: 某一份为空

    Note:
        - 第一份重新计算标准化统计量，第二份复用第一份的统计量
    """
    if not 0 < fraction < 1:
        raise DataError("split fraction must lie in (0, 1)")
    first = int(math.floor(fraction * ds.N))
    if first == 0 or first == ds.N:
        raise DataError(f"split fraction {fraction} leaves an empty split for N={ds.N}")
    order = np.random.default_rng(seed).permutation(ds.N)
    head, tail = ds.subset(np.sort(order[:first])), ds.subset(np.sort(order[first:]))
    if ds.standardized:
        stats = computeStandardization(head.rawX, head.columnNames, head.columnKinds)
        head, tail = applyStandardization(head, stats), applyStandardization(tail, stats)
    return head, tail
