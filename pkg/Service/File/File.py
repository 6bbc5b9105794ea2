import json
from os import path, makedirs

import numpy as np
import pandas as pd
import yaml

from Service.Data import CovariateSchema
from Service.errorResponse import ConfigError, SchemaError
from Service.utils import getConfig


class FileMgr:
    """文件管理：数据文件旁的schema、CSV表格、JSON结果和配置文件"""

    def __init__(self, workPath: str = "."):
        self._projPath = workPath.replace("\\", "/")  # 相对路径以它为基准
        if not path.exists(workPath):
            raise FileNotFoundError("workPath not found")
        self._projPath = self._projPath[:-1] if self._projPath[-1] == "/" else self._projPath  # 去除末尾的"/"
        self._schemaSuffix = getConfig("Path", "SchemaSuffix")

    def resolve(self, filePath: str) -> str:
        """
        把相对路径转换为工作目录下的路径
        :param filePath: 文件路径
        :return: 路径(绝对路径原样返回)
        """
        filePath = filePath.replace("\\", "/")
        return filePath if path.isabs(filePath) else self._projPath + "/" + filePath

    def _prepare(self, filePath: str) -> str:
        filePath = self.resolve(filePath)
        folder = path.dirname(filePath)
        if folder and not path.exists(folder):
            makedirs(folder)
        return filePath

    """schema"""

    def getSchemaPath(self, dataPath: str) -> str:
        """
        数据文件对应的schema路径：去掉.csv后缀再加上SchemaSuffix
        :param dataPath: 数据文件路径
        :return: schema文件路径
        """
        stem = dataPath[:-4] if dataPath.lower().endswith(".csv") else dataPath
        return stem + self._schemaSuffix

    def readSchema(self, dataPath: str, schemaPath: str = None) -> CovariateSchema:
        """
        读取schema
        :param dataPath: 数据文件路径
        :param schemaPath: 显式给出的schema路径，为None时使用数据文件旁的sidecar
        :return: CovariateSchema
        """
        schemaPath = self.resolve(schemaPath or self.getSchemaPath(dataPath))
        if not path.exists(schemaPath):
            raise SchemaError(f"schema file not found: {schemaPath}")
        return CovariateSchema.fromJson(schemaPath)

    def writeSchema(self, schema: CovariateSchema, dataPath: str) -> str:
        """
        把schema写到数据文件旁
        :return: schema文件路径
        """
        return self.writeJson(schema.toDict(), self.getSchemaPath(dataPath))

    """table"""

    def writeTable(self, frame: pd.DataFrame, filePath: str) -> str:
        """
        写CSV(UTF-8，逗号分隔，带表头，不写行索引)
        :return: 文件路径
        """
        filePath = self._prepare(filePath)
        frame.to_csv(filePath, index=False, encoding="utf-8", lineterminator="\n")
        return filePath

    def writeDataset(self, frame: pd.DataFrame, schema: CovariateSchema, dataPath: str) -> tuple:
        """
        写数据文件和它的sidecar schema
        :return: (数据文件路径, schema文件路径)
        """
        return self.writeTable(frame, dataPath), self.writeSchema(schema, dataPath)

    """json"""

    @staticmethod
    def formatJson(info: dict) -> str:
        """numpy标量和数组转换为Python类型后格式化为JSON文本"""
        return json.dumps(info, indent=2, ensure_ascii=False, default=_jsonDefault)

    def writeJson(self, info: dict, filePath: str) -> str:
        """
        写JSON
        :return: 文件路径
        """
        filePath = self._prepare(filePath)
        with open(filePath, "w", encoding="utf-8") as f:
            f.write(self.formatJson(info) + "\n")
        return filePath

    def readJson(self, filePath: str) -> dict:
        with open(self.resolve(filePath), "r", encoding="utf-8") as f:
            return json.load(f)

    def readConfig(self, filePath: str) -> dict:
        """
        读取模型配置文件，JSON和YAML都可以(YAML是JSON的超集)
        :param filePath: 配置文件路径
        :return: 配置字典
        """
        with open(self.resolve(filePath), "r", encoding="utf-8") as f:
            try:
                info = yaml.safe_load(f)
            except yaml.YAMLError as error:
                raise ConfigError(f"config file {filePath} cannot be parsed: {error}")
        if info is None:
            return {}
        if not isinstance(info, dict):
            raise ConfigError("config file must contain a mapping of option names to values")
        return info


def _jsonDefault(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"object of type {type(value).__name__} is not JSON serializable")
