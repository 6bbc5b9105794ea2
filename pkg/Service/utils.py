import logging
import os
from typing import Union

import jax
import yaml

__doc__ = """
工具函数模块

该模块提供了系统通用工具函数，主要包括：
1. 配置管理
   - 读取配置文件（支持自定义配置和默认配置）
   - 支持分类和键值对配置项
   - 支持多种配置数据类型

2. 日志
   - 按模块名获取日志器，日志级别和格式来自配置文件

3. 运行环境
   - 读取BASICCS_THREADS环境变量，限制并行重启的线程数
   - 打开jax的float64计算（梯度检查和ELBO比较都依赖双精度）
"""

jax.config.update("jax_enable_x64", True)

_PROJECT_PATH = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
_configCache = None
_loggingReady = False


def getConfig(category: str = None, key: str = None) -> Union[dict, str, int, float]:
    """
    获取配置文件中的配置项

    优先读取当前工作目录下的myConfig.yaml文件，如果不存在则读取项目根目录的config.yaml文件。
    支持获取整个配置、特定类别的配置或特定键值的配置。

    Args:
        category: 配置项类别，如果为None则返回整个配置
        key: 配置项键名，如果为None则返回整个类别的配置

    Returns:
        Union[dict, str, int, float]: 配置值
            - 如果category和key都为None，返回整个配置字典
            - 如果只有key为None，返回指定类别的配置字典
            - 否则返回指定类别和键名的具体配置值

    Note:
        - 配置文件使用YAML格式
        - 支持UTF-8编码
        - 配置在进程内只读取一次
    """
    global _configCache
    if _configCache is None:
        customPath = os.path.join(os.getcwd(), "myConfig.yaml")
        path = customPath if os.path.exists(customPath) else os.path.join(_PROJECT_PATH, "config.yaml")
        with open(path, "r", encoding="utf-8") as f:
            _configCache = yaml.safe_load(f)
    if category is None or category not in _configCache:
        return _configCache
    else:
        if key is None or key not in _configCache[category]:
            return _configCache[category]
        else:
            return _configCache[category][key]


def getLogger(name: str) -> logging.Logger:
    """
    获取模块日志器

    第一次调用时根据配置文件的Logging类别初始化"basiccs"根日志器，
    之后返回"basiccs.<name>"子日志器。日志统一输出到stderr，stdout留给命令的结果。

    Args:
        name: 模块名，如"data"、"gp"、"inference"

    Returns:
        logging.Logger: 子日志器
    """
    global _loggingReady
    root = logging.getLogger("basiccs")
    if not _loggingReady:
        info = getConfig("Logging")
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(info["Format"]))
        root.addHandler(handler)
        root.setLevel(os.environ.get("BASICCS_LOG_LEVEL", info["Level"]))
        root.propagate = False
        _loggingReady = True
    return root.getChild(name)


def getThreadCount() -> int:
    """
    获取并行重启可用的线程数

    Returns:
        int: BASICCS_THREADS环境变量的值；未设置或非法时返回逻辑处理器数
    """
    value = os.environ.get("BASICCS_THREADS")
    if value:
        try:
            count = int(value)
            if count > 0:
                return count
        except ValueError:
            pass
    return os.cpu_count() or 1
