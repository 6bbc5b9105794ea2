import functools
import sys

import click

from Service.utils import getLogger

__doc__ = """
自定义错误响应模块

该模块定义了项目内所有业务异常，以及命令行入口统一的错误处理方式：
1. 每一类异常携带自己的退出码
   - 0: 成功
   - 1: 运行期错误或数值失败
   - 2: 用法错误(参数、schema、配置不合法)
2. customizeCliResponse装饰器把异常翻译成stderr消息和退出码

库函数只抛出异常，从不直接退出进程。
"""

logger = getLogger("cli")


class BasiccsError(Exception):
    """所有业务异常的基类"""
    exitCode = 1


class SchemaError(BasiccsError, ValueError):
    """数据文件与schema不匹配、列名重复、取值越界等"""
    exitCode = 2


class ConfigError(BasiccsError, ValueError):
    """配置文件中有未知键或非法取值"""
    exitCode = 2


class DataError(BasiccsError, ValueError):
    """数据内容不满足操作的前置条件，如丢弃缺失值后为空、缺少真值列"""
    exitCode = 1


class NumericalError(BasiccsError, RuntimeError):
    """Cholesky失败、ELBO非有限、全部重启发散等数值问题"""
    exitCode = 1


class ArtifactError(BasiccsError):
    """模型文件损坏或版本不符"""
    exitCode = 1


def customizeCliResponse(func):
    """
    命令行错误处理装饰器

    包装click命令函数，把业务异常和IO异常转换为统一的stderr输出和退出码。
    click自身的用法错误(UsageError)不经过这里，仍由click以退出码2处理。

    Args:
        func: click命令的回调函数

    Returns:
        包装后的函数
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except click.exceptions.ClickException:
            raise
        except BasiccsError as error:
            logger.debug("command failed", exc_info=True)
            click.echo(f"error: {error}", err=True)
            sys.exit(error.exitCode)
        except OSError as error:
            click.echo(f"error: {error}", err=True)
            sys.exit(1)

    return wrapper
