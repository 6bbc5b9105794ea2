from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from scipy import special

from Service.Data import CONTINUOUS
from Service.errorResponse import SchemaError

__doc__ = """
无约束参数向量模块

变分推断在一个扁平的实向量上进行，这里负责它和受约束参数(tree)之间的变换：
- π: K−1个自由logit，最后一个固定为0，经softmax得到单纯形
- θ_sd、σ0、σ1: 对数变换
- θ_p、γ: logit变换
- θ_mu、β、η: 不变换

只有真正被使用的位置才进入向量：θ_mu/θ_sd只含连续维度，θ_p只含二值维度，
γ只在启用特征选择时存在，σ0/σ1只在连续结局时存在。
其余位置在constrain时填入中性值(均值0、标准差1、概率0.5、γ=1)。
"""

NEUTRAL_MU = 0.0
NEUTRAL_SD = 1.0
NEUTRAL_P = 0.5


@dataclass(frozen=True)
class ParamLayout:
    """
    参数向量的布局

    Attributes:
        K: 簇数
        columnKinds: 每列的类型
        N: GP潜在变量η的长度
        binary: 结局是否为二分类
        featureSelection: 是否含γ
    """
    K: int
    columnKinds: tuple
    N: int
    binary: bool
    featureSelection: bool

    def __post_init__(self):
        if self.K < 1:
            raise SchemaError("K must be at least 1")
        object.__setattr__(self, "columnKinds", tuple(self.columnKinds))
        cont = np.array([kind == CONTINUOUS for kind in self.columnKinds])
        object.__setattr__(self, "_contIdx", np.where(cont)[0])
        object.__setattr__(self, "_binIdx", np.where(~cont)[0])
        shapes = [("pi", (self.K - 1,)), ("thetaMu", (self.K, len(self._contIdx))),
                  ("thetaSd", (self.K, len(self._contIdx))), ("thetaP", (self.K, len(self._binIdx)))]
        if self.featureSelection:
            shapes.append(("gamma", (self.K, self.D)))
        shapes.append(("beta", (self.K,)))
        if not self.binary:
            shapes += [("sigma0", ()), ("sigma1", ())]
        shapes.append(("eta", (self.N,)))
        slices, start = {}, 0
        for name, shape in shapes:
            size = int(np.prod(shape)) if shape else 1
            slices[name] = (slice(start, start + size), shape)
            start += size
        object.__setattr__(self, "_slices", slices)
        object.__setattr__(self, "_size", start)

    @property
    def D(self) -> int:
        return len(self.columnKinds)

    @property
    def size(self) -> int:
        return self._size

    def indexMap(self) -> dict:
        """{参数名: 向量中的slice}"""
        return {name: entry[0] for name, entry in self._slices.items()}

    def _piece(self, z, name):
        where, shape = self._slices[name]
        return z[where].reshape(shape)

    def _fill(self, block, idx, neutral):
        full = jnp.full((self.K, self.D), neutral)
        return full.at[:, idx].set(block) if len(idx) else full

    def constrain(self, z) -> tuple:
        """
        把无约束向量变换为参数tree

        Args:
            z: 长度size的向量(可以是jax追踪值)

        Returns:
            tuple: (tree, 变换的对数雅可比行列式)
        """
        z = jnp.asarray(z)
        logits = jnp.concatenate([self._piece(z, "pi"), jnp.zeros(1)])
        logPi = jax.nn.log_softmax(logits)
        # 最后一个分量固定时，softmax的雅可比行列式为 Π_k π_k
        logJac = jnp.sum(logPi) if self.K > 1 else 0.0

        rawMu = self._piece(z, "thetaMu")
        logSd = self._piece(z, "thetaSd")
        rawP = self._piece(z, "thetaP")
        logJac = logJac + jnp.sum(logSd) + jnp.sum(jax.nn.log_sigmoid(rawP) + jax.nn.log_sigmoid(-rawP))
        tree = {"pi": jnp.exp(logPi), "thetaMu": self._fill(rawMu, self._contIdx, NEUTRAL_MU),
                "thetaSd": self._fill(jnp.exp(logSd), self._contIdx, NEUTRAL_SD),
                "thetaP": self._fill(jax.nn.sigmoid(rawP), self._binIdx, NEUTRAL_P)}
        if self.featureSelection:
            rawGamma = self._piece(z, "gamma")
            tree["gamma"] = jax.nn.sigmoid(rawGamma)
            logJac = logJac + jnp.sum(jax.nn.log_sigmoid(rawGamma) + jax.nn.log_sigmoid(-rawGamma))
        else:
            tree["gamma"] = jnp.ones((self.K, self.D))
        tree["beta"] = self._piece(z, "beta")
        if not self.binary:
            logSigma0, logSigma1 = self._piece(z, "sigma0"), self._piece(z, "sigma1")
            tree["sigma0"], tree["sigma1"] = jnp.exp(logSigma0), jnp.exp(logSigma1)
            logJac = logJac + logSigma0 + logSigma1
        tree["eta"] = self._piece(z, "eta")
        return tree, logJac

    def unconstrain(self, tree: dict) -> np.ndarray:
        """
        constrain的逆变换

        Args:
            tree: 参数tree；未进入向量的位置被忽略

        Returns:
            np.ndarray: 长度size的无约束向量
        """
        z = np.zeros(self.size)
        put = lambda name, value: z.__setitem__(self._slices[name][0], np.ravel(value))
        pi = np.asarray(tree["pi"], dtype=float)
        put("pi", np.log(pi[:-1]) - np.log(pi[-1]))
        put("thetaMu", np.asarray(tree["thetaMu"])[:, self._contIdx])
        put("thetaSd", np.log(np.asarray(tree["thetaSd"])[:, self._contIdx]))
        put("thetaP", special.logit(np.asarray(tree["thetaP"])[:, self._binIdx]))
        if self.featureSelection:
            put("gamma", special.logit(np.asarray(tree["gamma"])))
        put("beta", np.asarray(tree["beta"]))
        if not self.binary:
            put("sigma0", np.log(float(tree["sigma0"])))
            put("sigma1", np.log(float(tree["sigma1"])))
        put("eta", np.asarray(tree["eta"]))
        return z

    def constrainNumpy(self, z: np.ndarray) -> dict:
        """constrain的numpy版本，只返回tree"""
        tree, _ = self.constrain(jnp.asarray(z, dtype=float))
        return {name: np.asarray(value) for name, value in tree.items()}
