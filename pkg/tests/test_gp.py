import numpy as np
import pytest

from Service.GP import (LINEAR, SE_ARD, GpHyper, buildLatent, choleskyWithJitter, gpConditionalMean, gpMleFit,
                        kernelMatrix, marginalLogLik, restoreLatent)
from Service.errorResponse import DataError, NumericalError


def testKernelValues():
    hyper = GpHyper(alpha=1.0, rho=[1.0], noiseSd=0.1)
    K = kernelMatrix(np.array([[0.0], [2.0]]), None, hyper)
    np.testing.assert_allclose(np.diag(K), [1.0, 1.0])
    assert K[0, 1] == pytest.approx(np.exp(-2.0), abs=1e-12)
    doubled = kernelMatrix(np.array([[0.0], [2.0]]), None, GpHyper(alpha=2.0, rho=[1.0], noiseSd=0.1))
    np.testing.assert_allclose(doubled, 4.0 * K)


def testKernelDiagonalNoise():
    hyper = GpHyper(alpha=1.0, rho=[1.0, 2.0], noiseSd=0.5)
    X = np.random.default_rng(0).standard_normal((4, 2))
    K = kernelMatrix(X, None, hyper, addDiagNoise=True)
    np.testing.assert_allclose(np.diag(K), np.full(4, 1.0 + 0.25 + hyper.jitter))
    with pytest.raises(DataError):
        kernelMatrix(np.zeros((3, 3)), None, hyper)


def testMarginalLikelihoodGradient():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((20, 2))
    y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(20)
    step = 1e-5
    for _ in range(10):
        logParams = rng.uniform(-1.0, 1.0, 4)
        hyper = GpHyper(alpha=1.0, rho=[1.0, 1.0], noiseSd=0.3).withLogParams(logParams)
        value, grad = marginalLogLik(X, y, hyper)
        assert np.isfinite(value)
        for i in range(len(grad)):
            shift = np.zeros(len(grad))
            shift[i] = step
            up = marginalLogLik(X, y, hyper.withLogParams(logParams + shift))[0]
            down = marginalLogLik(X, y, hyper.withLogParams(logParams - shift))[0]
            assert grad[i] == pytest.approx((up - down) / (2 * step), rel=1e-4, abs=1e-6)


def testNoisyKernelIsPositiveDefinite():
    rng = np.random.default_rng(5)
    for _ in range(10):
        X = rng.standard_normal((15, 3))
        hyper = GpHyper(alpha=float(rng.uniform(0.1, 3.0)), rho=rng.uniform(0.1, 3.0, 3),
                        noiseSd=float(rng.uniform(0.01, 1.0)))
        K = kernelMatrix(X, X, hyper, addDiagNoise=True)
        np.testing.assert_array_equal(K, K.T)
        np.linalg.cholesky(K)
        assert np.linalg.eigvalsh(K).min() > 0


def testMleImprovesAndIsMonotone():
    rng = np.random.default_rng(2)
    X = rng.uniform(-2, 2, (40, 1))
    y = np.sin(2 * X[:, 0]) + 0.05 * rng.standard_normal(40)
    init = GpHyper(alpha=1.0, rho=[1.0], noiseSd=0.5)
    history = []
    fitted = gpMleFit(X, y, init, budget=50, history=history)
    centered = y - y.mean()
    assert marginalLogLik(X, centered, fitted)[0] >= marginalLogLik(X, centered, init)[0] - 1e-9
    assert fitted.noiseSd < 0.5
    assert all(later >= earlier - 1e-8 for earlier, later in zip(history, history[1:]))


def testMleOnConstantOutcomeShrinksAlpha():
    X = np.random.default_rng(6).standard_normal((30, 2))
    history = []
    fitted = gpMleFit(X, np.zeros(30), GpHyper(alpha=1.0, rho=[1.0, 1.0], noiseSd=0.5), budget=200, history=history)
    assert fitted.alpha == pytest.approx(1e-4, rel=1e-3)
    assert all(later >= earlier - 1e-8 for earlier, later in zip(history, history[1:]))


def testMleFromOptimumStaysPut():
    rng = np.random.default_rng(2)
    X = rng.uniform(-2, 2, (40, 1))
    y = np.sin(2 * X[:, 0]) + 0.05 * rng.standard_normal(40)
    optimum = gpMleFit(X, y, GpHyper(alpha=1.0, rho=[1.0], noiseSd=0.5), budget=500)
    again = gpMleFit(X, y, optimum, budget=500)
    centered = y - y.mean()
    before, after = marginalLogLik(X, centered, optimum)[0], marginalLogLik(X, centered, again)[0]
    assert -1e-9 <= after - before < 1e-6


def testMleNeedsEnoughRows():
    with pytest.raises(DataError):
        gpMleFit(np.zeros((3, 2)), np.zeros(3), GpHyper(alpha=1.0, rho=[1.0, 1.0], noiseSd=0.1))


def testConditionalMeanInterpolatesAndReverts():
    rng = np.random.default_rng(3)
    X = 3.0 * rng.standard_normal((6, 2))
    hyper = GpHyper(alpha=1.0, rho=[1.0, 1.0], noiseSd=0.1)
    latent, hyper = buildLatent(X, hyper, rng.standard_normal(6))
    np.testing.assert_allclose(gpConditionalMean(latent, hyper, X[:3]), latent.values[:3], atol=1e-6)
    far = np.full((1, 2), 100.0)
    assert abs(gpConditionalMean(latent, hyper, far)[0]) < 1e-6


def testConditionalMeanTwoPointClosedForm():
    X = np.array([[0.0], [1.0]])
    hyper = GpHyper(alpha=1.0, rho=[1.0], noiseSd=0.1)
    latent, hyper = buildLatent(X, hyper, np.array([0.5, -0.2]))
    Xnew = np.array([[0.5]])
    K = kernelMatrix(X, None, hyper) + hyper.jitter * np.eye(2)
    expected = kernelMatrix(Xnew, X, hyper) @ np.linalg.solve(K, latent.values)
    np.testing.assert_allclose(gpConditionalMean(latent, hyper, Xnew), expected, atol=1e-10)


def testJitterEscalation():
    K = np.ones((3, 3))
    L, jitter = choleskyWithJitter(K, 1.0)
    assert jitter >= 1e-8
    np.testing.assert_allclose(L @ L.T, K + jitter * np.eye(3), atol=1e-12)
    with pytest.raises(NumericalError, match="ill-conditioned kernel"):
        choleskyWithJitter(-np.eye(3), 1.0)


def testRestoreLatentMatchesBuild():
    X = np.random.default_rng(4).standard_normal((8, 2))
    latent, hyper = buildLatent(X, GpHyper(alpha=1.5, rho=[1.0, 2.0], noiseSd=0.2), np.arange(8.0))
    restored = restoreLatent(X, GpHyper.fromDict(hyper.toDict()), latent.whitened)
    np.testing.assert_array_equal(restored.cholFactor, latent.cholFactor)
    np.testing.assert_array_equal(restored.values, latent.values)


def testLinearKernel():
    hyper = GpHyper(alpha=1.0, rho=[1.0], noiseSd=0.1, kernel=LINEAR)
    K = kernelMatrix(np.array([[1.0], [2.0]]), None, hyper)
    np.testing.assert_allclose(K, [[2.0, 3.0], [3.0, 5.0]])
    assert hyper.kernel != SE_ARD
