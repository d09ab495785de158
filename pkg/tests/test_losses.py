import numpy as np
import pytest
from scipy.special import log_softmax

from kfac_ws.losses import CategoricalLoss, GaussianLoss, make_loss
from kfac_ws.tensor import DefinitenessError

from conftest import random_spd


def fd_grad(fn, f, eps=1e-6):
    g = np.zeros_like(f)
    for i in range(f.size):
        e = np.zeros_like(f)
        e.flat[i] = eps
        g.flat[i] = (fn(f + e) - fn(f - e)) / (2 * eps)
    return g


class TestGaussian:
    def test_grad_and_hessian(self, rng):
        cov = random_spd(rng, 3)
        loss = GaussianLoss(cov)
        f, y = rng.standard_normal(3), rng.standard_normal(3)
        np.testing.assert_allclose(loss.grad(f, y), fd_grad(lambda z: loss.value(z, y), f), atol=1e-8)
        np.testing.assert_allclose(loss.hessian(f), np.linalg.inv(cov), atol=1e-12)

    def test_log_likelihood_matches_scipy(self, rng):
        from scipy.stats import multivariate_normal
        cov = random_spd(rng, 2)
        f, y = rng.standard_normal(2), rng.standard_normal(2)
        ref = multivariate_normal(mean=f, cov=cov).logpdf(y)
        assert GaussianLoss(cov).log_likelihood(f, y) == pytest.approx(ref, abs=1e-12)

    def test_sqrt_and_outcomes_reproduce_hessian(self, rng):
        loss = GaussianLoss(random_spd(rng, 3))
        f = rng.standard_normal((2, 3))
        L = loss.hessian_sqrt(f)
        np.testing.assert_allclose(L @ np.swapaxes(L, -1, -2), loss.hessian(f), atol=1e-12)
        g, w = loss.outcomes(f)
        second = np.einsum("...k,...ki,...kj->...ij", w, g, g)
        np.testing.assert_allclose(second, loss.hessian(f), atol=1e-12)
        np.testing.assert_allclose(np.einsum("...k,...ki->...i", w, g), 0, atol=1e-12)

    def test_sample_moments(self):
        loss = GaussianLoss.isotropic(2)
        g = loss.sample_grads(np.zeros(2), 10_000, np.random.default_rng(0))
        assert np.all(np.abs(g.mean(0)) < 0.05)
        assert np.all(np.abs(g.var(0) - 1) < 0.05)

    def test_not_spd(self):
        with pytest.raises(DefinitenessError):
            GaussianLoss(np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestCategorical:
    def test_grad(self, rng):
        loss = CategoricalLoss()
        f = rng.standard_normal(4)
        np.testing.assert_allclose(loss.grad(f, 2), fd_grad(lambda z: loss.value(z, 2), f), atol=1e-8)

    def test_two_class_hessian(self):
        np.testing.assert_allclose(CategoricalLoss().hessian(np.zeros(2)), [[0.25, -0.25], [-0.25, 0.25]])

    def test_hessian_matches_finite_differences(self, rng):
        loss = CategoricalLoss()
        f = rng.standard_normal(3)
        H = np.stack([fd_grad(lambda z: loss.grad(z, 1)[i], f) for i in range(3)])
        np.testing.assert_allclose(loss.hessian(f), H, atol=1e-6)

    def test_sqrt_reproduces_hessian(self, rng):
        loss = CategoricalLoss()
        f = rng.standard_normal((2, 3, 4))
        L = loss.hessian_sqrt(f)
        np.testing.assert_allclose(L @ np.swapaxes(L, -1, -2), loss.hessian(f), atol=1e-12)

    def test_deterministic_prediction_gives_zero_samples(self):
        f = np.array([50.0, -50.0])
        g = CategoricalLoss().sample_grads(f, 100, np.random.default_rng(0))
        np.testing.assert_allclose(g, 0, atol=1e-12)

    def test_sample_frequencies(self):
        f = np.log(np.array([0.2, 0.3, 0.5]))
        g = CategoricalLoss().sample_grads(f, 20_000, np.random.default_rng(1))
        labels = np.argmin(g, axis=-1)
        np.testing.assert_allclose(np.bincount(labels) / 20_000, [0.2, 0.3, 0.5], atol=0.015)

    def test_value_is_negative_log_softmax(self, rng):
        f = rng.standard_normal((5, 3))
        y = rng.integers(0, 3, 5)
        np.testing.assert_allclose(CategoricalLoss().value(f, y), -log_softmax(f, -1)[np.arange(5), y])


def test_make_loss_unknown_kind():
    with pytest.raises(ValueError):
        make_loss("poisson")
