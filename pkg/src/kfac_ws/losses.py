"""Negative log-likelihood losses over model outputs.

All methods broadcast over leading axes; the last axis holds the ``C`` output
coordinates.  Categorical labels are integer class indices, Gaussian labels
are real vectors.
"""

import numpy as np
from scipy.special import log_softmax, softmax

from .tensor import cholesky, symmetrize


class Loss:
    kind = "abstract"

    def value(self, f, y):
        """Loss per row without normalising constants."""
        raise NotImplementedError

    def log_likelihood(self, f, y):
        raise NotImplementedError

    def grad(self, f, y):
        raise NotImplementedError

    def hessian(self, f):
        raise NotImplementedError

    def hessian_sqrt(self, f):
        """Matrices ``L`` with ``L @ L^T == hessian(f)``, shape ``(..., C, K)``."""
        raise NotImplementedError

    def outcomes(self, f):
        """Deterministic set of output gradients whose weighted second moment is
        the loss Hessian.  Returns ``(grads (..., K, C), weights (..., K))``."""
        raise NotImplementedError

    def sample_grads(self, f, n_samples, rng):
        """Gradients of ``-log p(y|f)`` for labels drawn from the model itself.

        Shape ``(n_samples, ...f.shape)``.
        """
        raise NotImplementedError


class GaussianLoss(Loss):
    """Gaussian likelihood with fixed SPD covariance ``cov``."""

    kind = "gaussian"

    def __init__(self, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        self.cov = cov
        self.cov_chol = cholesky(cov)  # raises DefinitenessError if not SPD
        self.precision = symmetrize(np.linalg.inv(cov))
        self.precision_chol = cholesky(self.precision)
        self.C = cov.shape[0]

    @classmethod
    def isotropic(cls, C, variance=1.0):
        return cls(variance * np.eye(C))

    def value(self, f, y):
        r = np.asarray(y) - f
        return 0.5 * np.einsum("...i,ij,...j->...", r, self.precision, r)

    def log_likelihood(self, f, y):
        logdet = 2.0 * np.sum(np.log(np.diag(self.cov_chol)))
        return -self.value(f, y) - 0.5 * (self.C * np.log(2 * np.pi) + logdet)

    def grad(self, f, y):
        return (f - np.asarray(y)) @ self.precision

    def hessian(self, f):
        f = np.asarray(f)
        return np.broadcast_to(self.precision, f.shape[:-1] + self.precision.shape)

    def hessian_sqrt(self, f):
        f = np.asarray(f)
        L = self.precision_chol
        return np.broadcast_to(L, f.shape[:-1] + L.shape)

    def outcomes(self, f):
        # symmetric sigma points +-sqrt(C) L e_i reproduce the second moment exactly
        C = self.C
        pts = np.sqrt(C) * self.precision_chol.T
        grads = np.concatenate([pts, -pts], axis=0)
        f = np.asarray(f)
        grads = np.broadcast_to(grads, f.shape[:-1] + grads.shape)
        weights = np.full(f.shape[:-1] + (2 * C,), 1.0 / (2 * C))
        return grads, weights

    def sample_grads(self, f, n_samples, rng):
        f = np.asarray(f)
        z = rng.standard_normal((n_samples,) + f.shape)
        return z @ self.precision_chol.T


class CategoricalLoss(Loss):
    """Softmax cross-entropy; ``f`` are logits."""

    kind = "categorical"

    def value(self, f, y):
        y = np.asarray(y, dtype=np.int64)
        logp = log_softmax(f, axis=-1)
        return -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]

    def log_likelihood(self, f, y):
        return -self.value(f, y)

    def grad(self, f, y):
        y = np.asarray(y, dtype=np.int64)
        g = softmax(f, axis=-1)
        np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
        return g

    def hessian(self, f):
        p = softmax(f, axis=-1)
        return p[..., :, None] * np.eye(p.shape[-1]) - p[..., :, None] * p[..., None, :]

    def hessian_sqrt(self, f):
        # diag(p) - pp^T = sum_c p_c (e_c - p)(e_c - p)^T
        grads, weights = self.outcomes(f)
        cols = grads * np.sqrt(weights)[..., None]
        return np.swapaxes(cols, -1, -2)

    def outcomes(self, f):
        p = softmax(f, axis=-1)
        C = p.shape[-1]
        grads = p[..., None, :] - np.eye(C)
        return grads, p

    def sample_grads(self, f, n_samples, rng):
        p = softmax(np.asarray(f, dtype=np.float64), axis=-1)
        flat = p.reshape(-1, p.shape[-1])
        u = rng.random((n_samples, flat.shape[0], 1))
        cdf = np.cumsum(flat, axis=-1)
        cdf[:, -1] = 1.0
        y = np.minimum((u > cdf[None]).sum(-1), p.shape[-1] - 1)
        g = np.broadcast_to(flat, (n_samples,) + flat.shape).copy()
        np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
        return g.reshape((n_samples,) + p.shape)


def make_loss(kind, C=None, cov=None):
    if kind == "gaussian":
        if cov is None:
            cov = np.eye(C)
        return GaussianLoss(cov)
    if kind == "categorical":
        return CategoricalLoss()
    raise ValueError(f"unknown loss kind {kind!r}")
