"""Synthetic desk-scale tasks and model builders."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import net
from .losses import CategoricalLoss, GaussianLoss


@dataclass
class Task:
    name: str
    batch: net.Batch
    make_model: object  # zero-argument callable returning a fresh ModelSpec
    target: float


def random_spd(rng, C, jitter=0.5):
    M = rng.standard_normal((C, C))
    return M @ M.T / C + jitter * np.eye(C)


def deep_linear_model(rng, dims, setting=net.EXPAND, loss=None, c=None, aggregate_at=None,
                      bias=False):
    """Stack of ``DenseWS`` layers ``dims[0] -> ... -> dims[-1]``.

    In the reduce setting a :class:`ScaledSumAggregate` with scale ``c`` is
    inserted after layer ``aggregate_at`` (default: after the last layer).
    """
    layers = [net.DenseWS.init(rng, dims[i], dims[i + 1], bias) for i in range(len(dims) - 1)]
    if setting == net.REDUCE:
        pos = len(layers) if aggregate_at is None else aggregate_at
        layers.insert(pos, net.ScaledSumAggregate(c))
    loss = GaussianLoss(np.eye(dims[-1])) if loss is None else loss
    return net.ModelSpec(layers, loss, setting)


def deep_linear_regression(rng_data, rng_init, N=64, R=4, D=8, C=4, depth=3, hidden=8,
                           cond=10.0, target=1e-6):
    """Realisable regression with ill-conditioned inputs in the expand setting."""
    scales = np.logspace(0, -np.log10(cond), D)
    X = rng_data.standard_normal((N, R, D)) * scales
    dims = [D] + [hidden] * (depth - 1) + [C]
    teacher = deep_linear_model(rng_data, dims)
    Y, _ = net.forward(teacher, net.Batch(X, None, net.EXPAND))
    batch = net.Batch(X, Y, net.EXPAND)
    state = rng_init.bit_generator.state

    def make_model():
        rng_init.bit_generator.state = state
        return deep_linear_model(rng_init, dims)

    return Task("deep_linear_regression", batch, make_model, target)


def two_moons(rng, n, noise=0.1):
    y = rng.integers(0, 2, n)
    t = rng.uniform(0, np.pi, n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], 1),
                 np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    return x + noise * rng.standard_normal((n, 2)), y


def attention_classifier_model(rng, d_in=2, width=8, p=4, n_classes=2, scale=0.5):
    layers = [
        net.DenseWS.init(rng, d_in, width, bias=True),
        net.Nonlinearity("tanh"),
        net.SimplifiedSelfAttention.init(rng, width, p, width, scale=scale / np.sqrt(width)),
        net.ScaledSumAggregate(),
        net.DenseWS.init(rng, width, n_classes, bias=True),
    ]
    return net.ModelSpec(layers, CategoricalLoss(), net.REDUCE)


def attention_classification(rng_data, rng_init, N=64, R=4, token_noise=0.1, target=0.05):
    """Two-moons points, each seen as a set of ``R`` jittered copies (reduce setting)."""
    centre, y = two_moons(rng_data, N)
    X = centre[:, None, :] + token_noise * rng_data.standard_normal((N, R, 2))
    batch = net.Batch(X, y, net.REDUCE)
    state = rng_init.bit_generator.state

    def make_model():
        rng_init.bit_generator.state = state
        return attention_classifier_model(rng_init)

    return Task("attention_classification", batch, make_model, target)


def motif_graph(rng, label, n_motifs, d_v=3, d_e=2, d_u=1, noise=0.1):
    """Disjoint union of ``n_motifs`` connected node pairs.

    Class 0 pairs join two nodes of type 0; class 1 pairs join a type-0 and a
    type-1 node.  Node features are a noisy type one-hot plus a constant.
    """
    types = []
    receivers, senders = [], []
    for m in range(n_motifs):
        types += [0, 0] if label == 0 else [0, 1]
        receivers += [2 * m, 2 * m + 1]
        senders += [2 * m + 1, 2 * m]
    types = np.array(types)
    V = np.zeros((types.size, d_v))
    V[np.arange(types.size), types] = 1.0
    V[:, -1] = 1.0
    V += noise * rng.standard_normal(V.shape)
    E = np.ones((len(receivers), d_e)) + noise * rng.standard_normal((len(receivers), d_e))
    u = np.ones(d_u)
    return net.Graph(u, V, E, receivers, senders)


def graph_classifier_model(rng, d_u=1, d_v=3, d_e=2, hidden=(4, 4, 4), n_classes=2):
    block = net.GraphBlock.init(rng, d_u, d_v, d_e, out=hidden, bias=True, scale=0.3)
    layers = [block, net.GraphReadout(), net.DenseWS.init(rng, hidden[0], n_classes, bias=True)]
    return net.ModelSpec(layers, CategoricalLoss(), net.REDUCE)


def graph_classification(rng_data, rng_init, N=32, max_motifs=3, target=0.2):
    """Ragged batch of motif graphs; ``R_n`` varies with the motif count."""
    y = rng_data.integers(0, 2, N)
    graphs = [motif_graph(rng_data, int(label), int(rng_data.integers(1, max_motifs + 1)))
              for label in y]
    batch = net.Batch(graphs, y, net.REDUCE)
    state = rng_init.bit_generator.state

    def make_model():
        rng_init.bit_generator.state = state
        return graph_classifier_model(rng_init)

    return Task("graph_classification", batch, make_model, target)


@dataclass
class LinearGaussianTask:
    X: np.ndarray
    y: np.ndarray
    noise_var: float
    batch: net.Batch
    val_batch: object = None

    def make_model(self, W=None):
        D = self.X.shape[1]
        W = np.zeros((1, D)) if W is None else np.asarray(W, dtype=np.float64).reshape(1, D)
        return net.ModelSpec([net.DenseWS(W)], GaussianLoss(self.noise_var * np.eye(1)), net.EXPAND)

    def map_weights(self, delta):
        """Ridge solution of ``sum_n (y - x w)^2 / (2 s2) + delta/2 ||w||^2``."""
        X, s2 = self.X, self.noise_var
        H = X.T @ X / s2 + delta * np.eye(X.shape[1])
        return np.linalg.solve(H, X.T @ self.y / s2)

    def log_evidence(self, delta):
        """Exact ``log N(y; 0, s2 I + X X^T / delta)``."""
        X, y = self.X, self.y
        K = self.noise_var * np.eye(len(y)) + X @ X.T / delta
        sign, logdet = np.linalg.slogdet(K)
        return -0.5 * (y @ np.linalg.solve(K, y) + logdet + len(y) * np.log(2 * np.pi))

    def optimal_delta(self, lo=1e-6, hi=1e6):
        res = minimize_scalar(lambda s: -self.log_evidence(np.exp(s)),
                              bounds=(np.log(lo), np.log(hi)), method="bounded",
                              options={"xatol": 1e-10})
        return float(np.exp(res.x))


def linear_gaussian(rng, N=40, D=10, noise_std=0.5, weight_std=1.0, n_val=200):
    """Linear regression with Gaussian noise of known variance; one row per example."""
    w = weight_std * rng.standard_normal(D)
    X = rng.standard_normal((N, D))
    y = X @ w + noise_std * rng.standard_normal(N)
    Xv = rng.standard_normal((n_val, D))
    yv = Xv @ w + noise_std * rng.standard_normal(n_val)
    batch = net.Batch(X[:, None, :], y[:, None, None], net.EXPAND)
    val = net.Batch(Xv[:, None, :], yv[:, None, None], net.EXPAND)
    return LinearGaussianTask(X, y, noise_std**2, batch, val)
