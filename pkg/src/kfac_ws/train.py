"""Preconditioned-gradient training and Laplace weight-decay selection."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kfac, net
from .tensor import sym_eig

SCHEDULES = ("constant", "cosine", "polynomial")
FLAVOURS = ("expand", "reduce", "gd")


class StaleFactorsError(RuntimeError):
    """Factors were used past their configured refresh interval."""


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.1
    damping: float = 1e-3
    factor_interval: int = 1
    precond_interval: int = 1
    ema_decay: float = 0.0
    schedule: str = "constant"
    warmup: int = 0
    total_steps: int = 1000
    end_factor: float = 0.0
    power: float = 1.0
    mc_samples: int = 1
    flavour: str = "expand"
    curvature: str = "mc"

    def __post_init__(self):
        if self.factor_interval < 1 or self.precond_interval < 1:
            raise net.ConfigurationError("update intervals must be >= 1")
        if not self.lr > 0:
            raise net.ConfigurationError("learning rate must be positive")
        if self.damping < 0:
            raise net.ConfigurationError("damping must be non-negative")
        if not 0 <= self.ema_decay < 1:
            raise net.ConfigurationError("EMA decay must lie in [0, 1)")
        if self.schedule not in SCHEDULES:
            raise net.ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.flavour not in FLAVOURS:
            raise net.ConfigurationError(f"unknown flavour {self.flavour!r}")
        if self.curvature not in ("mc", "ggn"):
            raise net.ConfigurationError(f"unknown curvature source {self.curvature!r}")
        if self.mc_samples < 1:
            raise net.ConfigurationError("mc_samples must be >= 1")


def lr_schedule(kind, t, lr, warmup=0, total=1, end_factor=0.0, power=1.0):
    """Learning rate at step ``t``.

    Linear warmup from 0 over ``warmup`` steps, then constant, cosine or
    polynomial decay to ``end_factor * lr`` at step ``total``.
    """
    if t < 0:
        raise ValueError("step index must be >= 0")
    if kind not in SCHEDULES:
        raise ValueError(f"unknown schedule {kind!r}")
    if warmup > 0 and t < warmup:
        return lr * t / warmup
    if kind == "constant":
        return lr
    span = max(total - warmup, 1)
    p = min(max(t - warmup, 0) / span, 1.0)
    if kind == "cosine":
        decay = 0.5 * (1.0 + math.cos(math.pi * p))
    else:
        decay = (1.0 - p) ** power
    return lr * (end_factor + (1.0 - end_factor) * decay)


def config_lr(config, t):
    return lr_schedule(config.schedule, t, config.lr, config.warmup, config.total_steps,
                       config.end_factor, config.power)


def step(params, grads, factors, config, t=0, factors_age=0, preconditioner=None):
    """One update ``theta - lr_t * (B + lam I)^-1 grad (A + lam I)^-1`` per weight.

    ``factors=None`` (or flavour ``"gd"``) gives plain gradient descent.
    ``factors`` must describe the curvature of the loss whose gradient is
    ``grads``.
    """
    lr = config_lr(config, t)
    if config.flavour == "gd" or (factors is None and preconditioner is None):
        directions = grads
    else:
        if factors_age >= config.factor_interval:
            raise StaleFactorsError(
                f"factors are {factors_age} steps old; refresh interval is {config.factor_interval}")
        if preconditioner is None:
            preconditioner = kfac.Preconditioner.build(factors, config.damping)
        directions = preconditioner.apply(grads)
    return [p - lr * d for p, d in zip(params, directions)]


def scale_to_mean(factors, n):
    """Factors of a summed loss turned into factors of the mean loss."""
    return [replace(f, B=f.B / n) for f in factors]


def curvature_backprops(model, tape, source="ggn", n_samples=1, rng=None):
    if source == "ggn":
        return kfac.ggn_backprops(model, tape)
    return kfac.mc_backprops(model, tape, n_samples, rng)


def mean_loss(model, batch):
    """Mean over examples of the per-example summed loss, forward pass only."""
    outputs, _ = net.forward(model, batch)
    y = batch.label_rows()
    if isinstance(outputs, np.ndarray):
        return float(np.mean(model.loss.value(outputs, y).sum(axis=-1)))
    return float(np.mean([model.loss.value(o, yy).sum() for o, yy in zip(outputs, y)]))


def weight_decay_grads(weights, deltas, n):
    return [d / n * W for W, d in zip(weights, deltas)]


@dataclass
class TrainResult:
    losses: list
    steps_to_target: object = None
    diverged: bool = False
    lr: float = 0.0


class Trainer:
    """Full-batch K-FAC (or gradient descent) on a model's mean loss.

    ``deltas`` adds a per-unit weight decay ``delta / (2N) ||W||^2``.
    """

    def __init__(self, model, config, rng=None, deltas=None):
        self.model = model
        self.config = config
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.deltas = None if deltas is None else np.asarray(deltas, dtype=np.float64)
        self.t = 0
        self.factors = None
        self.age = 0
        self.preconditioner = None

    def objective(self, batch):
        loss, grads, outputs, tape = net.loss_and_grads(self.model, batch)
        if self.deltas is not None:
            W = self.model.get_weights()
            loss += sum(d / (2 * batch.n) * np.sum(w**2) for w, d in zip(W, self.deltas))
            grads = [g + r for g, r in zip(grads, weight_decay_grads(W, self.deltas, batch.n))]
        return loss, grads, tape

    def refresh(self, tape, n):
        cfg = self.config
        bp = curvature_backprops(self.model, tape, cfg.curvature, cfg.mc_samples, self.rng)
        fresh = scale_to_mean(kfac.compute_factors(tape, bp, cfg.flavour), n)
        if cfg.ema_decay > 0:
            self.factors = kfac.ema_update(self.factors, fresh, cfg.ema_decay)
        else:
            self.factors = fresh
        self.age = 0

    def train_step(self, batch):
        """Take one step; returns the objective before the step."""
        cfg = self.config
        loss, grads, tape = self.objective(batch)
        if cfg.flavour != "gd":
            if self.t % cfg.factor_interval == 0 or self.factors is None:
                self.refresh(tape, batch.n)
            if self.t % cfg.precond_interval == 0 or self.preconditioner is None:
                self.preconditioner = kfac.Preconditioner.build(self.factors, cfg.damping)
        params = step(self.model.get_weights(), grads, self.factors, cfg, self.t,
                      self.age, self.preconditioner)
        self.model.set_weights(params)
        self.t += 1
        self.age += 1
        return loss

    def loss(self, batch):
        value = mean_loss(self.model, batch)
        if self.deltas is not None:
            W = self.model.get_weights()
            value += sum(d / (2 * batch.n) * np.sum(w**2) for w, d in zip(W, self.deltas))
        return value

    def run(self, batch, steps, target=None):
        """Train for ``steps`` steps; the trace holds the objective after each step."""
        losses = []
        for _ in range(steps):
            self.train_step(batch)
            value = self.loss(batch)
            losses.append(value)
            if not np.isfinite(value):
                return TrainResult(losses, None, True, self.config.lr)
            if target is not None and value <= target:
                return TrainResult(losses, len(losses), False, self.config.lr)
        return TrainResult(losses, None, False, self.config.lr)


def tune_lr(make_model, batch, config, lrs, steps, target, rng_factory=None):
    """Grid-search the learning rate; fewest steps to target wins, then lowest final loss."""
    best = None
    for lr in lrs:
        cfg = replace(config, lr=lr)
        rng = None if rng_factory is None else rng_factory()
        try:
            # a grid point that blows up is expected; it is simply skipped
            with np.errstate(over="ignore", invalid="ignore"):
                res = Trainer(make_model(), cfg, rng).run(batch, steps, target)
        except (np.linalg.LinAlgError, FloatingPointError):
            continue
        if res.diverged:
            continue
        final = res.losses[-1] if res.losses else np.inf
        key = (res.steps_to_target if res.steps_to_target is not None else np.inf, final)
        if best is None or key < best[0]:
            best = (key, res)
    return None if best is None else best[1]


@dataclass
class LaplaceState:
    """Per-unit prior precisions, factor eigendecompositions and the current
    log marginal likelihood estimate."""

    deltas: np.ndarray
    eigs: list
    log_marglik: float
    history: list = field(default_factory=list)
    aborted: bool = False

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if np.any(self.deltas <= 0):
            raise ValueError("prior precisions must be positive")


def factor_eigs(factors):
    return [(sym_eig(f.A), sym_eig(f.B)) for f in factors]


def kron_eigvals(eig_pair):
    """Eigenvalues of ``A kron B`` (negative round-off clipped to zero)."""
    ea, eb = eig_pair
    return np.outer(np.clip(ea.eigenvalues, 0, None), np.clip(eb.eigenvalues, 0, None)).ravel()


def kron_logdet(eig_pair, delta):
    """``log det(A kron B + delta I)`` from the two factors' spectra."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return float(np.sum(np.log(kron_eigvals(eig_pair) + delta)))


def log_likelihood(model, batch):
    outputs, _ = net.forward(model, batch)
    y = batch.label_rows()
    if isinstance(outputs, np.ndarray):
        return float(np.sum(model.loss.log_likelihood(outputs, y)))
    return float(sum(np.sum(model.loss.log_likelihood(o, yy)) for o, yy in zip(outputs, y)))


def laplace_factors(model, batch, flavour="expand"):
    """K-FAC factors of the summed-loss GGN with exact loss-Hessian backprops."""
    _, tape = net.forward(model, batch)
    return kfac.compute_factors(tape, kfac.ggn_backprops(model, tape), flavour)


def _marglik_terms(sqnorms, sizes, eigvals, deltas):
    """Delta-dependent part per unit: prior log density at theta minus half the log-det."""
    out = []
    for sq, P, lam, d in zip(sqnorms, sizes, eigvals, deltas):
        out.append(0.5 * P * math.log(d / (2 * math.pi)) - 0.5 * d * sq - 0.5 * np.sum(np.log(lam + d)))
    return np.array(out)


def laplace_log_marglik(model, batch, factors, deltas, eigs=None, log_lik=None):
    """Laplace estimate of ``log p(D | delta)`` around the current weights.

    ``log p(D|theta) + log p(theta|delta) - 1/2 log det(H + delta) + P/2 log 2 pi``
    with the GGN block of each unit replaced by ``A kron B``.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(deltas <= 0):
        raise ValueError("prior precisions must be positive")
    eigs = factor_eigs(factors) if eigs is None else eigs
    log_lik = log_likelihood(model, batch) if log_lik is None else log_lik
    W = model.get_weights()
    sizes = [w.size for w in W]
    terms = _marglik_terms([np.sum(w**2) for w in W], sizes, [kron_eigvals(e) for e in eigs], deltas)
    return float(log_lik + terms.sum() + 0.5 * sum(sizes) * math.log(2 * math.pi))


def marglik_select_decay(model, batch, factors, deltas, steps=10, max_halvings=30, state=None):
    """Ascend the Laplace marginal likelihood in ``log delta``, one scalar per unit.

    Each step moves along the gradient scaled by the local curvature of the
    (separable) objective and halves the step until the value does not drop.
    If the estimate is not finite the event is abandoned and ``deltas`` kept.
    Returns a :class:`LaplaceState`.
    """
    deltas = np.asarray(deltas, dtype=np.float64).copy()
    if np.any(deltas <= 0):
        raise ValueError("prior precisions must be positive")
    eigs = factor_eigs(factors)
    eigvals = [kron_eigvals(e) for e in eigs]
    W = model.get_weights()
    sqnorms = np.array([np.sum(w**2) for w in W])
    sizes = np.array([w.size for w in W])
    const = log_likelihood(model, batch) + 0.5 * sizes.sum() * math.log(2 * math.pi)

    def value(d):
        with np.errstate(all="ignore"):
            return const + _marglik_terms(sqnorms, sizes, eigvals, d).sum()

    def at(log_d):
        with np.errstate(over="ignore"):
            return value(np.exp(log_d))

    current = value(deltas)
    history = [(deltas.copy(), current)]
    if not np.isfinite(current):
        return LaplaceState(deltas, eigs, current, history, aborted=True)
    s = np.log(deltas)
    for _ in range(steps):
        d = np.exp(s)
        grad = np.empty_like(s)
        curv = np.empty_like(s)
        for i, lam in enumerate(eigvals):
            r = d[i] / (lam + d[i])
            grad[i] = 0.5 * (sizes[i] - d[i] * sqnorms[i] - np.sum(r))
            curv[i] = 0.5 * (d[i] * sqnorms[i] + np.sum(r * (1 - r)))
        direction = grad / np.maximum(curv, 1e-12)
        eta = 1.0
        for _ in range(max_halvings):
            cand = at(s + eta * direction)
            if np.isfinite(cand) and cand >= current:
                break
            eta *= 0.5
        else:
            break
        s = s + eta * direction
        current = cand
        history.append((np.exp(s), current))
        if np.max(np.abs(eta * direction)) < 1e-12:
            break
    out = LaplaceState(np.exp(s), eigs, current, history)
    if state is not None:
        out.history = state.history + history
    return out
