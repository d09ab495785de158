"""Exact per-layer GGN / Fisher blocks used as ground truth for K-FAC.

Nothing here is Kronecker-factored: every block is assembled from full
per-example parameter Jacobians.  Parameters of a unit are ordered by the
column-major ``vec(W)``, so entry ``j * P_out + p`` belongs to ``W[p, j]``.
"""

from dataclasses import dataclass

import numpy as np

from . import net
from .losses import GaussianLoss, Loss, make_loss
from .tensor import symmetrize


@dataclass(frozen=True)
class LossHessian:
    """Hessians of the loss with respect to model outputs, ``(..., C, C)``."""

    matrices: np.ndarray
    kind: str


def loss_hessian(loss, f, cov=None):
    """Loss Hessian at outputs ``f``.

    ``loss`` is a :class:`~kfac_ws.losses.Loss` or a kind name
    (``"gaussian"`` with ``cov``, or ``"categorical"``).
    """
    f = np.asarray(f, dtype=np.float64)
    if not isinstance(loss, Loss):
        loss = make_loss(loss, C=f.shape[-1], cov=cov)
    return LossHessian(np.array(loss.hessian(f)), loss.kind)


def param_jacobian(jac, A):
    """Per-example Jacobian of the outputs w.r.t. ``vec(W)`` of one unit.

    ``jac`` is ``(R_out, C, R, P_out)`` from :func:`net.backward_jacobians`
    and ``A`` the ``(R, P_in)`` layer input.  Returns ``(R_out, C, P_in * P_out)``,
    i.e. ``J_r^T = sum_m a_m kron b_{r,m}``.
    """
    R_out, C, _, p_out = jac.shape
    return np.einsum("rcmp,mj->rcjp", jac, A).reshape(R_out, C, A.shape[-1] * p_out)


def _examples(tape, u):
    parts = tape.per_example(u)
    if isinstance(parts, np.ndarray):
        return [parts[n] for n in range(tape.n_examples)]
    return parts


def _outputs_list(outputs):
    return [outputs[n] for n in range(len(outputs))]


def analytic_param_jacobians(model, batch):
    """Per unit, per example parameter Jacobians from the analytic reverse sweep."""
    outputs, tape = net.forward(model, batch)
    jac = net.backward_jacobians(model, tape)
    out = []
    for u in range(model.n_units):
        A = _examples(tape, u)
        out.append([param_jacobian(jac[u][n], A[n]) for n in range(tape.n_examples)])
    return out, outputs


def fd_param_jacobians(model, batch, eps=1e-5):
    """Per unit, per example parameter Jacobians by central differences on ``vec(W)``."""
    units = model.units()
    out = []
    for unit in units:
        W0 = unit.W.copy()
        P = W0.size
        cols = []
        for j in range(P):
            e = np.zeros(P)
            e[j] = eps
            unit.W = W0 + e.reshape(W0.shape, order="F")
            fp, _ = net.forward(model, batch)
            unit.W = W0 - e.reshape(W0.shape, order="F")
            fm, _ = net.forward(model, batch)
            cols.append([(np.asarray(a) - np.asarray(b)) / (2 * eps) for a, b in zip(fp, fm)])
        unit.W = W0
        per_ex = [np.stack([cols[j][n] for j in range(P)], axis=-1) for n in range(batch.n)]
        out.append(per_ex)
    outputs, _ = net.forward(model, batch)
    return out, outputs


def _ggn_from_jacobians(model, jacobians, outputs):
    blocks = []
    for per_ex in jacobians:
        P = per_ex[0].shape[-1]
        G = np.zeros((P, P))
        for n, J in enumerate(per_ex):
            lam = model.loss.hessian(np.asarray(outputs[n]))
            G += np.einsum("rcP,rcd,rdQ->PQ", J, lam, J)
        blocks.append(symmetrize(G))
    return blocks


def exact_block_ggn(model, batch):
    """Exact block-diagonal GGN, one ``P x P`` matrix per unit.

    Sums ``J_r^T Lambda_r J_r`` over all examples and (in the expand setting)
    over all output rows.
    """
    if batch.setting != model.setting:
        raise net.ConfigurationError("batch setting does not match the model")
    jacobians, outputs = analytic_param_jacobians(model, batch)
    return _ggn_from_jacobians(model, jacobians, outputs)


def fd_block_ggn(model, batch, eps=1e-5):
    """Same as :func:`exact_block_ggn` but with finite-difference Jacobians."""
    jacobians, outputs = fd_param_jacobians(model, batch, eps)
    return _ggn_from_jacobians(model, jacobians, outputs)


def exact_block_fisher(model, batch):
    """Fisher blocks by exhaustive enumeration of the predictive distribution.

    Categorical outputs enumerate every class; Gaussian outputs use a
    symmetric point set with the exact second moment.
    """
    jacobians, outputs = analytic_param_jacobians(model, batch)
    blocks = []
    for per_ex in jacobians:
        P = per_ex[0].shape[-1]
        F = np.zeros((P, P))
        for n, J in enumerate(per_ex):
            grads, weights = model.loss.outcomes(np.asarray(outputs[n]))
            # rows of the expand setting are independent; enumerate each row separately
            gtheta = np.einsum("rcP,rkc->rkP", J, grads)
            F += np.einsum("rk,rkP,rkQ->PQ", weights, gtheta, gtheta)
        blocks.append(symmetrize(F))
    return blocks


def exact_block_fisher_mc_limit(model, batch, n_samples, rng=None):
    """Monte-Carlo Fisher blocks from ``n_samples`` label draws per example."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(0) if rng is None else rng
    jacobians, outputs = analytic_param_jacobians(model, batch)
    samples = [model.loss.sample_grads(np.asarray(outputs[n]), n_samples, rng)
               for n in range(batch.n)]
    blocks = []
    for per_ex in jacobians:
        P = per_ex[0].shape[-1]
        F = np.zeros((P, P))
        for n, J in enumerate(per_ex):
            g = np.einsum("rcP,src->sP", J, samples[n])
            F += g.T @ g
        blocks.append(symmetrize(F / n_samples))
    return blocks


def is_gaussian(model):
    return isinstance(model.loss, GaussianLoss)
