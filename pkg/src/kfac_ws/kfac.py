"""K-FAC-expand and K-FAC-reduce Kronecker factors for weight-sharing layers.

Both flavours consume the same two ingredients per unit, independent of the
setting the model is in:

* layer inputs ``a`` with all examples' rows concatenated, ``(rows, P_in)``,
  plus an example index per row;
* backpropagated vectors ``g`` of shape ``(K, rows, P_out)``, where ``K``
  counts the vectors pushed back per example (columns of a loss-Hessian
  square root, or Monte-Carlo samples).

The GGN block is approximated by ``A kron B``, ``A`` acting on the input
side.  ``B`` is a plain sum over examples; ``A`` carries the ``1/N`` (or
``1/(N R)``) normalisation.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve

from . import net
from .tensor import DefinitenessError, cholesky, kron, symmetrize

EXPAND = "expand"
REDUCE = "reduce"
REDUCE_RAGGED = "reduce_ragged"
FLAVOURS = (EXPAND, REDUCE)


@dataclass(frozen=True)
class KroneckerFactors:
    """Input factor ``A`` (``P_in x P_in``) and output factor ``B`` (``P_out x P_out``)."""

    A: np.ndarray
    B: np.ndarray
    flavour: str
    damping: float = 0.0
    ema_steps: int = 0

    @property
    def shape(self):
        return self.A.shape[0], self.B.shape[0]

    def dense(self):
        return kron_assemble(self)


def _onehot(index, n):
    M = np.zeros((n, index.size))
    M[index, np.arange(index.size)] = 1.0
    return M


def _uniform_size(index, n):
    """Common row count per example if ``index`` is the contiguous uniform layout."""
    if index is None:
        return None
    sizes = np.bincount(index, minlength=n)
    if index.size and np.all(sizes == sizes[0]) and np.all(np.diff(index) >= 0):
        return int(sizes[0])
    return None


def _group_sums(index, n, a, g, R=None):
    """Per-example row sums of ``a`` ``(N, P_in)`` and ``g`` ``(K, N, P_out)``.

    The third value holds the per-example row counts, or ``None`` when every
    example has the same count ``R``.
    """
    if R is None:
        R = _uniform_size(index, n)
    if R is not None:
        if R == 1:
            return a, g, None
        ones = np.ones(R)
        return ones @ a.reshape(n, R, -1), ones @ g.reshape(g.shape[0], n, R, -1), None
    M = _onehot(index, n)
    return M @ a, M @ g, np.bincount(index, minlength=n)


def _check(a, g, n, index):
    """Validate shapes; ``index=None`` means ``n`` equal contiguous groups."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    if a.shape[0] != g.shape[1]:
        raise net.GraphStructureError(
            f"row counts disagree: inputs {a.shape[0]}, backprops {g.shape[1]}")
    if index is None:
        if n < 1 or a.shape[0] % n:
            raise net.GraphStructureError(f"{a.shape[0]} rows cannot be split into {n} equal examples")
        return a, g, None, a.shape[0] // n
    index = np.asarray(index, dtype=np.int64)
    if index.size != a.shape[0]:
        raise net.GraphStructureError(f"index has {index.size} entries for {a.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise net.GraphStructureError(f"example index out of range for {n} examples")
    return a, g, index, None


def expand_factors(a, g, n_examples, index=None, scale="nr"):
    """K-FAC-expand: every row is treated as an independent example.

    ``scale="nr"`` divides ``A`` by the total row count ``sum_n R_n``;
    ``scale="n"`` divides by the number of examples instead.
    """
    if scale not in ("nr", "n"):
        raise ValueError(f"unknown expand scaling {scale!r}")
    a, g, index, _ = _check(a, g, n_examples, index)
    denom = a.shape[0] if scale == "nr" else n_examples
    A = a.T @ a / max(denom, 1)
    gf = g.reshape(-1, g.shape[-1])
    B = gf.T @ gf
    return KroneckerFactors(symmetrize(A), symmetrize(B), EXPAND)


def reduce_factors(a, g, n_examples, index=None):
    """K-FAC-reduce: mean of each example's input rows, sum of its backprop rows."""
    a, g, index, R = _check(a, g, n_examples, index)
    R = _uniform_size(index, n_examples) if R is None else R
    sa, sg, sizes = _group_sums(index, n_examples, a, g, R)
    if R is None:
        keep = sizes > 0
        a_mean = sa[keep] / sizes[keep, None]
    else:
        a_mean = sa if R == 1 else sa / R
    A = a_mean.T @ a_mean / n_examples
    gf = sg.reshape(-1, sg.shape[-1])
    B = gf.T @ gf
    return KroneckerFactors(symmetrize(A), symmetrize(B), REDUCE)


def reduce_factors_ragged(a, g, n_examples, index):
    """K-FAC-reduce for per-example sizes ``R_n``: both row sums are scaled by
    ``1/sqrt(R_n)``; examples with ``R_n = 0`` contribute nothing."""
    a, g, index, R = _check(a, g, n_examples, index)
    R = _uniform_size(index, n_examples) if R is None else R
    sa, sg, sizes = _group_sums(index, n_examples, a, g, R)
    if sizes is None:
        sizes = np.full(n_examples, R)
    scale = np.zeros(n_examples)
    scale[sizes > 0] = 1.0 / np.sqrt(sizes[sizes > 0])
    ha = sa * scale[:, None]
    hg = sg * scale[:, None]
    A = ha.T @ ha / n_examples
    gf = hg.reshape(-1, hg.shape[-1])
    B = gf.T @ gf
    return KroneckerFactors(symmetrize(A), symmetrize(B), REDUCE)


def _per_unit(tape, backprops, fn):
    return [fn(tape.inputs[u], backprops[u], tape.n_examples, tape.index[u])
            for u in range(len(tape.inputs))]


def kfac_expand_factors(tape, backprops, scale="nr"):
    return [expand_factors(tape.inputs[u], backprops[u], tape.n_examples, tape.index[u], scale)
            for u in range(len(tape.inputs))]


def kfac_reduce_factors(tape, backprops):
    return _per_unit(tape, backprops, reduce_factors)


def kfac_reduce_factors_ragged(tape, backprops):
    return _per_unit(tape, backprops, reduce_factors_ragged)


def compute_factors(tape, backprops, flavour, ragged=None, expand_scale="nr"):
    """Factors for every unit of a tape.

    ``ragged=None`` picks the ``1/sqrt(R_n)`` reduce variant automatically
    when a unit's example sizes differ.
    """
    if flavour == EXPAND:
        return kfac_expand_factors(tape, backprops, expand_scale)
    if flavour != REDUCE:
        raise ValueError(f"unknown flavour {flavour!r}")
    out = []
    for u in range(len(tape.inputs)):
        use_ragged = (not tape.uniform(u)) if ragged is None else ragged
        fn = reduce_factors_ragged if use_ragged else reduce_factors
        out.append(fn(tape.inputs[u], backprops[u], tape.n_examples, tape.index[u]))
    return out


def ggn_backprops(model, tape):
    """Backpropagated columns of the loss-Hessian square root, per unit.

    With these, ``B`` reproduces the exact ``b Lambda b^T`` sums of the GGN.
    """
    outputs = tape.outputs
    loss = model.loss
    if tape.batched:
        N, R_out, C = outputs.shape
        L = loss.hessian_sqrt(outputs)
        k = L.shape[-1]
        eye = np.eye(R_out)
        cot = np.einsum("nrcj,rs->rjnsc", L, eye).reshape(R_out * k, N, R_out, C)
        return net.backprop(model, tape, cot)
    cots = []
    for out in outputs:
        out = np.asarray(out)
        R_out, C = out.shape
        L = loss.hessian_sqrt(out)
        k = L.shape[-1]
        cots.append(np.einsum("rcj,rs->rjsc", L, np.eye(R_out)).reshape(R_out * k, R_out, C))
    return net.backprop(model, tape, cots)


def mc_output_grads(outputs, loss, n_samples=1, rng=None):
    """Gradients of ``-log p(y|f)`` at labels sampled from the model, scaled by
    ``1/sqrt(n_samples)`` so that outer products average over samples."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if not hasattr(loss, "sample_grads"):
        raise net.CapabilityError(f"cannot sample from loss {loss!r}")
    rng = np.random.default_rng() if rng is None else rng
    if isinstance(outputs, np.ndarray):
        return loss.sample_grads(outputs, n_samples, rng) / np.sqrt(n_samples)
    return [loss.sample_grads(np.asarray(o), n_samples, rng) / np.sqrt(n_samples) for o in outputs]


def mc_backprops(model, tape, n_samples=1, rng=None):
    """Monte-Carlo Fisher backprops: one reverse sweep per sampled label set."""
    grads = mc_output_grads(tape.outputs, model.loss, n_samples, rng)
    if not tape.batched and isinstance(grads, np.ndarray):
        grads = [grads[:, n] for n in range(tape.n_examples)]
    return net.backprop(model, tape, grads)


def damp(factors, lam):
    """Add ``lam`` to the diagonal of both factors."""
    if lam < 0:
        raise ValueError("damping must be non-negative")
    if isinstance(factors, (list, tuple)):
        return [damp(f, lam) for f in factors]
    return replace(
        factors,
        A=factors.A + lam * np.eye(factors.A.shape[0]),
        B=factors.B + lam * np.eye(factors.B.shape[0]),
        damping=factors.damping + lam,
    )


def ema_update(running, fresh, decay):
    """``running <- decay * running + (1 - decay) * fresh`` for both factors.

    ``running=None`` starts the average at ``fresh``.  Each mini-batch's
    factors carry their own normalisation; no re-weighting by batch size.
    """
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    if isinstance(fresh, (list, tuple)):
        running = [None] * len(fresh) if running is None else running
        return [ema_update(r, f, decay) for r, f in zip(running, fresh)]
    if running is None:
        return replace(fresh, ema_steps=1)
    if running.flavour != fresh.flavour:
        raise ValueError("cannot average factors of different flavours")
    return replace(
        running,
        A=decay * running.A + (1 - decay) * fresh.A,
        B=decay * running.B + (1 - decay) * fresh.B,
        ema_steps=running.ema_steps + 1,
    )


@dataclass
class Preconditioner:
    """Cholesky factors of ``A + lam I`` and ``B + lam I`` for each unit."""

    chol_A: list
    chol_B: list
    damping: float
    flavour: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, factors, lam):
        if lam < 0:
            raise ValueError("damping must be non-negative")
        cA, cB = [], []
        for f in factors:
            try:
                cA.append(cholesky(f.A + lam * np.eye(f.A.shape[0])))
                cB.append(cholesky(f.B + lam * np.eye(f.B.shape[0])))
            except DefinitenessError as err:
                raise DefinitenessError(err.pivot, f"damped factor not positive definite "
                                        f"(pivot {err.pivot}); increase the damping") from err
        return cls(cA, cB, lam, factors[0].flavour if factors else "")

    def apply_unit(self, u, grad_W):
        X = cho_solve((self.chol_B[u], True), grad_W)
        return cho_solve((self.chol_A[u], True), X.T).T

    def apply(self, grads):
        return [self.apply_unit(u, g) for u, g in enumerate(grads)]


def precondition(grad_W, factors, lam):
    """``(B + lam I)^-1 grad_W (A + lam I)^-1`` without forming the Kronecker product."""
    return Preconditioner.build([factors], lam).apply_unit(0, np.asarray(grad_W, dtype=np.float64))


def kron_assemble(factors):
    """Dense ``A kron B`` in the column-major ``vec(W)`` parameter order."""
    if isinstance(factors, (list, tuple)):
        return [kron_assemble(f) for f in factors]
    return kron(factors.A, factors.B)


def factors_to_text(factors):
    """Plain-text dump: a header per unit, then each matrix as
    ``rows cols`` followed by one row of decimals per line."""
    lines = ["kfac-factors v1", f"units {len(factors)}"]
    for u, f in enumerate(factors):
        lines.append(f"unit {u} flavour {f.flavour} damping {f.damping!r} ema_steps {f.ema_steps}")
        for name, M in (("A", f.A), ("B", f.B)):
            lines.append(f"{name} {M.shape[0]} {M.shape[1]}")
            lines.extend(" ".join(repr(float(x)) for x in row) for row in M)
    return "\n".join(lines) + "\n"


def factors_from_text(text):
    it = iter(text.splitlines())
    if next(it).strip() != "kfac-factors v1":
        raise ValueError("not a kfac-factors v1 document")
    n_units = int(next(it).split()[1])
    out = []
    for _ in range(n_units):
        head = next(it).split()
        flavour, damping, ema = head[3], float(head[5]), int(head[7])
        mats = {}
        for _ in range(2):
            name, r, c = next(it).split()
            mats[name] = np.array([[float(x) for x in next(it).split()] for _ in range(int(r))]).reshape(int(r), int(c))
        out.append(KroneckerFactors(mats["A"], mats["B"], flavour, damping, ema))
    return out
