"""Linear weight-sharing layers, a tape of layer inputs, and analytic reverse sweeps.

A model is an ordered list of layers acting on per-example states.  Dense
states have shape ``(..., R, D)``: ``R`` rows along the weight-sharing axis
and ``D`` features.  Graph states are :class:`Graph` tuples.

Every weight matrix ``W`` of shape ``(P_out, P_in)`` is applied as
``S = A @ W.T`` to an input ``A`` of shape ``(R, P_in)``; such an
application is a *unit*.  The tape stores ``A`` and ``S`` of every unit.
Biases are folded into ``W`` as a last column multiplied by an appended
constant-1 input column.

Reverse sweeps are linear in the output cotangent, so they accept any
number of leading "probe" axes ``K`` in front of the state axes.  A probe
per output coordinate yields the full output Jacobian with respect to every
pre-activation row.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .losses import Loss
from .tensor import DimensionError


class CapabilityError(NotImplementedError):
    """Requested operation is not supported for a layer or loss kind."""


class GraphStructureError(ValueError):
    """Graph index vectors are inconsistent with the feature arrays."""


class ConfigurationError(ValueError):
    """Model, batch and setting do not fit together."""


EXPAND = "expand"
REDUCE = "reduce"


def _T(x):
    return np.swapaxes(x, -1, -2)


class Dense:
    """One weight matrix applied row-wise: ``S = [A, 1] @ W.T``."""

    def __init__(self, W, bias=False):
        self.W = np.array(W, dtype=np.float64)
        self.bias = bias

    @property
    def p_out(self):
        return self.W.shape[0]

    @property
    def p_in(self):
        return self.W.shape[1]

    def inputs(self, x):
        if not self.bias:
            return x
        ones = np.ones(x.shape[:-1] + (1,))
        return np.concatenate([x, ones], axis=-1)

    def apply(self, x):
        a = self.inputs(x)
        return a, a @ self.W.T

    def input_grad(self, gS):
        g = gS @ self.W
        return g[..., :-1] if self.bias else g


def _init(rng, p_out, p_in, bias, scale=None):
    scale = 1.0 / np.sqrt(p_in) if scale is None else scale
    W = scale * rng.standard_normal((p_out, p_in + int(bias)))
    return Dense(W, bias)


class Layer:
    kind = "layer"
    reduces = False

    def units(self):
        """Dense sub-layers owning trainable weights, in a fixed order."""
        return []

    def unit_names(self):
        return []

    def forward(self, x, perturb=None):
        """Return ``(y, ctx)``; ``perturb`` maps local unit index to an
        additive offset on that unit's pre-activation."""
        raise NotImplementedError

    def backward(self, ctx, g):
        """Return ``(g_x, [g_S per unit])``."""
        raise NotImplementedError

    def taped(self, ctx):
        """``[(A, S) per unit]`` captured during ``forward``."""
        return []


def _add(S, perturb, k):
    if perturb is not None and k in perturb:
        return S + perturb[k]
    return S


class DenseWS(Layer):
    """Linear layer shared across all rows of its input."""

    kind = "dense"

    def __init__(self, W, bias=False):
        self.lin = Dense(W, bias)

    @classmethod
    def init(cls, rng, p_in, p_out, bias=False, scale=None):
        return cls(_init(rng, p_out, p_in, bias, scale).W, bias)

    def units(self):
        return [self.lin]

    def unit_names(self):
        return ["W"]

    def forward(self, x, perturb=None):
        a, s = self.lin.apply(x)
        s = _add(s, perturb, 0)
        return s, (a, s)

    def backward(self, ctx, g):
        return self.lin.input_grad(g), [g]

    def taped(self, ctx):
        return [ctx]


class Nonlinearity(Layer):
    kind = "nonlinearity"

    def __init__(self, fn="tanh"):
        if fn not in ("tanh", "relu", "identity"):
            raise CapabilityError(f"unknown nonlinearity {fn!r}")
        self.fn = fn

    def forward(self, x, perturb=None):
        if self.fn == "tanh":
            y = np.tanh(x)
        elif self.fn == "relu":
            y = np.maximum(x, 0.0)
        else:
            y = x
        return y, (x, y)

    def backward(self, ctx, g):
        x, y = ctx
        if self.fn == "tanh":
            return g * (1.0 - y**2), []
        if self.fn == "relu":
            return g * (x > 0), []
        return g, []


class ScaledSumAggregate(Layer):
    """``z(S) = c * sum_r s_r``; output keeps a row axis of length 1."""

    kind = "scaled_sum"
    reduces = True

    def __init__(self, c=None):
        if c is not None and c == 0:
            raise ValueError("scale c must be non-zero")
        self.c = c  # None means 1/R (mean), resolved per input

    def scale(self, R):
        return 1.0 / R if self.c is None else self.c

    def forward(self, x, perturb=None):
        R = x.shape[-2]
        return self.scale(R) * x.sum(axis=-2, keepdims=True), R

    def backward(self, ctx, g):
        R = ctx
        gx = self.scale(R) * g
        return np.broadcast_to(gx, gx.shape[:-2] + (R, gx.shape[-1])), []


class WeightedSumAggregate(Layer):
    """``z(S) = sum_r w_r s_r`` with fixed per-row weights."""

    kind = "weighted_sum"
    reduces = True

    def __init__(self, weights):
        self.w = np.asarray(weights, dtype=np.float64)

    def forward(self, x, perturb=None):
        if x.shape[-2] != self.w.size:
            raise ConfigurationError(f"weighted sum expects {self.w.size} rows, got {x.shape[-2]}")
        return np.einsum("r,...rp->...p", self.w, x)[..., None, :], None

    def backward(self, ctx, g):
        return self.w[:, None] * g, []


def aggregate_scaled_sum(S, c):
    """Column-wise sum of the rows of ``S`` scaled by ``c``."""
    if c == 0:
        raise ValueError("scale c must be non-zero")
    return c * np.asarray(S, dtype=np.float64).sum(axis=0)


class SimplifiedSelfAttention(Layer):
    """Softmax-free self-attention ``(X Wq^T)(X Wk^T)^T (X Wv^T)``."""

    kind = "simplified_attention"

    def __init__(self, Wq, Wk, Wv, bias=False):
        self.q = Dense(Wq, bias)
        self.k = Dense(Wk, bias)
        self.v = Dense(Wv, bias)

    @classmethod
    def init(cls, rng, d_in, p, c, bias=False, scale=None):
        q = _init(rng, p, d_in, bias, scale)
        k = _init(rng, p, d_in, bias, scale)
        v = _init(rng, c, d_in, bias, scale)
        return cls(q.W, k.W, v.W, bias)

    def units(self):
        return [self.q, self.k, self.v]

    def unit_names(self):
        return ["Wq", "Wk", "Wv"]

    def scores(self, SQ, SK):
        return SQ @ _T(SK)

    def forward(self, x, perturb=None):
        aq, SQ = self.q.apply(x)
        ak, SK = self.k.apply(x)
        av, SV = self.v.apply(x)
        SQ, SK, SV = _add(SQ, perturb, 0), _add(SK, perturb, 1), _add(SV, perturb, 2)
        M = _T(SK) @ SV
        return SQ @ M, (aq, ak, av, SQ, SK, SV, M)

    def backward(self, ctx, g):
        aq, ak, av, SQ, SK, SV, M = ctx
        gQ = g @ _T(M)
        gM = _T(SQ) @ g
        gK = SV @ _T(gM)
        gV = SK @ gM
        gx = self.q.input_grad(gQ) + self.k.input_grad(gK) + self.v.input_grad(gV)
        return gx, [gQ, gK, gV]

    def taped(self, ctx):
        aq, ak, av, SQ, SK, SV, _ = ctx
        return [(aq, SQ), (ak, SK), (av, SV)]


class SoftmaxSelfAttention(SimplifiedSelfAttention):
    """``softmax_row(S_Q S_K^T) S_V``; used for toy training only."""

    kind = "softmax_attention"

    def forward(self, x, perturb=None):
        aq, SQ = self.q.apply(x)
        ak, SK = self.k.apply(x)
        av, SV = self.v.apply(x)
        SQ, SK, SV = _add(SQ, perturb, 0), _add(SK, perturb, 1), _add(SV, perturb, 2)
        att = softmax(SQ @ _T(SK), axis=-1)
        return att @ SV, (aq, ak, av, SQ, SK, SV, att)

    def backward(self, ctx, g):
        aq, ak, av, SQ, SK, SV, att = ctx
        g_att = g @ _T(SV)
        gV = _T(att) @ g
        g_log = att * (g_att - np.sum(g_att * att, axis=-1, keepdims=True))
        gQ = g_log @ SK
        gK = _T(g_log) @ SQ
        gx = self.q.input_grad(gQ) + self.k.input_grad(gK) + self.v.input_grad(gV)
        return gx, [gQ, gK, gV]


def _unfold_index(c_in, h, w, k):
    """Gather map from a zero-padded flat state to the unfolded matrix.

    The state is ``(H*W, C_in)`` flattened row-major; index ``H*W*C_in``
    points at an appended zero.
    """
    if k % 2 == 0:
        raise CapabilityError("even kernel sizes have no centre under same-padding")
    pad = k // 2
    zero = h * w * c_in
    idx = np.full((h * w, c_in * k * k), zero, dtype=np.int64)
    for i in range(h):
        for j in range(w):
            row = i * w + j
            for c in range(c_in):
                for ki in range(k):
                    for kj in range(k):
                        si, sj = i + ki - pad, j + kj - pad
                        if 0 <= si < h and 0 <= sj < w:
                            idx[row, (c * k + ki) * k + kj] = (si * w + sj) * c_in + c
    return idx


def conv_unfold(image, k):
    """Unfold a ``C_in x H x W`` image into the ``HW x C_in K^2`` patch matrix.

    Stride 1 and same-padding; out-of-image entries are zero.  Row
    ``i * W + j`` holds the patch centred at pixel ``(i, j)`` with columns
    ordered ``(channel, kernel row, kernel col)``, matching a
    ``C_out x C_in x K x K`` weight reshaped to ``C_out x C_in K^2``.
    """
    image = np.asarray(image, dtype=np.float64)
    c_in, h, w = image.shape
    idx = _unfold_index(c_in, h, w, k)
    state = image.reshape(c_in, h * w).T.reshape(-1)
    return np.append(state, 0.0)[idx]


class Conv2dUnfold(Layer):
    """Same-padded stride-1 convolution as a weight-sharing layer over ``R = H*W``.

    Input and output states are ``(H*W, channels)`` with spatial sites in
    row-major order.
    """

    kind = "conv2d"

    def __init__(self, W, c_in, h, w, k, bias=False):
        self.c_in, self.h, self.w, self.k = c_in, h, w, k
        self.lin = Dense(W, bias)
        if self.lin.p_in - int(bias) != c_in * k * k:
            raise ConfigurationError("conv weight width must equal C_in * K^2")
        self._idx = _unfold_index(c_in, h, w, k)
        n = h * w * c_in
        M = np.zeros((self._idx.size, n + 1))
        M[np.arange(self._idx.size), self._idx.ravel()] = 1.0
        self._fold = M[:, :n]

    @classmethod
    def init(cls, rng, c_in, c_out, h, w, k, bias=False, scale=None):
        return cls(_init(rng, c_out, c_in * k * k, bias, scale).W, c_in, h, w, k, bias)

    def units(self):
        return [self.lin]

    def unit_names(self):
        return ["W"]

    def unfold(self, x):
        flat = x.reshape(x.shape[:-2] + (-1,))
        padded = np.concatenate([flat, np.zeros(flat.shape[:-1] + (1,))], axis=-1)
        return padded[..., self._idx]

    def forward(self, x, perturb=None):
        a, s = self.lin.apply(self.unfold(x))
        s = _add(s, perturb, 0)
        return s, (a, s)

    def backward(self, ctx, g):
        gU = self.lin.input_grad(g)
        gflat = gU.reshape(gU.shape[:-2] + (-1,)) @ self._fold
        return gflat.reshape(gU.shape[:-2] + (self.h * self.w, self.c_in)), [g]

    def taped(self, ctx):
        return [ctx]


@dataclass
class Graph:
    """One graph: global features ``u``, node features ``V``, edge features
    ``E`` and receiver / sender node indices per edge."""

    u: np.ndarray
    V: np.ndarray
    E: np.ndarray
    receivers: np.ndarray
    senders: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.E = np.asarray(self.E, dtype=np.float64)
        self.receivers = np.asarray(self.receivers, dtype=np.int64).reshape(-1)
        self.senders = np.asarray(self.senders, dtype=np.int64).reshape(-1)
        if self.V.ndim != 2 or self.E.ndim != 2:
            raise GraphStructureError("node and edge features must be 2-d (rows x features)")
        n_v, n_e = self.V.shape[0], self.E.shape[0]
        if len(self.receivers) != n_e or len(self.senders) != n_e:
            raise GraphStructureError("one receiver and one sender index per edge required")
        for idx in (self.receivers, self.senders):
            if idx.size and (idx.min() < 0 or idx.max() >= n_v):
                raise GraphStructureError(f"edge index out of range for {n_v} nodes")

    @property
    def n_nodes(self):
        return self.V.shape[0]

    @property
    def n_edges(self):
        return self.E.shape[0]

    def incidence(self, which="receivers"):
        idx = getattr(self, which)
        M = np.zeros((self.n_nodes, self.n_edges))
        M[idx, np.arange(self.n_edges)] = 1.0
        return M


@dataclass
class GraphCotangent:
    u: np.ndarray
    V: np.ndarray
    E: np.ndarray


class GraphBlock(Layer):
    """GraphNetwork block with linear edge, node and global updates and sum
    aggregations.

    Weight shapes: ``We`` is ``d_e' x (d_e + 2 d_v + d_u)``, ``Wv`` is
    ``d_v' x (d_v + d_e' + d_u)``, ``Wu`` is ``d_u' x (d_u + d_v' + d_e')``.
    """

    kind = "graph_block"

    def __init__(self, We, Wv, Wu, bias=False):
        self.e = Dense(We, bias)
        self.v = Dense(Wv, bias)
        self.glob = Dense(Wu, bias)

    @classmethod
    def init(cls, rng, d_u, d_v, d_e, out=None, bias=False, scale=None):
        du2, dv2, de2 = out or (d_u, d_v, d_e)
        e = _init(rng, de2, d_e + 2 * d_v + d_u, bias, scale)
        v = _init(rng, dv2, d_v + de2 + d_u, bias, scale)
        g = _init(rng, du2, d_u + dv2 + de2, bias, scale)
        return cls(e.W, v.W, g.W, bias)

    def units(self):
        return [self.e, self.v, self.glob]

    def unit_names(self):
        return ["We", "Wv", "Wu"]

    def forward(self, graph, perturb=None):
        g = graph
        n_e, n_v = g.n_edges, g.n_nodes
        Rm, Sm = g.incidence("receivers"), g.incidence("senders")
        u_e = np.broadcast_to(g.u, (n_e, g.u.size))
        ae, E2 = self.e.apply(np.concatenate([g.E, _T(Rm) @ g.V, _T(Sm) @ g.V, u_e], axis=-1))
        E2 = _add(E2, perturb, 0)
        agg_e = Rm @ E2
        u_v = np.broadcast_to(g.u, (n_v, g.u.size))
        av, V2 = self.v.apply(np.concatenate([g.V, agg_e, u_v], axis=-1))
        V2 = _add(V2, perturb, 1)
        au, u2 = self.glob.apply(np.concatenate([g.u, V2.sum(0), E2.sum(0)])[None, :])
        u2 = _add(u2, perturb, 2)
        out = Graph(u2[0], V2, E2, g.receivers, g.senders)
        return out, (g, Rm, Sm, ae, E2, av, V2, au, u2)

    def backward(self, ctx, gout):
        g, Rm, Sm, ae, E2, av, V2, au, u2 = ctx
        d_u, d_v, d_e = g.u.size, g.V.shape[1], g.E.shape[1]
        de2, dv2 = E2.shape[1], V2.shape[1]
        gS_u = gout.u[..., None, :]
        ga_u = self.glob.input_grad(gS_u)[..., 0, :]
        gu_in = ga_u[..., :d_u]
        g_vbar = ga_u[..., d_u:d_u + dv2]
        g_ebar = ga_u[..., d_u + dv2:]

        gS_v = gout.V + g_vbar[..., None, :]
        ga_v = self.v.input_grad(gS_v)
        gV_in = ga_v[..., :d_v]
        g_agg = ga_v[..., d_v:d_v + de2]
        gu_in = gu_in + ga_v[..., d_v + de2:].sum(axis=-2)

        gS_e = gout.E + g_ebar[..., None, :] + _T(Rm) @ g_agg
        ga_e = self.e.input_grad(gS_e)
        gE_in = ga_e[..., :d_e]
        gV_in = gV_in + Rm @ ga_e[..., d_e:d_e + d_v] + Sm @ ga_e[..., d_e + d_v:d_e + 2 * d_v]
        gu_in = gu_in + ga_e[..., d_e + 2 * d_v:].sum(axis=-2)
        return GraphCotangent(gu_in, gV_in, gE_in), [gS_e, gS_v, gS_u]

    def taped(self, ctx):
        g, Rm, Sm, ae, E2, av, V2, au, u2 = ctx
        return [(ae, E2), (av, V2), (au, u2)]


def graph_block_forward(block, graph):
    """Run one GraphNetwork block on a single graph and return the updated graph."""
    return block.forward(graph)[0]


class GraphReadout(Layer):
    """Global features of a graph as a one-row dense state."""

    kind = "graph_readout"
    reduces = True

    def forward(self, graph, perturb=None):
        return graph.u[None, :], graph

    def backward(self, ctx, g):
        graph = ctx
        lead = g.shape[:-2]
        return GraphCotangent(
            g[..., 0, :],
            np.zeros(lead + graph.V.shape),
            np.zeros(lead + graph.E.shape),
        ), []


@dataclass
class ModelSpec:
    """Layers, likelihood and the weight-sharing setting of the loss."""

    layers: list
    loss: Loss
    setting: str = EXPAND

    def __post_init__(self):
        if self.setting not in (EXPAND, REDUCE):
            raise ConfigurationError(f"unknown setting {self.setting!r}")
        n_reduce = sum(layer.reduces for layer in self.layers)
        if self.setting == REDUCE and n_reduce != 1:
            raise ConfigurationError("a reduce model needs exactly one aggregation over the shared axis")
        if self.setting == EXPAND and n_reduce != 0:
            raise ConfigurationError("an expand model must not aggregate the shared axis")

    def unit_index(self):
        """``[(layer_idx, local_idx, name)]`` for every weight matrix."""
        out = []
        for li, layer in enumerate(self.layers):
            for k, name in enumerate(layer.unit_names()):
                out.append((li, k, f"{li}.{layer.kind}.{name}"))
        return out

    def units(self):
        return [u for layer in self.layers for u in layer.units()]

    @property
    def n_units(self):
        return len(self.units())

    def unit_names(self):
        return [name for _, _, name in self.unit_index()]

    def get_weights(self):
        return [u.W.copy() for u in self.units()]

    def set_weights(self, weights):
        for u, W in zip(self.units(), weights):
            if W.shape != u.W.shape:
                raise ConfigurationError(f"weight shape {W.shape} != {u.W.shape}")
            u.W = np.array(W, dtype=np.float64)

    @property
    def is_graph(self):
        return any(isinstance(layer, (GraphBlock, GraphReadout)) for layer in self.layers)


@dataclass
class Batch:
    """Inputs, labels and per-example shared-axis sizes.

    Dense inputs are ``(N, R, D)`` arrays; graph inputs are lists of
    :class:`Graph`.  Expand labels have one row per output row, reduce labels
    one per example.
    """

    inputs: object
    labels: object = None
    setting: str = EXPAND

    @property
    def n(self):
        return len(self.inputs)

    @property
    def sizes(self):
        if isinstance(self.inputs, np.ndarray):
            return np.full(self.n, self.inputs.shape[1], dtype=np.int64)
        return np.array([g.n_nodes for g in self.inputs], dtype=np.int64)

    def label_rows(self):
        """Labels reshaped to ``(N, R_out, ...)``."""
        y = self.labels
        if y is None:
            return None
        y = np.asarray(y)
        if self.setting == REDUCE:
            return y[:, None, ...]
        return y

    def subset(self, idx):
        idx = np.asarray(idx)
        if isinstance(self.inputs, np.ndarray):
            inputs = self.inputs[idx]
        else:
            inputs = [self.inputs[i] for i in idx]
        labels = None if self.labels is None else np.asarray(self.labels)[idx]
        return Batch(inputs, labels, self.setting)


@dataclass
class Tape:
    """Per-unit layer inputs ``A`` and pre-activations ``S``.

    Rows of all examples are concatenated along the shared axis;
    ``index[u]`` maps every row of unit ``u`` to its example.
    """

    inputs: list
    preacts: list
    index: list
    n_examples: int
    outputs: object = None
    ctx: list = field(default_factory=list, repr=False)
    batched: bool = True

    def sizes(self, u):
        return np.bincount(self.index[u], minlength=self.n_examples)

    def uniform(self, u):
        s = self.sizes(u)
        return bool(np.all(s == s[0]))

    def per_example(self, u, arr=None):
        """Split a row-concatenated array of unit ``u`` into examples; a
        3-d array ``(N, R, P)`` is returned when all sizes agree."""
        arr = self.inputs[u] if arr is None else arr
        sizes = self.sizes(u)
        if np.all(sizes == sizes[0]):
            return arr.reshape(arr.shape[:-2] + (self.n_examples, sizes[0], arr.shape[-1]))
        splits = np.cumsum(sizes)[:-1]
        return np.split(arr, splits, axis=-2)


def _collect(model, x, perturb=None):
    ctxs = []
    unit_perturb = _unit_perturb(model, perturb)
    for li, layer in enumerate(model.layers):
        x, ctx = layer.forward(x, unit_perturb.get(li))
        ctxs.append(ctx)
    return x, ctxs


def _unit_perturb(model, perturb):
    out = {}
    if not perturb:
        return out
    index = model.unit_index()
    for u, delta in perturb.items():
        li, k, _ = index[u]
        out.setdefault(li, {})[k] = delta
    return out


def _check_widths(model, batch):
    if isinstance(batch.inputs, np.ndarray):
        if batch.inputs.ndim != 3:
            raise ConfigurationError("dense inputs must be (N, R, D)")
        first = model.layers[0]
        units = first.units()
        if units and not isinstance(first, Conv2dUnfold):
            expected = units[0].p_in - int(units[0].bias)
            if batch.inputs.shape[-1] != expected:
                raise DimensionError(
                    f"input width {batch.inputs.shape[-1]} does not match layer width {expected}")


def forward(model, batch, perturb=None):
    """Run the model and record the tape.

    Returns ``(outputs, tape)``; ``outputs`` has shape ``(N, R_out, C)``
    (``R_out = 1`` in the reduce setting).
    """
    if batch.setting != model.setting:
        raise ConfigurationError(f"batch is {batch.setting} but model is {model.setting}")
    _check_widths(model, batch)
    n_units = model.n_units
    if isinstance(batch.inputs, np.ndarray):
        try:
            out, ctxs = _collect(model, batch.inputs, perturb)
        except ValueError as err:
            if isinstance(err, (ConfigurationError, DimensionError)):
                raise
            raise DimensionError(f"width mismatch: {err}") from err
        inputs, preacts, index = [], [], []
        N = batch.n
        for layer, ctx in zip(model.layers, ctxs):
            for a, s in layer.taped(ctx):
                R = a.shape[-2]
                inputs.append(a.reshape(N * R, a.shape[-1]))
                preacts.append(s.reshape(N * R, s.shape[-1]))
                index.append(np.repeat(np.arange(N), R))
        return out, Tape(inputs, preacts, index, N, out, ctxs, True)

    outs, all_ctx = [], []
    per_unit_a = [[] for _ in range(n_units)]
    per_unit_s = [[] for _ in range(n_units)]
    for n, graph in enumerate(batch.inputs):
        p = None if perturb is None else {u: d[n] for u, d in perturb.items()}
        out, ctxs = _collect(model, graph, p)
        outs.append(out)
        all_ctx.append(ctxs)
        u = 0
        for layer, ctx in zip(model.layers, ctxs):
            for a, s in layer.taped(ctx):
                per_unit_a[u].append(a)
                per_unit_s[u].append(s)
                u += 1
    inputs = [np.concatenate(a, axis=0) for a in per_unit_a]
    preacts = [np.concatenate(s, axis=0) for s in per_unit_s]
    index = [np.repeat(np.arange(batch.n), [x.shape[0] for x in a]) for a in per_unit_a]
    try:
        outputs = np.stack(outs)
    except ValueError:
        outputs = outs
    return outputs, Tape(inputs, preacts, index, batch.n, outputs, all_ctx, False)


def _check_capability(model):
    for layer in model.layers:
        if not isinstance(layer, Layer) or type(layer).backward is Layer.backward:
            raise CapabilityError(f"no reverse sweep for layer {layer!r}")


def _sweep(model, ctxs, g):
    grads = []
    for layer, ctx in zip(reversed(model.layers), reversed(ctxs)):
        g, gS = layer.backward(ctx, g)
        grads = list(gS) + grads
    return grads


def backprop(model, tape, cotangent):
    """Reverse sweep of output cotangents to every unit's pre-activations.

    Parameters
    ----------
    cotangent : ndarray
        ``(K, N, R_out, C)`` for batched tapes; for per-example (graph) tapes
        a list of ``(K, R_out, C)`` arrays.

    Returns
    -------
    list of ndarray
        Per unit, ``(K, rows, P_out)`` with rows concatenated over examples
        in tape order.
    """
    _check_capability(model)
    if tape.batched:
        cot = np.asarray(cotangent)
        gS = _sweep(model, tape.ctx, cot)
        out = []
        for g in gS:
            g = np.broadcast_to(g, cot.shape[:2] + g.shape[-2:]) if g.ndim == 3 else g
            out.append(g.reshape(g.shape[0], -1, g.shape[-1]))
        return out
    per_unit = [[] for _ in range(model.n_units)]
    for n, ctxs in enumerate(tape.ctx):
        gS = _sweep(model, ctxs, np.asarray(cotangent[n]))
        for u, g in enumerate(gS):
            per_unit[u].append(g)
    return [np.concatenate(g, axis=-2) for g in per_unit]


def _unit_probes(R_out, C):
    eye = np.eye(R_out * C)
    return eye.reshape(R_out * C, R_out, C)


def backward_jacobians(model, tape):
    """Output Jacobians with respect to every pre-activation row.

    Returns a list over units of lists over examples; entry ``[u][n]`` has
    shape ``(R_out, C, R_u, P_out)`` and holds ``d f(x_n)[r, c] / d S[m, p]``.
    Row ``r`` / column ``m`` of that array transposed is the vector
    ``b_{u,n,r,m}`` (``m`` is the only row index in the reduce setting, where
    ``R_out = 1``).
    """
    _check_capability(model)
    outputs = tape.outputs
    if tape.batched:
        N, R_out, C = outputs.shape
        probes = _unit_probes(R_out, C)
        cot = np.broadcast_to(probes[:, None], (R_out * C, N, R_out, C))
        gS = backprop(model, tape, cot)
        jac = []
        for u, g in enumerate(gS):
            R = tape.sizes(u)[0]
            g = g.reshape(R_out, C, N, R, g.shape[-1])
            jac.append([g[:, :, n] for n in range(N)])
        return jac
    cots = []
    for out in outputs:
        R_out, C = out.shape
        cots.append(_unit_probes(R_out, C))
    gS = backprop(model, tape, cots)
    jac = []
    for u, g in enumerate(gS):
        parts = tape.per_example(u, g)
        if isinstance(parts, np.ndarray):
            parts = [parts[:, n] for n in range(tape.n_examples)]
        items = []
        for n, part in enumerate(parts):
            R_out, C = outputs[n].shape
            items.append(part.reshape(R_out, C, part.shape[-2], part.shape[-1]))
        jac.append(items)
    return jac


def weight_grads(tape, gS):
    """Gradients with respect to each weight matrix, summed over probes and rows."""
    return [np.einsum("krp,rj->pj", g, a) for g, a in zip(gS, tape.inputs)]


def loss_and_grads(model, batch):
    """Mean loss over examples and its gradient for every weight matrix."""
    outputs, tape = forward(model, batch)
    y = batch.label_rows()
    if tape.batched:
        losses = model.loss.value(outputs, y).sum(axis=-1)
        cot = model.loss.grad(outputs, y)[None] / batch.n
    else:
        losses = np.array([model.loss.value(o, yy).sum() for o, yy in zip(outputs, y)])
        cot = [model.loss.grad(o, yy)[None] / batch.n for o, yy in zip(outputs, y)]
    gS = backprop(model, tape, cot)
    return float(np.mean(losses)), weight_grads(tape, gS), outputs, tape
