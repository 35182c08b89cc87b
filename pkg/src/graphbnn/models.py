"""Encoder / propagator / decoder networks on graphs.

Two propagators are supported: a GRU driven by a time-input trace, and a
hybrid neural ODE whose right-hand side is a fixed graph diffusion (exponential
half-steps) plus a learned graph-convolution generation term (Euler step).
A small linear-in-parameters model is included as an analytically tractable
test problem.

All forward functions accept the flat parameter vector either as an ndarray
or as an :class:`~graphbnn.autodiff.Tensor`, so one code path serves plain
evaluation and differentiation.
"""

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import DimensionMismatch, EigenFailure, EmptyGraph, NonFiniteValue

ACTIVATIONS = {
    "linear": lambda x: x,
    "swish": ad.swish,
    "tanh": ad.tanh,
    "relu": ad.relu,
}

KINDS = ("gru", "node", "linear")


# --------------------------------------------------------------------------
# data containers

@dataclass(eq=False)
class GraphSample:
    """One graph with its per-step driver and target traces.

    ``time_inputs`` is stored as ``(T, n_drivers)``; ``open_nodes`` flags nodes
    on the out-gassing boundary (only used by the hybrid NODE).
    """

    adjacency: np.ndarray
    node_features: np.ndarray
    time_inputs: np.ndarray
    targets: np.ndarray
    open_nodes: np.ndarray = None
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=np.float64)
        X = np.asarray(self.node_features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        f = np.asarray(self.time_inputs, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        y = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatch("adjacency must be square")
        if not np.array_equal(A, A.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(A) != 0):
            raise ValueError("adjacency must have a zero diagonal")
        if X.shape[0] != A.shape[0]:
            raise DimensionMismatch(
                f"{X.shape[0]} feature rows for {A.shape[0]} nodes")
        if f.shape[0] != y.shape[0]:
            raise DimensionMismatch("time_inputs and targets differ in length")
        if y.shape[0] == 0:
            raise ValueError("empty trace")
        if self.open_nodes is None:
            self.open_nodes = np.zeros(A.shape[0], dtype=bool)
        self.open_nodes = np.asarray(self.open_nodes, dtype=bool).reshape(-1)
        if self.open_nodes.shape[0] != A.shape[0]:
            raise DimensionMismatch("open_nodes length differs from node count")
        self.adjacency, self.node_features = A, X
        self.time_inputs, self.targets = f, y

    @property
    def n_nodes(self):
        return self.adjacency.shape[0]

    @property
    def n_steps(self):
        return self.targets.shape[0]

    def normalized_adjacency(self):
        if "a_hat" not in self._cache:
            self._cache["a_hat"] = normalize_adjacency(self.adjacency)
        return self._cache["a_hat"]

    def laplacian(self, penalty=0.0):
        return graph_laplacian(self.adjacency, self.open_nodes, penalty)

    def laplacian_eig(self, penalty):
        key = ("eig", float(penalty))
        if key not in self._cache:
            self._cache[key] = _eigh(self.laplacian(penalty))
        return self._cache[key]

    def replace(self, **kw):
        d = dict(adjacency=self.adjacency, node_features=self.node_features,
                 time_inputs=self.time_inputs, targets=self.targets,
                 open_nodes=self.open_nodes, name=self.name)
        d.update(kw)
        return GraphSample(**d)

    def permuted(self, perm):
        """Same graph with nodes relabelled so that new node k is old ``perm[k]``."""
        perm = np.asarray(perm)
        return self.replace(adjacency=self.adjacency[np.ix_(perm, perm)],
                            node_features=self.node_features[perm],
                            open_nodes=self.open_nodes[perm])

    def to_dict(self):
        iu = np.argwhere(np.triu(self.adjacency) > 0)
        return {
            "name": self.name,
            "n_nodes": int(self.n_nodes),
            "edges": iu.tolist(),
            "node_features": self.node_features.tolist(),
            "open_nodes": np.flatnonzero(self.open_nodes).tolist(),
            "time_inputs": self.time_inputs.tolist(),
            "targets": self.targets.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        n = int(d["n_nodes"])
        A = np.zeros((n, n))
        for i, j in d["edges"]:
            A[i, j] = A[j, i] = 1.0
        open_nodes = np.zeros(n, dtype=bool)
        open_nodes[list(d.get("open_nodes", []))] = True
        return cls(A, np.array(d["node_features"]), np.array(d["time_inputs"]),
                   np.array(d["targets"]), open_nodes, d.get("name", ""))


@dataclass
class ParamVector:
    """Flat parameter vector plus ``(layer, offset, length)`` layout."""

    data: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        self.layout = tuple((str(n), int(o), int(k)) for n, o, k in self.layout)
        pos = 0
        names = set()
        for name, off, length in self.layout:
            if off != pos or length < 0:
                raise ValueError(f"layout not contiguous at layer {name!r}")
            if name in names:
                raise ValueError(f"layer {name!r} appears twice")
            names.add(name)
            pos += length
        if pos != self.data.shape[0]:
            raise DimensionMismatch(
                f"layout covers {pos} entries, data has {self.data.shape[0]}")

    def __len__(self):
        return self.data.shape[0]

    def layer(self, name):
        for n, off, length in self.layout:
            if n == name:
                return self.data[off:off + length]
        raise KeyError(name)

    def layer_names(self):
        return [n for n, _, _ in self.layout]

    def with_data(self, data):
        return ParamVector(np.array(data, dtype=np.float64), self.layout)

    def column_names(self):
        return [f"{n}[{k}]" for n, _, length in self.layout for k in range(length)]


# --------------------------------------------------------------------------
# architecture description

@dataclass
class ModelSpec:
    """Architecture of one of the supported networks.

    ``kind`` selects the propagator: ``"gru"`` (GCN encoder, global average
    pooling, dense layers, GRU, linear decoder), ``"node"`` (hybrid neural ODE
    whose augmented state is the node-feature matrix, decoded from a selective
    sum over open-boundary nodes) or ``"linear"`` (polynomial in the driver).
    """

    kind: str = "gru"
    in_features: int = 2
    conv_filters: tuple = (4, 4)
    conv_activations: tuple = ("swish", "swish")
    conv_bias: bool = True
    dense_widths: tuple = (4,)
    dense_activation: str = "swish"
    gru_width: int = 4
    driver_dim: int = 1
    n_steps: int = 21
    dt: float = 0.05
    penalty: float = 10.0
    state_channel: int = 0
    degree: int = 1
    intercept: bool = True

    def __post_init__(self):
        self.conv_filters = tuple(int(c) for c in self.conv_filters)
        acts = self.conv_activations
        if isinstance(acts, str):
            acts = (acts,) * len(self.conv_filters)
        self.conv_activations = tuple(acts)
        self.dense_widths = tuple(int(c) for c in self.dense_widths)
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "linear":
            if self.degree < 0 or (self.degree == 0 and not self.intercept):
                raise ValueError("linear model needs at least one basis function")
            return
        if len(self.conv_activations) != len(self.conv_filters):
            raise ValueError("one activation per convolution layer required")
        for a in self.conv_activations + (self.dense_activation,):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.n_steps < 1 or self.dt <= 0:
            raise ValueError("n_steps >= 1 and dt > 0 required")
        if self.kind == "gru":
            width = self.dense_widths[-1] if self.dense_widths else (
                self.conv_filters[-1] if self.conv_filters else self.in_features)
            if width != self.gru_width:
                raise DimensionMismatch(
                    f"encoder output width {width} must equal gru_width {self.gru_width}")
        if self.kind == "node":
            if not self.conv_filters or self.conv_filters[-1] != self.in_features:
                raise DimensionMismatch(
                    "generation stack must map the augmented state to itself")
            if not 0 <= self.state_channel < self.in_features:
                raise DimensionMismatch("state_channel outside the augmented state")

    # presets ---------------------------------------------------------------

    @classmethod
    def gru_2d(cls, n_steps=21):
        """GCNN-GRU for 2-D textures: 2x4 convolutions, 205 parameters."""
        return cls(kind="gru", in_features=2, conv_filters=(4, 4),
                   conv_activations=("swish", "swish"), conv_bias=False,
                   dense_widths=(4,), gru_width=4, driver_dim=1,
                   n_steps=n_steps, dt=1.0 / max(n_steps - 1, 1))

    @classmethod
    def gru_3d(cls, n_steps=21):
        """Larger GCNN-GRU (2x16 convolutions), 2609 parameters."""
        return cls(kind="gru", in_features=3, conv_filters=(16, 16),
                   conv_activations=("swish", "swish"), conv_bias=True,
                   dense_widths=(16,), gru_width=16, driver_dim=1,
                   n_steps=n_steps, dt=1.0 / max(n_steps - 1, 1))

    @classmethod
    def gas_node(cls, n_steps=21, penalty=10.0):
        """Hybrid NODE on a 5-channel augmented state [c0, nu, ell, 0, 0]."""
        return cls(kind="node", in_features=5, conv_filters=(5, 5),
                   conv_activations=("swish", "linear"), conv_bias=True,
                   dense_widths=(), gru_width=0, driver_dim=1,
                   n_steps=n_steps, dt=1.0 / max(n_steps - 1, 1), penalty=penalty)

    @classmethod
    def linear_toy(cls, degree=1, intercept=True, n_steps=10):
        return cls(kind="linear", in_features=1, conv_filters=(), conv_activations=(),
                   dense_widths=(), gru_width=0, degree=degree, intercept=intercept,
                   n_steps=n_steps, dt=1.0)

    # layout ----------------------------------------------------------------

    def layer_shapes(self):
        """Ordered ``[(layer, [(param, shape), ...]), ...]``."""
        if self.kind == "linear":
            nb = self.degree + (1 if self.intercept else 0)
            return [("linear", [("coef", (nb,))])]
        layers = []
        if self.kind == "node":
            layers.append(("scale", [("kappa", (1,))]))
        fin = self.in_features
        for k, fout in enumerate(self.conv_filters, start=1):
            ps = [("W", (fin, fout)), ("W_self", (fin, fout))]
            if self.conv_bias:
                ps.append(("b", (fout,)))
            layers.append((f"gcnn{k}", ps))
            fin = fout
        if self.kind == "node":
            layers.append(("output", [("W", (fin, 1)), ("b", (1,))]))
            return layers
        single = len(self.dense_widths) == 1
        for k, fout in enumerate(self.dense_widths, start=1):
            name = "dense" if single else f"dense{k}"
            layers.append((name, [("W", (fin, fout)), ("b", (fout,))]))
            fin = fout
        H, I = self.gru_width, fin + self.driver_dim
        layers.append(("gru", [("W", (I, 3 * H)), ("U", (H, 3 * H)),
                               ("b_in", (3 * H,)), ("b_rec", (3 * H,))]))
        layers.append(("output", [("W", (H, 1)), ("b", (1,))]))
        return layers

    def layout(self):
        out, off = [], 0
        for name, params in self.layer_shapes():
            n = sum(int(np.prod(s)) for _, s in params)
            out.append((name, off, n))
            off += n
        return tuple(out)

    @property
    def n_params(self):
        return sum(n for _, _, n in self.layout())

    def to_dict(self):
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["conv_activations"] = list(self.conv_activations)
        d["dense_widths"] = list(self.dense_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            base = {"gru_2d": cls.gru_2d, "gru_3d": cls.gru_3d,
                    "gas_node": cls.gas_node, "linear_toy": cls.linear_toy}[preset]
            kw = {k: d.pop(k) for k in list(d) if k in ("n_steps", "penalty", "degree",
                                                          "intercept")
                  and k in base.__code__.co_varnames}
            spec = base(**kw)
            merged = spec.to_dict()
            merged.update(d)
            return cls(**merged)
        return cls(**d)


def init_params(spec, seed=0):
    """Glorot-uniform weights, zero biases, unit diffusion scale."""
    rng = np.random.default_rng(seed)
    chunks = []
    for layer, params in spec.layer_shapes():
        for pname, shape in params:
            if pname == "kappa":
                chunks.append(np.ones(shape))
            elif len(shape) == 2:
                fan_in, fan_out = shape
                if layer == "gru":
                    fan_out //= 3
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                chunks.append(rng.uniform(-lim, lim, size=shape).ravel())
            elif pname == "coef":
                chunks.append(np.zeros(shape))
            else:
                chunks.append(np.zeros(shape))
    return ParamVector(np.concatenate(chunks), spec.layout())


def unpack(spec, w):
    """Split flat ``w`` (array or Tensor) into ``{layer: {param: array}}``."""
    if isinstance(w, ParamVector):
        w = w.data
    n = ad.value(w).shape[0]
    if n != spec.n_params:
        raise DimensionMismatch(f"expected {spec.n_params} parameters, got {n}")
    out, off = {}, 0
    for layer, params in spec.layer_shapes():
        d = {}
        for pname, shape in params:
            size = int(np.prod(shape))
            d[pname] = ad.reshape(ad.getitem(w, slice(off, off + size)), shape)
            off += size
        out[layer] = d
    return out


# --------------------------------------------------------------------------
# graph operators

def normalize_adjacency(A):
    """``D^-1/2 A D^-1/2`` as CSR; rows of isolated nodes are zero."""
    A = sp.csr_matrix(np.asarray(A, dtype=np.float64)) if not sp.issparse(A) else A.tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    D = sp.diags(inv)
    return (D @ A @ D).tocsr()


def graph_laplacian(A, open_nodes=None, penalty=0.0):
    """``rowsum(A) - A`` plus ``penalty`` on the diagonal of open nodes."""
    A = np.asarray(A, dtype=np.float64)
    L = np.diag(A.sum(axis=1)) - A
    if open_nodes is not None and penalty:
        L = L + penalty * np.diag(np.asarray(open_nodes, dtype=np.float64))
    return L


def _eigh(L):
    L = np.asarray(L, dtype=np.float64)
    if not np.allclose(L, L.T, atol=1e-12, rtol=0):
        raise EigenFailure("operator is not symmetric")
    try:
        lam, V = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(V))):
        raise EigenFailure("non-finite eigendecomposition")
    return lam, V


@lru_cache(maxsize=256)
def _cached_eigh(key, n):
    L = np.frombuffer(key, dtype=np.float64).reshape(n, n)
    return _eigh(L)


def matrix_exponential_apply(L, s, c):
    """``exp(-s L) c`` for symmetric PSD ``L`` via a cached eigendecomposition."""
    L = np.ascontiguousarray(L, dtype=np.float64)
    if s < 0:
        raise ValueError("s must be non-negative")
    lam, V = _cached_eigh(L.tobytes(), L.shape[0])
    c = np.asarray(c, dtype=np.float64)
    return V @ (np.exp(-s * lam) * (V.T @ c))


class GraphOperators:
    """Constant operators for one graph or a block-diagonal batch of graphs."""

    def __init__(self, samples, penalty=None):
        if isinstance(samples, GraphSample):
            samples = [samples]
        if not samples:
            raise EmptyGraph("no graphs")
        self.sizes = np.array([s.n_nodes for s in samples])
        if np.any(self.sizes == 0):
            raise EmptyGraph("graph with no nodes")
        self.n_graphs = len(samples)
        self.n_nodes = int(self.sizes.sum())
        self.a_hat = ad._Const(sp.block_diag([s.normalized_adjacency() for s in samples],
                                             format="csr"))
        self.features = np.vstack([s.node_features for s in samples])
        graph_of = np.repeat(np.arange(self.n_graphs), self.sizes)
        cols = np.arange(self.n_nodes)
        self.mean_pool = ad._Const(sp.csr_matrix(
            (1.0 / self.sizes[graph_of], (graph_of, cols)),
            shape=(self.n_graphs, self.n_nodes)))
        open_nodes = np.concatenate([s.open_nodes for s in samples])
        self.open_nodes = open_nodes
        self.open_pool = ad._Const(sp.csr_matrix(
            (np.ones(open_nodes.sum()), (graph_of[open_nodes], cols[open_nodes])),
            shape=(self.n_graphs, self.n_nodes)))
        self.interior = (~open_nodes).astype(np.float64)[:, None]
        self.penalty = penalty
        if penalty is not None:
            eigs = [s.laplacian_eig(penalty) for s in samples]
            self.lam = np.concatenate([lam for lam, _ in eigs])
            V = sp.block_diag([V for _, V in eigs], format="csr")
            self.V = ad._Const(V)
        else:
            self.lam = self.V = None

    def expm_apply(self, c, s, kappa):
        """``exp(-s relu(kappa) L_pen) c``; differentiable in ``c`` and ``kappa``."""
        coef = ad.spmm(self.V.t, c)
        decay = ad.exp(ad.mul(-s * self.lam, ad.relu(kappa)))
        return ad.spmm(self.V, ad.mul(decay, coef))


# --------------------------------------------------------------------------
# building blocks

def gcn_layer(h, adjacency, weight, self_weight, bias=None, activation="linear",
              normalized=False):
    """``act(A_hat h W + h W_self + b)`` with symmetric degree normalization."""
    hv = ad.value(h)
    Wv, Sv = ad.value(weight), ad.value(self_weight)
    if hv.ndim != 2 or Wv.shape[0] != hv.shape[1] or Sv.shape != Wv.shape:
        raise DimensionMismatch(
            f"features {hv.shape} incompatible with weights {Wv.shape}/{Sv.shape}")
    if bias is not None and ad.value(bias).shape != (Wv.shape[1],):
        raise DimensionMismatch("bias length must equal the filter count")
    if isinstance(adjacency, ad._Const):
        a_hat = adjacency
        n = a_hat.mat.shape[0]
    else:
        if not normalized:
            adjacency = normalize_adjacency(adjacency)
        a_hat = ad._Const(adjacency)
        n = adjacency.shape[0]
    if n != hv.shape[0]:
        raise DimensionMismatch(f"{hv.shape[0]} feature rows for {n} nodes")
    out = ad.add(ad.spmm(a_hat, ad.matmul(h, weight)), ad.matmul(h, self_weight))
    if bias is not None:
        out = ad.add(out, bias)
    return ACTIVATIONS[activation](out)


def global_average_pool(h):
    hv = ad.value(h)
    if hv.ndim != 2 or hv.shape[0] == 0:
        raise EmptyGraph("cannot pool an empty graph")
    return ad.mean(h, axis=0)


def gru_step(h, x, params):
    """One gated update ``(1 - z) * h + z * h_tilde`` with a reset gate.

    ``h`` is ``(H,)`` or ``(batch, H)``; ``x`` the matching driver input.
    ``params`` holds ``W (I, 3H)``, ``U (H, 3H)``, ``b_in``, ``b_rec`` with gate
    blocks ordered update, reset, candidate.
    """
    W, U, b_in, b_rec = params["W"], params["U"], params["b_in"], params["b_rec"]
    H = ad.value(U).shape[0]
    hv, xv = ad.value(h), ad.value(x)
    if hv.shape[-1] != H or xv.shape[-1] != ad.value(W).shape[0]:
        raise DimensionMismatch(
            f"GRU expects hidden {H} and input {ad.value(W).shape[0]}, "
            f"got {hv.shape[-1]} and {xv.shape[-1]}")
    gx = ad.add(ad.matmul(x, W), b_in)
    gh = ad.add(ad.matmul(h, U), b_rec)

    def block(a, k):
        idx = (Ellipsis, slice(k * H, (k + 1) * H))
        return ad.getitem(a, idx)

    z = ad.sigmoid(ad.add(block(gx, 0), block(gh, 0)))
    r = ad.sigmoid(ad.add(block(gx, 1), block(gh, 1)))
    cand = ad.tanh(ad.add(block(gx, 2), ad.mul(r, block(gh, 2))))
    return ad.add(h, ad.mul(z, ad.sub(cand, h)))


def _set_column(h, k, col):
    n, F = ad.value(h).shape
    col = ad.reshape(col, (n, 1))
    parts = []
    if k > 0:
        parts.append(ad.getitem(h, (slice(None), slice(0, k))))
    parts.append(col)
    if k + 1 < F:
        parts.append(ad.getitem(h, (slice(None), slice(k + 1, F))))
    return ad.concatenate(parts, axis=1) if len(parts) > 1 else col


def generation_term(spec, conv, h, ops):
    """Learned right-hand side: the convolution stack, zeroed on open nodes."""
    for k, act in enumerate(spec.conv_activations, start=1):
        p = conv[f"gcnn{k}"]
        h = gcn_layer(h, ops.a_hat, p["W"], p["W_self"], p.get("b"), act)
    return ad.mul(h, ops.interior)


def node_step(spec, params, h, ops, dt=None):
    """Strang-split step: diffusion half-step, Euler generation step, half-step."""
    dt = spec.dt if dt is None else dt
    kappa = params["scale"]["kappa"]
    ch = spec.state_channel
    c = ad.getitem(h, (slice(None), ch))
    h = _set_column(h, ch, ops.expm_apply(c, 0.5 * dt, kappa))
    h = ad.add(h, ad.mul(dt, generation_term(spec, params, h, ops)))
    c = ad.getitem(h, (slice(None), ch))
    return _set_column(h, ch, ops.expm_apply(c, 0.5 * dt, kappa))


# --------------------------------------------------------------------------
# full networks

def predict(spec, ops, w):
    """Predicted traces ``(n_graphs, T)`` for a batch built by :class:`GraphOperators`.

    ``ops`` must carry ``time_inputs`` of shape ``(n_graphs, T, n_drivers)``.
    """
    params = unpack(spec, w)
    f = ops.time_inputs
    T = f.shape[1]
    if spec.kind == "linear":
        basis = _poly_basis(spec, f)
        G, T, K = basis.shape
        y = ad.matmul(basis.reshape(G * T, K), params["linear"]["coef"])
        return ad.reshape(y, (G, T))
    if spec.kind == "node":
        if ops.V is None:
            raise ValueError("hybrid NODE needs graph operators built with a penalty")
        h = ops.features
        if h.shape[1] != spec.in_features:
            raise DimensionMismatch(
                f"augmented state has {h.shape[1]} channels, spec expects {spec.in_features}")
        out = params["output"]
        outs = []
        for n in range(T):
            pooled = ad.spmm(ops.open_pool, h)
            outs.append(ad.add(ad.matmul(pooled, out["W"]), out["b"]))
            if n < T - 1:
                h = node_step(spec, params, h, ops)
        y = ad.concatenate(outs, axis=1)
        _check_finite(y)
        return y

    h = ops.features
    if h.shape[1] != spec.in_features:
        raise DimensionMismatch(
            f"node features have {h.shape[1]} channels, spec expects {spec.in_features}")
    for k, act in enumerate(spec.conv_activations, start=1):
        p = params[f"gcnn{k}"]
        h = gcn_layer(h, ops.a_hat, p["W"], p["W_self"], p.get("b"), act)
    e = ad.spmm(ops.mean_pool, h)
    single = len(spec.dense_widths) == 1
    for k in range(1, len(spec.dense_widths) + 1):
        p = params["dense" if single else f"dense{k}"]
        e = ACTIVATIONS[spec.dense_activation](ad.add(ad.matmul(e, p["W"]), p["b"]))
    if f.shape[2] != spec.driver_dim:
        raise DimensionMismatch(f"driver has {f.shape[2]} channels, spec expects "
                                f"{spec.driver_dim}")
    gru, out = params["gru"], params["output"]
    hid = e
    outs = []
    for n in range(T):
        outs.append(ad.add(ad.matmul(hid, out["W"]), out["b"]))
        if n < T - 1:
            hid = gru_step(hid, ad.concatenate([e, f[:, n, :]], axis=1), gru)
    y = ad.concatenate(outs, axis=1)
    _check_finite(y)
    return y


def _check_finite(y):
    if not np.all(np.isfinite(ad.value(y))):
        raise NonFiniteValue("forward pass produced non-finite values")


def _poly_basis(spec, f):
    x = f[..., 0]
    powers = range(0 if spec.intercept else 1, spec.degree + 1)
    return np.stack([x ** k for k in powers], axis=-1)


def make_operators(spec, samples):
    """Batch operators for ``samples``, which must share one trace length."""
    if isinstance(samples, GraphSample):
        samples = [samples]
    lengths = {s.n_steps for s in samples}
    if len(lengths) != 1:
        raise DimensionMismatch("batched samples must share one trace length")
    penalty = spec.penalty if spec.kind == "node" else None
    ops = GraphOperators(samples, penalty=penalty)
    ops.time_inputs = np.stack([s.time_inputs for s in samples])
    ops.targets = np.stack([s.targets for s in samples])
    return ops


def forward(spec, sample, w):
    """Predicted trace for one sample (length equals its target trace)."""
    y = predict(spec, make_operators(spec, [sample]), w)
    return ad.reshape(y, (sample.n_steps,))
