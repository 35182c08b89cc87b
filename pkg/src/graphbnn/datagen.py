"""Synthetic grain-boundary networks and ground-truth traces.

Grain networks come from a Voronoi tessellation of random seeds in the unit
square.  Mirror images across ``x = 0`` and ``x = 1`` close the cells on the
left and right walls, and copies shifted by ``y +- 1`` make the top and bottom
periodic.  Graph nodes are Voronoi vertices (triple junctions), edges are cell
boundary segments.  Segments crossing the periodic seam are split at the seam
so the identified seam points become explicit nodes.

Ground truth for the gas-release problem integrates diffusion along the
boundary network with a saturating intragranular source, using the same
operator-split scheme as the hybrid NODE on a finer step.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import QhullError, Voronoi, cKDTree

from .errors import DegenerateTessellation, NonFiniteValue
from .models import GraphSample, graph_laplacian
from .posterior import normalize_dataset

FLAGS = ("interior", "open", "closed", "periodic")
_TOL = 1e-9


@dataclass
class GrainNetwork:
    positions: np.ndarray
    adjacency: np.ndarray
    nu: np.ndarray
    ell: np.ndarray
    flags: np.ndarray
    c0: np.ndarray
    seed: int = 0
    n_seeds: int = 0

    @property
    def n_nodes(self):
        return self.positions.shape[0]

    @property
    def open_nodes(self):
        return self.flags == "open"

    def laplacian(self, penalty=0.0):
        return graph_laplacian(self.adjacency, self.open_nodes, penalty)

    def features(self, n_channels=5):
        """Augmented state ``[c0, nu, ell, 0, ...]``."""
        X = np.zeros((self.n_nodes, n_channels))
        X[:, 0], X[:, 1], X[:, 2] = self.c0, self.nu, self.ell
        return X


@dataclass
class GenerationTruth:
    """Reduced gas-release law: boundary diffusion plus saturating generation."""

    rho: float = 700.0
    kappa_b: float = 1.0
    kappa_s: float = 1000.0
    t_max: float = 5e-4
    n_steps: int = 21
    c_sat: float = 1.0
    penalty: float = 10.0
    substeps: int = 1024

    def __post_init__(self):
        for name in ("kappa_b", "t_max", "c_sat", "penalty"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rho < 0 or self.kappa_s < 0:
            raise ValueError("rho and kappa_s must be non-negative")
        if self.n_steps < 2 or self.substeps < 1:
            raise ValueError("n_steps >= 2 and substeps >= 1 required")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# tessellation

def _shoelace(P):
    x, y = P[:, 0], P[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _order_ccw(P):
    c = P.mean(axis=0)
    return np.argsort(np.arctan2(P[:, 1] - c[1], P[:, 0] - c[0]))


def _tessellate(seeds):
    n = len(seeds)
    copies = []
    for mirror in (lambda x: x, lambda x: -x, lambda x: 2.0 - x):
        for dy in (0.0, -1.0, 1.0):
            copies.append(np.column_stack([mirror(seeds[:, 0]), seeds[:, 1] + dy]))
    pts = np.vstack(copies)
    try:
        vor = Voronoi(pts)
    except QhullError as exc:
        raise DegenerateTessellation(str(exc)) from exc
    cells = []
    for i in range(n):
        region = vor.regions[vor.point_region[i]]
        if not region or -1 in region:
            raise DegenerateTessellation(f"cell {i} is unbounded")
        P = vor.vertices[region]
        P = P[_order_ccw(P)]
        cells.append(P)
    return cells


def make_grain_network(n_seeds, seed=0, bubble_fraction=0.2, min_separation=1e-3):
    """Voronoi grain-boundary network on the unit square.

    Nodes within ``1e-9`` of ``x = 0`` are flagged open, of ``x = 1`` closed,
    and seam points on ``y = 0 ~ 1`` periodic.  ``nu`` shares each cell's area
    equally among its vertices (so it sums to 1); ``ell`` sums half the
    lengths of the incident boundary segments.  A ``bubble_fraction`` of the
    non-open nodes (at least one) start with unit concentration.
    """
    if n_seeds < 2:
        raise ValueError("n_seeds must be at least 2")
    rng = np.random.default_rng(seed)
    seeds = rng.random((n_seeds, 2))
    # near-coincident seeds give sliver cells with vanishing edges
    d = cKDTree(seeds, boxsize=[10.0, 1.0]).query(seeds, k=2)[0][:, 1]
    if np.min(d) < min_separation:
        raise DegenerateTessellation("seed points nearly coincide")
    cells = _tessellate(seeds)

    # split seam crossings, collect polygon vertices and edges in unwrapped coordinates
    polys = []
    for P in cells:
        Q = []
        m = len(P)
        for k in range(m):
            a, b = P[k], P[(k + 1) % m]
            Q.append(a)
            lo, hi = min(a[1], b[1]), max(a[1], b[1])
            crossings = [s for s in range(int(np.floor(lo)) + 1, int(np.ceil(hi)))
                         if lo < s - _TOL and s + _TOL < hi]
            if a[1] > b[1]:
                crossings = crossings[::-1]
            for s in crossings:
                t = (s - a[1]) / (b[1] - a[1])
                Q.append(np.array([a[0] + t * (b[0] - a[0]), float(s)]))
        polys.append(np.array(Q))

    raw = np.vstack(polys)
    wrapped = raw.copy()
    wrapped[:, 1] = np.mod(wrapped[:, 1], 1.0)
    wrapped[wrapped[:, 1] > 1.0 - _TOL, 1] = 0.0
    wrapped[:, 0] = np.clip(wrapped[:, 0], 0.0, 1.0)
    tree = cKDTree(wrapped + [1.0, 0.0], boxsize=[10.0, 1.0])
    pairs = tree.query_pairs(1e-8, output_type="ndarray")
    parent = np.arange(len(raw))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(raw))])
    uniq, node_of = np.unique(roots, return_inverse=True)
    n_nodes = len(uniq)
    positions = wrapped[uniq]

    nu = np.zeros(n_nodes)
    ell = np.zeros(n_nodes)
    edges = {}
    off = 0
    for Q in polys:
        m = len(Q)
        ids = node_of[off:off + m]
        area = _shoelace(Q)
        # vertices merged within one polygon count once
        uids = np.unique(ids)
        nu[uids] += area / len(uids)
        for k in range(m):
            a, b = ids[k], ids[(k + 1) % m]
            if a == b:
                continue
            key = (min(a, b), max(a, b))
            length = float(np.linalg.norm(Q[(k + 1) % m] - Q[k]))
            edges.setdefault(key, length)
        off += m
    A = np.zeros((n_nodes, n_nodes))
    for (a, b), length in edges.items():
        A[a, b] = A[b, a] = 1.0
        ell[a] += 0.5 * length
        ell[b] += 0.5 * length

    if abs(nu.sum() - 1.0) > 1e-8:
        raise DegenerateTessellation(f"cell areas sum to {nu.sum()}, not 1")
    n_comp, _ = connected_components(A, directed=False)
    if n_comp != 1:
        raise DegenerateTessellation("boundary network is disconnected")
    if np.any(ell <= 0) or np.any(nu <= 0):
        raise DegenerateTessellation("node with zero tributary area or length")

    flags = np.full(n_nodes, "interior", dtype=object)
    flags[positions[:, 1] < _TOL] = "periodic"
    flags[positions[:, 0] < _TOL] = "open"
    flags[positions[:, 0] > 1.0 - _TOL] = "closed"
    flags = flags.astype(str)

    c0 = np.zeros(n_nodes)
    candidates = np.flatnonzero(flags != "open")
    n_bub = max(1, int(round(bubble_fraction * len(candidates))))
    c0[rng.choice(candidates, size=min(n_bub, len(candidates)), replace=False)] = 1.0
    return GrainNetwork(positions, A, nu, ell, flags, c0, seed, n_seeds)


def cell_adjacency(seeds):
    """Adjacency of Voronoi cells under the mirrored / periodic construction."""
    n = len(seeds)
    copies = []
    for mirror in (lambda x: x, lambda x: -x, lambda x: 2.0 - x):
        for dy in (0.0, -1.0, 1.0):
            copies.append(np.column_stack([mirror(seeds[:, 0]), seeds[:, 1] + dy]))
    vor = Voronoi(np.vstack(copies))
    A = np.zeros((n, n))
    for p, q in vor.ridge_points:
        a, b = p % n, q % n
        if (p < n or q < n) and a != b:
            A[a, b] = A[b, a] = 1.0
    areas = np.array([_shoelace(P) for P in _tessellate(seeds)])
    return A, areas


# --------------------------------------------------------------------------
# ground truth

def _half_step_matrix(L, kappa, s):
    lam, V = np.linalg.eigh(L)
    return (V * np.exp(-s * kappa * lam)) @ V.T


def integrate_truth(net, truth, return_states=False, substeps=None):
    """Integrate the boundary concentration and return the flux trace.

    ``dc/dt = -kappa_s L_pen c + rho nu (1 - c / c_sat)_+`` with the source
    switched off on open nodes.  Each output interval is split into
    ``substeps`` Strang steps (exponential half-step, Euler source step,
    exponential half-step).  Flux is ``penalty * sum(c[open])``.
    """
    M = truth.substeps if substeps is None else substeps
    L = net.laplacian(truth.penalty)
    interior = ~net.open_nodes
    source_w = truth.rho * net.nu * interior
    dt = truth.t_max / (truth.n_steps - 1) / M
    E = _half_step_matrix(L, truth.kappa_s, 0.5 * dt)
    c = net.c0.astype(np.float64).copy()
    states = [c.copy()]
    for _ in range(truth.n_steps - 1):
        for _ in range(M):
            c = E @ c
            c = c + dt * source_w * np.maximum(1.0 - c / truth.c_sat, 0.0)
            c = E @ c
        if not np.all(np.isfinite(c)):
            raise NonFiniteValue("truth integration blew up")
        states.append(c.copy())
    states = np.array(states)
    flux = truth.penalty * states[:, net.open_nodes].sum(axis=1)
    times = np.linspace(0.0, truth.t_max, truth.n_steps)
    if return_states:
        return flux, times, states
    return flux


def solve_truth(net, truth):
    """Flux trace ``y_n`` at ``n_steps`` uniform times in ``[0, t_max]``."""
    return integrate_truth(net, truth)


def gas_sample(net, truth, name=""):
    flux, times, _ = integrate_truth(net, truth, return_states=True)
    return GraphSample(net.adjacency, net.features(), times / truth.t_max, flux,
                       net.open_nodes, name)


# --------------------------------------------------------------------------
# datasets

def sample_seeds(seed, n):
    """Per-sample child seeds: ``SeedSequence(seed).spawn(n)``."""
    return np.random.SeedSequence(seed).spawn(n)


def _network_from_child(child, n_seeds_range, bubble_fraction, max_tries=20):
    rng = np.random.default_rng(child)
    lo, hi = n_seeds_range
    n_seeds = int(rng.integers(lo, hi + 1))
    for sub in child.spawn(max_tries):
        s = int(sub.generate_state(1)[0])
        try:
            return make_grain_network(n_seeds, s, bubble_fraction)
        except DegenerateTessellation:
            continue
    raise DegenerateTessellation(f"no valid network after {max_tries} attempts")


def make_raw_gas_samples(n_samples, n_seeds_range=(5, 9), truth=None, seed=0,
                         bubble_fraction=0.2):
    """Un-normalized gas samples; sample ``k`` depends only on ``(seed, k)``."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    truth = truth or GenerationTruth()
    out = []
    for k, child in enumerate(sample_seeds(seed, n_samples)):
        net = _network_from_child(child, n_seeds_range, bubble_fraction)
        out.append(gas_sample(net, truth, name=f"sample_{k:04d}"))
    return out


def make_dataset(n_samples, n_seeds_range=(5, 9), truth=None, seed=0,
                 bubble_fraction=0.2, return_record=False):
    """Gas-release dataset normalized jointly to [0, 1] per channel."""
    raw = make_raw_gas_samples(n_samples, n_seeds_range, truth, seed, bubble_fraction)
    data, record = normalize_dataset(raw)
    return (data, record) if return_record else data


def texture_trace(phi, areas, A, strain):
    """Saturating stress-like response whose yield level depends on the texture."""
    misorient = 0.0
    iu = np.argwhere(np.triu(A) > 0)
    if len(iu):
        d = np.abs(phi[iu[:, 0]] - phi[iu[:, 1]])
        misorient = float(np.mean(np.minimum(d, 1.0 - d)))
    schmid = float(np.sum(areas * np.cos(np.pi * phi) ** 2))
    sigma_y = 1.0 + 0.5 * schmid + 0.8 * misorient
    modulus = 20.0 * (1.0 + 0.3 * schmid)
    return sigma_y * (1.0 - np.exp(-modulus * strain / sigma_y))


def make_texture_dataset(n_samples, n_seeds_range=(4, 8), n_steps=21, seed=0,
                         normalize=True, return_record=False):
    """Grain graphs with features ``[phi, nu]`` and synthetic stress traces."""
    out = []
    strain = np.linspace(0.0, 0.2, n_steps)
    for k, child in enumerate(sample_seeds(seed, n_samples)):
        rng = np.random.default_rng(child)
        n = int(rng.integers(n_seeds_range[0], n_seeds_range[1] + 1))
        seeds = rng.random((n, 2))
        A, areas = cell_adjacency(seeds)
        phi = rng.random(n)
        y = texture_trace(phi, areas, A, strain)
        out.append(GraphSample(A, np.column_stack([phi, areas]), strain, y,
                               name=f"texture_{k:04d}"))
    if not normalize:
        return out
    data, record = normalize_dataset(out)
    return (data, record) if return_record else data


def make_linear_dataset(n_samples, n_steps=5, coef=(0.3, 0.8), sigma=0.05, seed=0,
                        degree=1, intercept=True):
    """Single-node samples for the polynomial toy model, with Gaussian noise."""
    rng = np.random.default_rng(seed)
    coef = np.asarray(coef, dtype=np.float64)
    out = []
    for k in range(n_samples):
        f = rng.random(n_steps)
        powers = range(0 if intercept else 1, degree + 1)
        basis = np.stack([f ** p for p in powers], axis=-1)
        y = basis @ coef + sigma * rng.standard_normal(n_steps)
        out.append(GraphSample(np.zeros((1, 1)), np.zeros((1, 1)), f, y,
                               name=f"linear_{k:04d}"))
    return out
