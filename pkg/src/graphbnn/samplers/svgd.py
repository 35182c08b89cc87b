"""Stein variational gradient descent with a weighted RBF kernel."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import NonFiniteValue

METRICS = ("identity", "gn_diag")


@dataclass
class SvgdConfig:
    n_particles: int = 96
    lr: float = 0.05
    n_steps: int = 1000
    jitter_scale: float = 0.1
    metric: str = "identity"
    seed: int = 0
    bandwidth: float = None
    threads: int = 1
    record_every: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.jitter_scale < 0:
            raise ValueError("jitter_scale must be non-negative")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    step: int = 0
    seed: int = 0
    layout: tuple = None
    trajectory: list = field(default_factory=list, repr=False)
    step_norms: list = field(default_factory=list, repr=False)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if self.particles.shape[0] < 1:
            raise ValueError("ensemble needs at least one particle")

    @property
    def n_particles(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]


def init_particles(w_map, n_particles, jitter_scale, seed):
    """``w_map`` plus ``jitter_scale`` times standard normal draws."""
    if jitter_scale < 0:
        raise ValueError("jitter_scale must be non-negative")
    w_map = np.asarray(w_map, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    X = w_map + jitter_scale * rng.standard_normal((n_particles, w_map.size))
    return ParticleEnsemble(X, 0, seed)


# --------------------------------------------------------------------------
# kernel

def _metric_apply(metric, x):
    if metric is None:
        return x
    metric = np.asarray(metric)
    return x * metric if metric.ndim == 1 else x @ metric


def rbf_kernel(w, w2, metric=None, h=1.0):
    """``k = exp(-|w - w2|^2_M / h)`` and its gradient with respect to ``w``.

    ``metric`` is ``None`` (identity), a diagonal vector or a dense SPD matrix.
    """
    w = np.asarray(w, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w.shape != w2.shape:
        raise ValueError("kernel arguments differ in shape")
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    d = w - w2
    Md = _metric_apply(metric, d)
    k = float(np.exp(-float(d @ Md) / h))
    return k, (-2.0 / h) * k * Md


def pairwise_sq_dist(X, metric=None):
    """Matrix of ``(x_i - x_j)^T M (x_i - x_j)``, clipped at zero."""
    X = np.asarray(X, dtype=np.float64)
    MX = _metric_apply(metric, X)
    q = np.einsum("ij,ij->i", X, MX)
    sq = q[:, None] + q[None, :] - 2.0 * (X @ MX.T)
    np.fill_diagonal(sq, 0.0)
    return np.maximum(sq, 0.0)


def median_bandwidth(X, metric=None, sq=None):
    """``h = median_distance^2 / log N``; falls back to 1 when degenerate."""
    X = np.atleast_2d(X)
    n = X.shape[0]
    if n < 2:
        return 1.0
    if sq is None:
        sq = pairwise_sq_dist(X, metric)
    iu = np.triu_indices(n, 1)
    dbar = float(np.median(np.sqrt(sq[iu])))
    if dbar == 0.0:
        return 1.0
    return dbar ** 2 / np.log(n)


def svgd_direction(X, scores, metric=None, h=None):
    """Stein direction ``phi(x_i) = mean_j [k_ji s_j + grad_{x_j} k(x_j, x_i)]``.

    Returns ``(phi, h)``.
    """
    X = np.asarray(X, dtype=np.float64)
    S = np.asarray(scores, dtype=np.float64)
    n = X.shape[0]
    sq = pairwise_sq_dist(X, metric)
    if h is None:
        h = median_bandwidth(X, sq=sq)
    K = np.exp(-sq / h)
    # grad_{x_j} k(x_j, x_i) = (2/h) M (x_i - x_j) k_ij
    repulse = (2.0 / h) * _metric_apply(metric, K.sum(axis=1)[:, None] * X - K @ X)
    return (K @ S + repulse) / n, h


# --------------------------------------------------------------------------
# driver

def particle_scores(score_fn, X, step, seed, threads=1, indexed=False):
    """Scores at each row of ``X``; per-particle seeds do not depend on thread count.

    ``score_fn(x, seed)`` is called per particle, or ``score_fn(x, seed, i)``
    when ``indexed`` is set.
    """
    seeds = [int(np.random.SeedSequence([seed, step, i]).generate_state(1)[0])
             for i in range(X.shape[0])]

    def one(i):
        args = (X[i], seeds[i], i) if indexed else (X[i], seeds[i])
        s = np.asarray(score_fn(*args), dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise NonFiniteValue(f"non-finite score at particle {i}", index=i)
        return s

    if threads <= 1:
        rows = [one(i) for i in range(X.shape[0])]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(X.shape[0])))
    return np.stack(rows)


def svgd_step(ensemble, score_fn, cfg, metric=None, indexed=False):
    """One simultaneous update of every particle; returns a new ensemble."""
    X = ensemble.particles
    S = particle_scores(score_fn, X, ensemble.step, cfg.seed, cfg.threads, indexed)
    phi, h = svgd_direction(X, S, metric, cfg.bandwidth)
    out = ParticleEnsemble(X + cfg.lr * phi, ensemble.step + 1, ensemble.seed,
                           ensemble.layout, ensemble.trajectory, ensemble.step_norms,
                           ensemble.info)
    out.step_norms.append(float(np.mean(np.linalg.norm(phi, axis=1))))
    out.info["bandwidth"] = float(h)
    return out


def run_svgd(X0, score_fn, cfg, metric=None, to_full=None, callback=None, indexed=False):
    """Iterate :func:`svgd_step` from particles ``X0``.

    ``to_full`` maps working coordinates to full parameter vectors when
    recording trajectories (used by the projected variant).
    """
    ens = ParticleEnsemble(np.array(X0, dtype=np.float64), 0, cfg.seed)
    record = cfg.record_every
    full = (lambda X: X) if to_full is None else to_full
    if record:
        ens.trajectory.append(full(ens.particles).copy())
    for k in range(cfg.n_steps):
        ens = svgd_step(ens, score_fn, cfg, metric, indexed)
        if record and ens.step % record == 0:
            ens.trajectory.append(full(ens.particles).copy())
        if callback is not None:
            callback(ens)
    return ens


def kernel_metric(target, cfg, w_ref):
    """Diagonal kernel weights: ones, or the Gauss-Newton diagonal at ``w_ref``."""
    if cfg.metric == "identity":
        return None
    diag = np.asarray(target.hessian_diag(w_ref), dtype=np.float64)
    return np.maximum(diag, 1e-6)


def svgd_sample(target, cfg, w_map=None, init=None, callback=None):
    """Run SVGD on ``target`` from ``init`` or from ``w_map`` plus jitter."""
    if init is None:
        if w_map is None:
            raise ValueError("either w_map or init is required")
        init = init_particles(w_map, cfg.n_particles, cfg.jitter_scale, cfg.seed).particles
    init = np.atleast_2d(np.asarray(init, dtype=np.float64))
    ref = w_map if w_map is not None else init.mean(axis=0)
    metric = kernel_metric(target, cfg, ref)
    ens = run_svgd(init, target.score, cfg, metric, callback=callback)
    ens.layout = getattr(target, "layout", None)
    return ens
