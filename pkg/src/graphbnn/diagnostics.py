"""Posterior and push-forward diagnostics."""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist
from scipy.stats import norm

from .errors import DisconnectedGraph, LengthMismatch
from .models import make_operators, predict


# --------------------------------------------------------------------------
# CDF similarity

@dataclass
class EmpiricalCdf:
    """Uniform-weight step CDF of a sample; a single value gives a Heaviside step."""

    values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=np.float64).ravel())
        if v.size == 0:
            raise ValueError("empirical CDF of an empty sample")
        if not np.all(np.isfinite(v)):
            raise ValueError("empirical CDF needs finite values")
        self.values = v

    def __call__(self, x):
        return np.searchsorted(self.values, x, side="right") / self.values.size


def _as_cdf(c):
    return c if isinstance(c, EmpiricalCdf) else EmpiricalCdf(c)


def kss(cdf1, cdf2):
    """``integral |F2 - F1| dy`` for two step CDFs, exact over merged breakpoints."""
    a, b = _as_cdf(cdf1), _as_cdf(cdf2)
    x = np.union1d(a.values, b.values)
    if x.size < 2:
        return 0.0
    # both CDFs are constant on [x_k, x_{k+1})
    diff = np.abs(a(x[:-1]) - b(x[:-1]))
    return float(np.sum(diff * np.diff(x)))


def kss_normal(samples, mean=0.0, sd=1.0):
    """``integral |F_emp - Phi| dy`` against a normal CDF, in closed form.

    Uses the antiderivative ``G(x) = x Phi(z) + sd phi(z) - mean Phi(z)`` of the
    normal CDF on each interval where the empirical CDF is constant.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size

    def G(t):
        t = np.asarray(t, dtype=np.float64)
        z = (t - mean) / sd
        return (t - mean) * norm.cdf(z) + sd * norm.pdf(z)

    def seg(lo, hi, level):
        # integral over [lo, hi] of |level - Phi|, splitting where Phi crosses level
        if hi <= lo:
            return 0.0
        if level <= 0.0:
            return float(G(hi) - G(lo))
        if level >= 1.0:
            return float((hi - lo) - (G(hi) - G(lo)))
        c = mean + sd * norm.ppf(level)
        total = 0.0
        a, b = lo, min(hi, c)
        if b > a:
            total += level * (b - a) - (G(b) - G(a))
        a, b = max(lo, c), hi
        if b > a:
            total += (G(b) - G(a)) - level * (b - a)
        return float(total)

    # tails: below the first sample F_emp = 0, above the last F_emp = 1
    total = float(G(x[0]))
    z_hi = (x[-1] - mean) / sd
    total += sd * norm.pdf(z_hi) - (x[-1] - mean) * norm.sf(z_hi)
    for k in range(n - 1):
        total += seg(x[k], x[k + 1], (k + 1) / n)
    return total


# --------------------------------------------------------------------------
# dependence

def _double_centered(X):
    D = cdist(X, X)
    return D - D.mean(axis=0) - D.mean(axis=1)[:, None] + D.mean()


def distance_correlation(X, Y):
    """Sample distance correlation (V-statistic), in [0, 1]; 0 if a variance is 0."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    X = X.reshape(len(X), -1)
    Y = Y.reshape(len(Y), -1)
    if len(X) != len(Y):
        raise LengthMismatch(f"{len(X)} vs {len(Y)} samples")
    if len(X) < 2:
        raise ValueError("distance correlation needs at least two samples")
    A, B = _double_centered(X), _double_centered(Y)
    dcov2 = max(float(np.mean(A * B)), 0.0)
    vx, vy = float(np.mean(A * A)), float(np.mean(B * B))
    if vx <= 0.0 or vy <= 0.0:
        return 0.0
    return float(min(np.sqrt(dcov2 / np.sqrt(vx * vy)), 1.0))


def layer_dcor_table(samples, layout):
    """Distance correlation between every pair of layer blocks."""
    samples = np.atleast_2d(samples)
    rows = []
    for a, (na, oa, la) in enumerate(layout):
        for nb, ob, lb in layout[a:]:
            rows.append((na, nb, distance_correlation(samples[:, oa:oa + la],
                                                      samples[:, ob:ob + lb])))
    return rows


# --------------------------------------------------------------------------
# push-forward

@dataclass
class PushForwardSummary:
    predictions: np.ndarray          # (n_data, n_draws, T)
    map_prediction: np.ndarray       # (n_data, T)
    data: np.ndarray                 # (n_data, T)
    q05: np.ndarray
    q50: np.ndarray
    q95: np.ndarray
    kss: np.ndarray                  # (n_data, T) against a step at the data value
    kss_per_step: np.ndarray         # (T,)
    cmn: np.ndarray                  # (T, T)
    covariance: np.ndarray           # (T, T)
    discrepancy: np.ndarray          # (n_data,) RMSE of the MAP trace
    ranking: dict = field(default_factory=dict)

    def coverage(self):
        """Fraction of data points inside the 5-95% band."""
        inside = (self.data >= self.q05) & (self.data <= self.q95)
        return float(np.mean(inside))


def canonical_rows(W):
    """Rows in lexicographic order, so outputs do not depend on sample order."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    order = np.lexsort(W.T[::-1])
    return W[order]


def predict_all(spec, samples, W):
    """Predictions ``(n_data, n_draws, T)``; data may mix trace lengths only if T agrees."""
    W = np.atleast_2d(W)
    ops = make_operators(spec, list(samples))
    return np.stack([predict(spec, ops, w) for w in W], axis=1)


def cmn_matrix(preds, ref):
    """Step-by-step correlation of deviations from ``ref`` averaged over samples and draws.

    ``preds`` is ``(n_data, n_draws, T)``, ``ref`` is ``(n_data, T)``.  Returns
    ``(correlation, covariance)`` with zero off-diagonal entries where a
    step has zero variance.
    """
    dy = preds - ref[:, None, :]
    flat = dy.reshape(-1, dy.shape[-1])
    cov = flat.T @ flat / flat.shape[0]
    sd = np.sqrt(np.diag(cov))
    corr = np.zeros_like(cov)
    ok = sd > 0
    corr[np.ix_(ok, ok)] = cov[np.ix_(ok, ok)] / np.outer(sd[ok], sd[ok])
    np.fill_diagonal(corr, np.where(ok, 1.0, 0.0))
    return corr, cov


def rank_cases(discrepancy):
    """Indices of the lowest, median and highest discrepancy samples."""
    order = np.argsort(discrepancy, kind="stable")
    return {"min": int(order[0]), "median": int(order[(len(order) - 1) // 2]),
            "max": int(order[-1])}


def pushforward(spec, W, dataset, w_map=None):
    """Push weight draws ``W`` through the model for every sample in ``dataset``."""
    W = canonical_rows(W)
    dataset = list(dataset)
    preds = predict_all(spec, dataset, W)
    data = np.stack([s.targets for s in dataset])
    if w_map is None:
        w_map = W.mean(axis=0)
    ymap = predict_all(spec, dataset, w_map[None, :])[:, 0, :]
    q05, q50, q95 = np.quantile(preds, [0.05, 0.5, 0.95], axis=1)
    n, _, T = preds.shape
    K = np.empty((n, T))
    for i in range(n):
        for t in range(T):
            K[i, t] = kss(preds[i, :, t], [data[i, t]])
    corr, cov = cmn_matrix(preds, ymap)
    disc = np.sqrt(np.mean((ymap - data) ** 2, axis=1))
    return PushForwardSummary(preds, ymap, data, q05, q50, q95, K, K.mean(axis=0),
                              corr, cov, disc, rank_cases(disc))


# --------------------------------------------------------------------------
# embedding

def spectral_embedding(samples, k_neighbors=10, n_components=2):
    """Laplacian eigenmap coordinates of ``samples`` (rows).

    Neighbourhoods contain every point within the k-th neighbour distance, so
    tied points are treated alike.  Affinities are Gaussian with the median
    neighbour distance as scale, symmetrized by the maximum.  Coordinates are
    eigenvectors 2 .. n_components + 1 of the symmetric normalized Laplacian,
    rescaled by ``D^-1/2`` and sign-fixed so the largest entry is positive.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = X.shape[0]
    if n < n_components + 2:
        raise ValueError("need at least n_components + 2 samples")
    k = min(k_neighbors, n - 1)
    D = cdist(X, X)
    kth = np.sort(D, axis=1)[:, k]
    mask = D <= kth[:, None]
    np.fill_diagonal(mask, False)
    nz = D[mask]
    sigma = float(np.median(nz)) if nz.size else 0.0
    if sigma <= 0.0:
        sigma = float(np.max(D)) or 1.0
    Wm = np.where(mask, np.exp(-(D / sigma) ** 2), 0.0)
    Wm = np.maximum(Wm, Wm.T)
    n_comp, _ = connected_components(Wm > 0, directed=False)
    if n_comp > 1:
        raise DisconnectedGraph(f"neighbour graph has {n_comp} components; increase k")
    deg = Wm.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    Lsym = np.eye(n) - dinv[:, None] * Wm * dinv[None, :]
    lam, V = np.linalg.eigh(0.5 * (Lsym + Lsym.T))
    Y = V[:, 1:n_components + 1] * dinv[:, None]
    for j in range(Y.shape[1]):
        if Y[np.argmax(np.abs(Y[:, j])), j] < 0:
            Y[:, j] = -Y[:, j]
    return Y
