"""Likelihood-informed active subspaces and projected SVGD."""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import ndtri
from scipy.stats import qmc

from ..errors import EigenFailure
from .svgd import ParticleEnsemble, init_particles, kernel_metric, run_svgd


def lanczos(apply, n, k=None, seed=0, breakdown=1e-10):
    """Eigenpairs of a symmetric operator by Lanczos with full reorthogonalization.

    ``apply`` maps an ``n``-vector to an ``n``-vector.  Runs ``k`` iterations
    (default ``n``, which is exact up to rounding); on breakdown the
    recurrence restarts with a random vector orthogonal to the basis so far.
    Returns eigenvalues in descending order and the matching Ritz vectors.
    """
    k = n if k is None else min(k, n)
    if k == 0:
        return np.zeros(0), np.zeros((n, 0))
    rng = np.random.default_rng(seed)
    Q = np.zeros((n, k))
    alpha = np.zeros(k)
    beta = np.zeros(max(k - 1, 0))
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    scale = 0.0
    for j in range(k):
        Q[:, j] = q
        z = np.asarray(apply(q), dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise EigenFailure("operator returned non-finite values")
        alpha[j] = q @ z
        scale = max(scale, abs(alpha[j]), np.linalg.norm(z))
        # two passes of classical Gram-Schmidt against the whole basis
        for _ in range(2):
            z -= Q[:, :j + 1] @ (Q[:, :j + 1].T @ z)
        if j == k - 1:
            break
        b = np.linalg.norm(z)
        if b <= breakdown * max(scale, 1.0):
            beta[j] = 0.0
            z = rng.standard_normal(n)
            for _ in range(2):
                z -= Q[:, :j + 1] @ (Q[:, :j + 1].T @ z)
            nz = np.linalg.norm(z)
            if nz == 0:
                raise EigenFailure("could not restart the Lanczos recurrence")
            q = z / nz
        else:
            beta[j] = b
            q = z / b
    try:
        lam, S = eigh_tridiagonal(alpha, beta)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    order = np.argsort(lam)[::-1]
    return lam[order], Q @ S[:, order]


@dataclass
class ActiveSubspace:
    """Orthonormal basis ``Psi`` (columns), eigenvalues and reference point."""

    basis: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    blocks: list = field(default_factory=list)
    spectra: dict = field(default_factory=dict)

    @property
    def rank(self):
        return self.basis.shape[1]

    @property
    def dim(self):
        return self.basis.shape[0]

    def P(self):
        return self.basis @ self.basis.T

    def Q(self):
        return np.eye(self.dim) - self.P()

    def project(self, w):
        """Active coordinates ``Psi^T (w - mean)``; works row-wise on 2-D input."""
        return (np.asarray(w) - self.mean) @ self.basis

    def inactive(self, w):
        """``Q w`` row-wise."""
        w = np.asarray(w)
        return w - (w @ self.basis) @ self.basis.T

    def reconstruct(self, w_r, w_perp=0.0):
        return np.asarray(w_r) @ self.basis.T + self.mean + w_perp


def _block_slices(layout, per_layer, dim):
    if not per_layer or not layout:
        return [("all", slice(0, dim))]
    return [(name, slice(off, off + n)) for name, off, n in layout if n > 0]


def build_active_subspace(target, w_bar, sigma0=1.0, tol=1e-2, per_layer=True,
                          rank_fraction=None, max_iter=None, seed=0):
    """Dominant eigenvectors of ``sigma0^2 H`` with ``H`` the Gauss-Newton Hessian.

    With ``per_layer`` the problem is restricted to each layer's diagonal
    block and truncated independently, giving a block-diagonal basis.
    ``tol`` keeps eigenvalues at least ``tol`` times the block maximum;
    ``rank_fraction`` (if given) instead keeps that fraction of each block's
    dimensions, largest eigenvalues first.
    """
    w_bar = np.asarray(w_bar, dtype=np.float64)
    d = w_bar.size
    cols, vals, names, spectra = [], [], [], {}
    for bi, (name, sl) in enumerate(_block_slices(getattr(target, "layout", None),
                                                  per_layer, d)):
        nb = sl.stop - sl.start

        def apply(v, sl=sl):
            full = np.zeros(d)
            full[sl] = v
            return sigma0 ** 2 * np.asarray(target.hessian_apply(w_bar, full))[sl]

        k = nb if max_iter is None else min(nb, max_iter)
        lam, V = lanczos(apply, nb, k, seed=seed + bi)
        spectra[name] = lam.tolist()
        top = lam[0] if lam.size else 0.0
        if top <= 0:
            keep = 0
        elif rank_fraction is not None:
            keep = min(int(np.ceil(rank_fraction * nb)), int(np.sum(lam > 0)))
        else:
            keep = int(np.sum(lam >= tol * top))
        for j in range(keep):
            col = np.zeros(d)
            col[sl] = V[:, j]
            cols.append(col)
            vals.append(lam[j])
            names.append(name)
    basis = np.array(cols).T if cols else np.zeros((d, 0))
    return ActiveSubspace(basis, np.array(vals), w_bar.copy(), names, spectra)


def lhs_normal(n, dim, sigma, seed):
    """Latin-hypercube draws from ``N(0, sigma^2)`` in each coordinate."""
    u = qmc.LatinHypercube(d=dim, seed=seed).random(n)
    return sigma * ndtri(u)


def psvgd_sample(target, subspace, cfg, sigma0=1.0, w_map=None, init=None,
                 inactive_draws=None, callback=None):
    """SVGD on the active coordinates with inactive parts frozen at prior draws.

    Particles are ``w = Psi w_r + w_bar + w_perp`` with
    ``w_perp = Q (xi - w_bar)`` and ``xi`` stratified prior draws.  The
    active score is ``Psi^T`` times the full score, and the kernel metric is
    the full metric restricted to the subspace, so a complete basis
    reproduces plain SVGD exactly.
    """
    if subspace.rank < 1:
        raise ValueError("active subspace is empty")
    Psi, w_bar = subspace.basis, subspace.mean
    if init is None:
        ref = w_bar if w_map is None else w_map
        init = init_particles(ref, cfg.n_particles, cfg.jitter_scale, cfg.seed).particles
    init = np.atleast_2d(np.asarray(init, dtype=np.float64))
    n = init.shape[0]
    if inactive_draws is None:
        xi = lhs_normal(n, subspace.dim, sigma0, cfg.seed)
        w_perp = subspace.inactive(xi - w_bar)
    else:
        w_perp = subspace.inactive(np.asarray(inactive_draws) - w_bar)

    def to_full(Xr):
        return Xr @ Psi.T + w_bar + w_perp

    def score_fn(x_r, seed, i):
        return Psi.T @ np.asarray(target.score(x_r @ Psi.T + w_bar + w_perp[i], seed))

    metric = kernel_metric(target, cfg, w_bar if w_map is None else w_map)
    if metric is not None:
        metric = Psi.T @ (metric[:, None] * Psi)

    ens = run_svgd(subspace.project(init), score_fn, cfg, metric, to_full=to_full,
                   callback=callback, indexed=True)
    full = ParticleEnsemble(to_full(ens.particles), ens.step, ens.seed,
                            getattr(target, "layout", None), ens.trajectory,
                            ens.step_norms, dict(ens.info))
    full.info["rank"] = subspace.rank
    full.info["reduced"] = ens.particles
    return full
