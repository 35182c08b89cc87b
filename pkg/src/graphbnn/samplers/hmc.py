"""Hamiltonian Monte Carlo with leapfrog integration and Metropolis correction."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import NumericalError


@dataclass
class HmcConfig:
    """``dt`` leapfrog step, ``n_leapfrog`` steps per stage, ``beta`` momentum blend.

    ``mass`` is the diagonal of M (scalar or per-coordinate); ``thin`` and
    ``burn_in`` only affect which states are returned.  The blend
    ``beta * p_prev + (1 - beta) * eps`` shrinks the momentum variance below
    ``M`` for ``beta > 0``, so only ``beta = 0`` samples the target exactly.
    """

    dt: float = 0.1
    n_leapfrog: int = 10
    beta: float = 0.0
    mass: object = 1.0
    n_stages: int = 1000
    seed: int = 0
    burn_in: int = 0
    thin: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_leapfrog < 1:
            raise ValueError("n_leapfrog must be at least 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if np.any(np.asarray(self.mass, dtype=float) <= 0):
            raise ValueError("mass entries must be positive")
        if self.n_stages < 0 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("n_stages, burn_in >= 0 and thin >= 1 required")

    def to_dict(self):
        d = asdict(self)
        m = np.asarray(self.mass, dtype=float)
        d["mass"] = float(m) if m.ndim == 0 else m.tolist()
        return d


@dataclass
class HmcResult:
    samples: np.ndarray
    accepted: np.ndarray
    delta_h: np.ndarray
    log_density: np.ndarray
    final: np.ndarray = field(repr=False, default=None)

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted)) if self.accepted.size else float("nan")

    def stats(self):
        finite = self.delta_h[np.isfinite(self.delta_h)]
        return {
            "acceptance_rate": self.acceptance_rate,
            "n_stages": int(self.accepted.size),
            "n_samples": int(self.samples.shape[0]),
            "mean_abs_delta_h": float(np.mean(np.abs(finite))) if finite.size else None,
        }


def leapfrog(w, p, grad_potential, dt, n_steps, inv_mass=1.0):
    """Velocity-Verlet integration of ``dw/dt = M^-1 p``, ``dp/dt = -grad Phi``.

    Returns the end state ``(w, p)``.  Full momentum steps are fused between
    consecutive position updates so each step costs one gradient.
    """
    w = np.array(w, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    p = p - 0.5 * dt * grad_potential(w)
    for k in range(n_steps):
        w = w + dt * inv_mass * p
        g = grad_potential(w)
        p = p - (dt if k < n_steps - 1 else 0.5 * dt) * g
    return w, p


def kinetic(p, inv_mass):
    return 0.5 * float(np.sum(inv_mass * p * p))


def hmc_sample(target, cfg, w_init):
    """Run one chain on ``target`` (anything with ``log_density`` and ``score``).

    Each stage blends the previous momentum with a fresh draw, integrates
    ``n_leapfrog`` steps, and applies the Metropolis test with the full
    potential.  A numerical failure inside a stage counts as a rejection.
    Leapfrog gradients use ``target.score(w, seed)`` so a subsampled score is
    resampled at every evaluation.
    """
    rng = np.random.default_rng(cfg.seed)
    mass = np.broadcast_to(np.asarray(cfg.mass, dtype=np.float64),
                           np.shape(w_init)).copy()
    inv_mass = 1.0 / mass
    sqrt_mass = np.sqrt(mass)
    w = np.array(w_init, dtype=np.float64)
    logp = float(target.log_density(w))
    if not np.isfinite(logp):
        raise NumericalError("log density is not finite at the initial point")

    def grad_potential(x):
        seed = int(rng.integers(2 ** 63))
        return -np.asarray(target.score(x, seed), dtype=np.float64)

    p_prev = np.zeros_like(w)
    kept, acc, dh, lps = [], [], [], []
    for k in range(cfg.n_stages):
        eps = sqrt_mass * rng.standard_normal(w.shape)
        p0 = cfg.beta * p_prev + (1.0 - cfg.beta) * eps
        h0 = -logp + kinetic(p0, inv_mass)
        u = rng.random()
        try:
            w1, p1 = leapfrog(w, p0, grad_potential, cfg.dt, cfg.n_leapfrog, inv_mass)
            logp1 = float(target.log_density(w1))
            h1 = -logp1 + kinetic(p1, inv_mass)
            ok = np.isfinite(h1) and np.all(np.isfinite(w1))
        except NumericalError:
            ok = False
        delta = (h1 - h0) if ok else np.inf
        accept = ok and np.log(u) < -delta
        if accept:
            w, logp, p_prev = w1, logp1, p1
        else:
            p_prev = p0
        acc.append(accept)
        dh.append(delta)
        if k >= cfg.burn_in and (k - cfg.burn_in) % cfg.thin == 0:
            kept.append(w.copy())
            lps.append(logp)
    samples = np.array(kept).reshape(len(kept), w.size)
    return HmcResult(samples, np.array(acc, dtype=bool), np.array(dh), np.array(lps), w)


def hmc_chains(target, cfg, inits, threads=1):
    """Independent chains with seeds spawned from ``cfg.seed``; results in input order."""
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(inits))
    cfgs = [HmcConfig(**{**asdict(cfg), "seed": int(s.generate_state(1)[0])}) for s in seqs]
    if threads <= 1:
        return [hmc_sample(target, c, w0) for c, w0 in zip(cfgs, inits)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda a: hmc_sample(target, *a), zip(cfgs, inits)))
