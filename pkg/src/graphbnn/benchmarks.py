"""Analytic three-dimensional test posteriors.

Both expose the sampler interface (``dim``, ``layout``, ``log_density``,
``score``, ``hessian_apply``, ``hessian_diag``).  The Hessian operators are
the likelihood part only (the prior is a unit normal), which is what the
active-subspace construction consumes.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .errors import SingularAtAxis

LOG_2PI = np.log(2.0 * np.pi)


def _default_cov():
    return np.array([[0.25, 0.125, 0.0],
                     [0.125, 0.25, 0.0],
                     [0.0, 0.0, 1.0]])


@dataclass
class MvnBenchmark:
    """Gaussian posterior whose third direction carries no likelihood information.

    With a unit-normal prior the implied likelihood precision is
    ``inv(cov) - I``, which vanishes along the third axis.
    """

    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    covariance: np.ndarray = field(default_factory=_default_cov)
    prior_sigma: float = 1.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.size
        if self.covariance.shape != (d, d) or not np.allclose(self.covariance,
                                                               self.covariance.T):
            raise ValueError("covariance must be a symmetric matrix matching mean")
        try:
            self._chol = np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        self.precision = np.linalg.inv(self.covariance)
        self.precision = 0.5 * (self.precision + self.precision.T)
        self.likelihood_hessian = self.precision - np.eye(d) / self.prior_sigma ** 2
        self._logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))

    @property
    def dim(self):
        return self.mean.size

    @property
    def layout(self):
        return (("w", 0, self.dim),)

    def log_density(self, w):
        d = np.asarray(w, dtype=np.float64) - self.mean
        return float(-0.5 * d @ self.precision @ d - 0.5 * (self.dim * LOG_2PI + self._logdet))

    def score(self, w, seed=None):
        return -self.precision @ (np.asarray(w, dtype=np.float64) - self.mean)

    def hessian_apply(self, w, v):
        return self.likelihood_hessian @ np.asarray(v, dtype=np.float64)

    def hessian_diag(self, w):
        return np.diag(self.likelihood_hessian).copy()

    def cdf_marginal(self, k, x):
        return norm.cdf(x, self.mean[k], np.sqrt(self.covariance[k, k]))


@dataclass
class RingBenchmark:
    """Torus-like density concentrated near a circle of radius ``radius``.

    ``log pi = -(rho - R)^2 / (2 s_r^2) - w3^2 / (2 s_3^2)`` with
    ``rho = |(w1, w2)|``; the score is singular on the ``w3`` axis.
    """

    radius: float = 1.0
    sigma_r: float = 0.1
    sigma_3: float = 1.0

    def __post_init__(self):
        if not (self.radius > 0 and self.sigma_r > 0 and self.sigma_3 > 0):
            raise ValueError("radius, sigma_r and sigma_3 must be positive")

    dim = 3
    layout = (("w", 0, 3),)

    def log_density(self, w):
        w = np.asarray(w, dtype=np.float64)
        rho = np.hypot(w[0], w[1])
        return float(-0.5 * ((rho - self.radius) / self.sigma_r) ** 2
                     - 0.5 * (w[2] / self.sigma_3) ** 2)

    def score(self, w, seed=None):
        w = np.asarray(w, dtype=np.float64)
        rho = np.hypot(w[0], w[1])
        if rho == 0.0:
            raise SingularAtAxis("ring score undefined on the axis w1 = w2 = 0")
        radial = -(rho - self.radius) / self.sigma_r ** 2
        return np.array([radial * w[0] / rho, radial * w[1] / rho,
                         -w[2] / self.sigma_3 ** 2])

    def _residual_jacobian(self, w):
        w = np.asarray(w, dtype=np.float64)
        rho = np.hypot(w[0], w[1])
        if rho == 0.0:
            raise SingularAtAxis("ring Hessian undefined on the axis w1 = w2 = 0")
        return np.array([[w[0] / rho / self.sigma_r, w[1] / rho / self.sigma_r, 0.0],
                         [0.0, 0.0, 1.0 / self.sigma_3]])

    def hessian_apply(self, w, v):
        """Gauss-Newton action from residuals ``(rho - R)/s_r`` and ``w3/s_3``."""
        J = self._residual_jacobian(w)
        return J.T @ (J @ np.asarray(v, dtype=np.float64))

    def hessian_diag(self, w):
        J = self._residual_jacobian(w)
        return np.einsum("ij,ij->j", J, J)

    def radial_mean(self):
        """Mean of ``rho`` under the density, by quadrature of the radial marginal."""
        lo = max(0.0, self.radius - 12 * self.sigma_r)
        hi = self.radius + 12 * self.sigma_r

        def dens(r):
            return r * np.exp(-0.5 * ((r - self.radius) / self.sigma_r) ** 2)

        num = integrate.quad(lambda r: r * dens(r), lo, hi, epsabs=0, epsrel=1e-12)[0]
        den = integrate.quad(dens, lo, hi, epsabs=0, epsrel=1e-12)[0]
        return num / den


def angular_spread(samples):
    """Circular standard deviation of ``atan2(w2, w1)``: ``sqrt(-2 log |mean e^{i theta}|)``."""
    samples = np.atleast_2d(samples)
    theta = np.arctan2(samples[:, 1], samples[:, 0])
    Rbar = np.abs(np.mean(np.exp(1j * theta)))
    if Rbar <= 0:
        return np.inf
    return float(np.sqrt(-2.0 * np.log(min(Rbar, 1.0))))


BENCHMARKS = {"mvn": MvnBenchmark, "ring": RingBenchmark}


def make_benchmark(name, **kw):
    try:
        return BENCHMARKS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown benchmark {name!r}") from None
