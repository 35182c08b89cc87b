"""Gaussian prior and likelihood over network weights, MAP training, scaling.

:class:`PosteriorModel` exposes the interface every sampler consumes:
``dim``, ``layout``, ``log_density(w)``, ``score(w, seed)``,
``hessian_apply(w, v)`` and ``hessian_diag(w)``.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DegenerateChannel, Diverged, DimensionMismatch, NonFiniteValue
from .models import GraphSample, ModelSpec, make_operators, predict

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianPrior:
    sigma0: float = 1.0

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")

    def log_density(self, w):
        w = ad.value(w) if not isinstance(w, ad.Tensor) else w
        n = ad.value(w).size
        return (-0.5 / self.sigma0 ** 2) * ad.sum(ad.mul(w, w)) \
            - 0.5 * n * (LOG_2PI + 2.0 * np.log(self.sigma0))

    def score(self, w):
        return -np.asarray(w) / self.sigma0 ** 2

    def sample(self, rng, shape):
        return self.sigma0 * rng.standard_normal(shape)


@dataclass(frozen=True)
class ObservationModel:
    sigma_eps: float = 0.05

    def __post_init__(self):
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")


class PosteriorModel:
    """Unnormalized posterior ``p(D | w) p(w)`` for one model and dataset.

    With ``subsample_size`` set, :meth:`score` draws that many samples
    uniformly with replacement on every call and rescales the likelihood part
    by ``N_D / subsample_size``.
    """

    def __init__(self, spec, dataset, prior=None, obs=None, subsample_size=None):
        if not isinstance(spec, ModelSpec):
            raise TypeError("spec must be a ModelSpec")
        dataset = list(dataset)
        if not dataset:
            raise ValueError("dataset is empty")
        for s in dataset:
            if not isinstance(s, GraphSample):
                raise TypeError("dataset entries must be GraphSample")
        if subsample_size is not None and not 1 <= subsample_size <= len(dataset):
            raise ValueError("subsample_size must lie in [1, len(dataset)]")
        self.spec = spec
        self.dataset = tuple(dataset)
        self.prior = prior or GaussianPrior()
        self.obs = obs or ObservationModel()
        self.subsample_size = subsample_size
        self._groups = self._group(range(len(dataset)))
        self.n_obs = sum(s.n_steps for s in dataset)

    # plumbing ----------------------------------------------------------------

    def _group(self, indices):
        """Batch operators keyed by trace length (one batch per length)."""
        by_len = {}
        for i in indices:
            by_len.setdefault(self.dataset[i].n_steps, []).append(i)
        return [(idx, make_operators(self.spec, [self.dataset[i] for i in idx]))
                for _, idx in sorted(by_len.items())]

    @property
    def dim(self):
        return self.spec.n_params

    @property
    def layout(self):
        return self.spec.layout()

    @property
    def n_data(self):
        return len(self.dataset)

    def _check_w(self, w):
        n = ad.value(w).shape
        if n != (self.dim,):
            raise DimensionMismatch(f"expected {self.dim} parameters, got {n}")

    def _sq_residual(self, w, groups):
        total = 0.0
        for _, ops in groups:
            r = ad.sub(predict(self.spec, ops, w), ops.targets)
            total = ad.add(total, ad.sum(ad.mul(r, r)))
        return total

    def _residuals(self, w, groups):
        parts = [ad.reshape(ad.sub(predict(self.spec, ops, w), ops.targets), (-1,))
                 for _, ops in groups]
        return parts[0] if len(parts) == 1 else ad.concatenate(parts)

    def _log_lik(self, w, groups, n_obs, scale=1.0):
        s2 = self.obs.sigma_eps ** 2
        ll = ad.mul(-0.5 / s2, self._sq_residual(w, groups))
        ll = ad.sub(ll, 0.5 * n_obs * (LOG_2PI + np.log(s2)))
        return ad.mul(scale, ll) if scale != 1.0 else ll

    # public ------------------------------------------------------------------

    def predictions(self, w):
        """Predicted traces, one array per sample (dataset order)."""
        w = np.asarray(w, dtype=np.float64)
        self._check_w(w)
        out = [None] * self.n_data
        for idx, ops in self._groups:
            y = predict(self.spec, ops, w)
            for k, i in enumerate(idx):
                out[i] = y[k]
        return out

    def mse(self, w):
        w = np.asarray(w, dtype=np.float64)
        return float(self._sq_residual(w, self._groups)) / self.n_obs

    def log_likelihood(self, w):
        self._check_w(w)
        return self._log_lik(w, self._groups, self.n_obs)

    def log_density(self, w):
        """Log-likelihood plus log-prior, Gaussian normalizing constants included."""
        self._check_w(w)
        val = ad.add(self._log_lik(w, self._groups, self.n_obs), self.prior.log_density(w))
        if not isinstance(val, ad.Tensor) and not np.isfinite(val):
            raise NonFiniteValue("log posterior is not finite")
        return val

    log_posterior = log_density

    def value_and_score(self, w):
        return ad.value_and_grad(self.log_density, np.asarray(w, dtype=np.float64))

    def score(self, w, seed=None):
        """Gradient of the log posterior; subsampled when ``subsample_size`` is set."""
        w = np.asarray(w, dtype=np.float64)
        self._check_w(w)
        m = self.subsample_size
        if m is None or m == self.n_data:
            return ad.grad(self.log_density, w)
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, self.n_data, size=m)
        groups = self._group(idx)
        n_obs = sum(self.dataset[i].n_steps for i in idx)
        scale = self.n_data / m
        g = ad.grad(lambda x: self._log_lik(x, groups, n_obs, scale), w)
        return g + self.prior.score(w)

    def gn_hessian_apply(self, w, v):
        """Gauss-Newton action ``J^T J v / sigma_eps^2`` of the negative log-likelihood."""
        w = np.asarray(w, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        self._check_w(w)
        if v.shape != w.shape:
            raise DimensionMismatch("v must match w")
        _, jtjv = ad.jtj_apply(lambda x: self._residuals(x, self._groups), w, v)
        return jtjv / self.obs.sigma_eps ** 2

    hessian_apply = gn_hessian_apply

    def jacobian(self, w):
        """Dense Jacobian of all stacked predictions (rows follow dataset order)."""
        w = np.asarray(w, dtype=np.float64)
        blocks = [ad.jacobian(lambda x, o=ops: ad.reshape(predict(self.spec, o, x), (-1,)), w)
                  for _, ops in self._groups]
        return np.vstack(blocks)

    def hessian_diag(self, w):
        """Diagonal of the Gauss-Newton Hessian (column sums of squared Jacobian)."""
        J = self.jacobian(w)
        return np.einsum("ij,ij->j", J, J) / self.obs.sigma_eps ** 2

    def with_prior(self, prior):
        return PosteriorModel(self.spec, self.dataset, prior, self.obs, self.subsample_size)

    def subset(self, indices):
        return PosteriorModel(self.spec, [self.dataset[i] for i in indices], self.prior,
                              self.obs, None)


# --------------------------------------------------------------------------
# MAP training

@dataclass
class MapConfig:
    lr: float = 1e-3
    max_epochs: int = 5000
    patience: int = 50
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("lr > 0, max_epochs >= 0 and patience >= 1 required")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class MapResult:
    w: np.ndarray
    history: dict = field(default_factory=dict)
    best_epoch: int = 0
    epochs: int = 0
    train_indices: list = field(default_factory=list)
    val_indices: list = field(default_factory=list)

    @property
    def final_loss(self):
        h = self.history.get("objective", [])
        return h[self.best_epoch] if h else float("nan")


def split_indices(n, val_fraction, seed):
    """Seeded train / validation split; validation is empty if it would use every sample."""
    n_val = int(round(val_fraction * n))
    if n_val == 0 or n_val >= n:
        return list(range(n)), []
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def train_map(P, init, config=None, callback=None):
    """Adam ascent on the log posterior with early stopping.

    The objective is the negative log posterior over the training split.
    Early stopping tracks the validation MSE when a validation split exists,
    otherwise the objective itself.  The best weights seen are returned.
    """
    cfg = config or MapConfig()
    w = np.array(getattr(init, "data", init), dtype=np.float64)
    if w.shape != (P.dim,):
        raise DimensionMismatch(f"init has {w.shape}, expected ({P.dim},)")
    train_idx, val_idx = split_indices(P.n_data, cfg.val_fraction, cfg.seed)
    Pt = P.subset(train_idx) if val_idx else P
    Pv = P.subset(val_idx) if val_idx else None

    hist = {"objective": [], "train_mse": [], "val_mse": [], "monitor": [], "best": []}
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    best_w, best_val, best_epoch = w.copy(), np.inf, 0
    wait = 0
    epoch = 0
    while True:
        try:
            lp, g = Pt.value_and_score(w)
        except NonFiniteValue as exc:
            raise Diverged(f"loss became non-finite at epoch {epoch}") from exc
        obj = -lp
        train_mse = Pt.mse(w)
        val_mse = Pv.mse(w) if Pv is not None else float("nan")
        monitor = val_mse if Pv is not None else obj
        if not np.isfinite(monitor):
            raise Diverged(f"monitored loss non-finite at epoch {epoch}")
        hist["objective"].append(obj)
        hist["train_mse"].append(train_mse)
        hist["val_mse"].append(val_mse)
        hist["monitor"].append(monitor)
        if monitor < best_val:
            best_val, best_w, best_epoch, wait = monitor, w.copy(), epoch, 0
        else:
            wait += 1
        hist["best"].append(best_val)
        if callback is not None:
            callback(epoch, w, hist)
        if epoch >= cfg.max_epochs or wait >= cfg.patience:
            break
        epoch += 1
        # descend the objective, i.e. ascend the log posterior
        m = cfg.beta1 * m + (1 - cfg.beta1) * (-g)
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** epoch)
        vhat = v / (1 - cfg.beta2 ** epoch)
        w = w - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return MapResult(best_w, hist, best_epoch, epoch, train_idx, val_idx)


# --------------------------------------------------------------------------
# normalization

@dataclass
class NormalizationRecord:
    """Per-channel affine maps ``(x - lo) / (hi - lo)``; ``None`` marks identity."""

    features: list
    drivers: list
    targets: tuple

    @staticmethod
    def _fwd(x, lohi):
        return x if lohi is None else (x - lohi[0]) / (lohi[1] - lohi[0])

    @staticmethod
    def _inv(x, lohi):
        return x if lohi is None else x * (lohi[1] - lohi[0]) + lohi[0]

    def _cols(self, x, spec, fn):
        x = np.array(x, dtype=np.float64)
        for k, lohi in enumerate(spec):
            x[:, k] = fn(x[:, k], lohi)
        return x

    def apply(self, sample):
        return sample.replace(
            node_features=self._cols(sample.node_features, self.features, self._fwd),
            time_inputs=self._cols(sample.time_inputs, self.drivers, self._fwd),
            targets=self._fwd(sample.targets, self.targets))

    def invert(self, sample):
        return sample.replace(
            node_features=self._cols(sample.node_features, self.features, self._inv),
            time_inputs=self._cols(sample.time_inputs, self.drivers, self._inv),
            targets=self._inv(sample.targets, self.targets))

    def targets_to_raw(self, y):
        return self._inv(np.asarray(y, dtype=np.float64), self.targets)

    def targets_to_normalized(self, y):
        return self._fwd(np.asarray(y, dtype=np.float64), self.targets)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        def fix(x):
            return None if x is None else tuple(float(v) for v in x)
        return cls([fix(x) for x in d["features"]], [fix(x) for x in d["drivers"]],
                   fix(d["targets"]))


def _channel_range(x, name):
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi > lo:
        return (lo, hi)
    if lo == 0.0 and hi == 0.0:
        # all-zero augmentation channels carry no information; leave them alone
        return None
    raise DegenerateChannel(f"channel {name} is constant ({lo})")


def fit_normalization(samples):
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to normalize")
    X = np.vstack([s.node_features for s in samples])
    F = np.vstack([s.time_inputs for s in samples])
    Y = np.concatenate([s.targets for s in samples])
    return NormalizationRecord(
        [_channel_range(X[:, k], f"feature[{k}]") for k in range(X.shape[1])],
        [_channel_range(F[:, k], f"driver[{k}]") for k in range(F.shape[1])],
        _channel_range(Y, "targets"))


def normalize_dataset(raw_samples, record=None):
    """Map every channel to [0, 1] using ``record`` or ranges fit on ``raw_samples``."""
    raw_samples = list(raw_samples)
    if record is None:
        record = fit_normalization(raw_samples)
    return [record.apply(s) for s in raw_samples], record
