import numpy as np
import pytest

from graphbnn.datagen import make_linear_dataset
from graphbnn.errors import DegenerateChannel, DimensionMismatch
from graphbnn.models import GraphSample, ModelSpec
from graphbnn.posterior import (GaussianPrior, MapConfig, NormalizationRecord,
                                ObservationModel, PosteriorModel, fit_normalization,
                                normalize_dataset, split_indices, train_map)


def conjugate(samples, spec, sigma_eps, sigma0):
    """Closed-form Gaussian posterior of the polynomial toy model."""
    f = np.concatenate([s.time_inputs[:, 0] for s in samples])
    y = np.concatenate([s.targets for s in samples])
    powers = range(0 if spec.intercept else 1, spec.degree + 1)
    Phi = np.stack([f ** k for k in powers], axis=1)
    A = Phi.T @ Phi / sigma_eps ** 2 + np.eye(Phi.shape[1]) / sigma0 ** 2
    cov = np.linalg.inv(A)
    return cov @ Phi.T @ y / sigma_eps ** 2, cov, Phi, y


@pytest.fixture
def linear_problem():
    spec = ModelSpec.linear_toy(degree=1, intercept=True, n_steps=5)
    data = make_linear_dataset(6, 5, (0.3, 0.8), 0.05, seed=1)
    P = PosteriorModel(spec, data, GaussianPrior(1.0), ObservationModel(0.05))
    return spec, data, P


def single_point(y):
    spec = ModelSpec.linear_toy(degree=0, intercept=True, n_steps=1)
    s = GraphSample(np.zeros((1, 1)), np.zeros((1, 1)), [[0.0]], [y])
    return spec, s


def test_zero_residual_likelihood_constant():
    spec, s = single_point(0.4)
    P = PosteriorModel(spec, [s], GaussianPrior(1.0), ObservationModel(0.05))
    assert np.isclose(P.log_likelihood(np.array([0.4])), -0.5 * np.log(2 * np.pi * 0.0025),
                      rtol=0, atol=1e-13)


def test_log_posterior_is_conjugate_quadratic(linear_problem):
    spec, data, P = linear_problem
    mean, cov, _, _ = conjugate(data, spec, 0.05, 1.0)
    prec = np.linalg.inv(cov)
    rng = np.random.default_rng(0)
    ref = P.log_density(mean)
    for _ in range(5):
        w = mean + rng.standard_normal(2) * 0.1
        d = w - mean
        assert np.isclose(P.log_density(w) - ref, -0.5 * d @ prec @ d, rtol=1e-9, atol=1e-9)


def test_score_vanishes_at_mode(linear_problem):
    spec, data, P = linear_problem
    mean, _, _, _ = conjugate(data, spec, 0.05, 1.0)
    assert np.max(np.abs(P.score(mean))) < 1e-8


def test_score_zero_at_noiseless_interpolant_with_flat_prior():
    spec = ModelSpec.linear_toy(degree=1, n_steps=4)
    data = make_linear_dataset(3, 4, (0.2, -0.5), 0.0, seed=2)
    P = PosteriorModel(spec, data, GaussianPrior(1e8), ObservationModel(0.1))
    assert np.max(np.abs(P.score(np.array([0.2, -0.5])))) < 1e-10


def test_full_subsample_equals_full_score_bitwise(linear_problem):
    spec, data, P = linear_problem
    Ps = PosteriorModel(spec, data, P.prior, P.obs, subsample_size=len(data))
    w = np.array([0.1, 0.4])
    for seed in (0, 1, 99):
        assert Ps.score(w, seed).tobytes() == P.score(w).tobytes()


def test_subsampled_score_is_unbiased():
    spec = ModelSpec.linear_toy(degree=1, n_steps=4)
    data = make_linear_dataset(5, 4, (0.3, 0.8), 0.05, seed=3)
    P = PosteriorModel(spec, data, GaussianPrior(1.0), ObservationModel(0.05))
    Ps = PosteriorModel(spec, data, P.prior, P.obs, subsample_size=2)
    w = np.array([-0.2, 0.5])
    G = np.array([Ps.score(w, s) for s in range(10_000)])
    se = G.std(axis=0) / np.sqrt(len(G))
    assert np.all(np.abs(G.mean(axis=0) - P.score(w)) < 3 * se)


def test_gn_hessian_is_exact_for_linear_model(linear_problem):
    spec, data, P = linear_problem
    _, _, Phi, _ = conjugate(data, spec, 0.05, 1.0)
    rng = np.random.default_rng(4)
    w = rng.standard_normal(2)
    H = Phi.T @ Phi / 0.05 ** 2
    for _ in range(3):
        v = rng.standard_normal(2)
        assert np.allclose(P.gn_hessian_apply(w, v), H @ v, rtol=1e-12)
    assert np.array_equal(P.gn_hessian_apply(w, np.zeros(2)), np.zeros(2))
    assert np.allclose(P.hessian_diag(w), np.diag(H), rtol=1e-12)


def test_gn_hessian_psd_on_network():
    from graphbnn.datagen import make_texture_dataset
    spec = ModelSpec.gru_2d(n_steps=5)
    data = make_texture_dataset(3, (4, 6), 5, seed=0)
    P = PosteriorModel(spec, data)
    rng = np.random.default_rng(5)
    w = rng.standard_normal(spec.n_params) * 0.3
    for _ in range(50):
        v = rng.standard_normal(spec.n_params)
        assert v @ P.gn_hessian_apply(w, v) >= -1e-9


def test_dimension_checks(linear_problem):
    _, _, P = linear_problem
    with pytest.raises(DimensionMismatch):
        P.log_density(np.zeros(3))
    with pytest.raises(ValueError):
        PosteriorModel(ModelSpec.linear_toy(), [])


def test_train_map_recovers_conjugate_mode(linear_problem):
    spec, data, P = linear_problem
    mean, _, _, _ = conjugate(data, spec, 0.05, 1.0)
    res = train_map(P, np.zeros(2), MapConfig(lr=1e-2, max_epochs=20_000, patience=200,
                                              val_fraction=0.0))
    assert np.max(np.abs(res.w - mean)) < 1e-4


def test_train_map_init_at_mode_stops_immediately(linear_problem):
    spec, data, P = linear_problem
    mean, _, _, _ = conjugate(data, spec, 0.05, 1.0)
    cfg = MapConfig(lr=1e-3, patience=50, val_fraction=0.0)
    res = train_map(P, mean, cfg)
    assert res.best_epoch == 0
    assert res.epochs == cfg.patience
    assert np.array_equal(res.w, mean)


def test_train_map_best_so_far_non_increasing(linear_problem):
    _, _, P = linear_problem
    res = train_map(P, np.array([2.0, -2.0]), MapConfig(lr=5e-2, max_epochs=300,
                                                        val_fraction=0.3))
    best = np.array(res.history["best"])
    assert np.all(np.diff(best) <= 0)
    assert res.val_indices and set(res.val_indices).isdisjoint(res.train_indices)


def test_zero_epoch_budget_returns_init(linear_problem):
    _, _, P = linear_problem
    w0 = np.array([0.7, -0.1])
    assert np.array_equal(train_map(P, w0, MapConfig(max_epochs=0)).w, w0)


def test_split_indices_deterministic():
    a = split_indices(20, 0.25, 3)
    assert a == split_indices(20, 0.25, 3)
    assert len(a[1]) == 5 and sorted(a[0] + a[1]) == list(range(20))


# --------------------------------------------------------------------------
# normalization

def raw_samples(rng, n=4):
    out = []
    for i in range(n):
        X = np.column_stack([rng.random(3) * 5 + 1, np.zeros(3)])
        out.append(GraphSample(np.ones((3, 3)) - np.eye(3), X,
                               np.linspace(0, 2e-4, 6)[:, None], rng.random(6) * 30,
                               name=f"s{i}"))
    return out


def test_normalization_round_trip():
    rng = np.random.default_rng(6)
    raw = raw_samples(rng)
    norm, rec = normalize_dataset(raw)
    Y = np.concatenate([s.targets for s in norm])
    assert Y.min() == 0.0 and Y.max() == 1.0
    for a, b in zip(raw, norm):
        back = rec.invert(b)
        assert np.allclose(back.node_features, a.node_features, rtol=0, atol=1e-12)
        assert np.allclose(back.targets, a.targets, rtol=0, atol=1e-12)
    rec2 = NormalizationRecord.from_dict(rec.to_dict())
    assert np.array_equal(rec2.apply(raw[0]).targets, norm[0].targets)


def test_normalization_identity_on_unit_range():
    rng = np.random.default_rng(7)
    raw, _ = normalize_dataset(raw_samples(rng))
    again, _ = normalize_dataset(raw)
    for a, b in zip(raw, again):
        assert np.array_equal(a.targets, b.targets)
        assert np.array_equal(a.node_features, b.node_features)


def test_constant_channel_rejected():
    rng = np.random.default_rng(8)
    raw = raw_samples(rng)
    raw = [s.replace(node_features=np.column_stack([s.node_features[:, 0], np.full(3, 2.0)]))
           for s in raw]
    with pytest.raises(DegenerateChannel):
        fit_normalization(raw)
