import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm, spearmanr

from graphbnn.datagen import make_linear_dataset
from graphbnn.diagnostics import (EmpiricalCdf, canonical_rows, cmn_matrix,
                                  distance_correlation, kss, kss_normal,
                                  layer_dcor_table, pushforward, rank_cases,
                                  spectral_embedding)
from graphbnn.errors import DisconnectedGraph, LengthMismatch
from graphbnn.models import ModelSpec


def test_kss_hand_cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20)
    assert kss(x, x) == 0.0
    assert kss([0.0], [0.5]) == 0.5
    assert kss([0.0, 1.0], [0.0]) == 0.5


def test_kss_symmetric_and_shift():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(30), rng.standard_normal(40)
    assert np.isclose(kss(a, b), kss(b, a), rtol=0, atol=1e-14)
    # for a pure shift the L1 CDF distance equals the shift
    assert np.isclose(kss(a, a + 0.7), 0.7, rtol=1e-12)


def test_kss_normal_matches_quadrature():
    rng = np.random.default_rng(2)
    mu, sd = 0.3, 1.2
    x = rng.normal(mu, sd, 50)
    F = EmpiricalCdf(x)
    knots = np.concatenate([[mu - 15 * sd], np.sort(x), [mu + 15 * sd]])
    ref = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        level = F(0.5 * (a + b))
        # split where the normal CDF crosses the constant empirical level
        cross = mu + sd * norm.ppf(level) if 0 < level < 1 else None
        pts = [cross] if cross is not None and a < cross < b else None
        ref += quad(lambda t: abs(level - norm.cdf(t, mu, sd)), a, b, points=pts,
                    epsabs=1e-14, epsrel=1e-12)[0]
    assert abs(kss_normal(x, mu, sd) - ref) < 1e-9


def test_empirical_cdf_rejects_empty():
    with pytest.raises(ValueError):
        EmpiricalCdf([])


def test_distance_correlation_cases():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((200, 2))
    assert np.isclose(distance_correlation(X, X), 1.0)
    assert np.isclose(distance_correlation(X[:, 0], -3.0 * X[:, 0] + 2.0), 1.0)
    a, b = rng.standard_normal(500), rng.standard_normal(500)
    assert distance_correlation(a, b) < 0.15
    assert distance_correlation(a, np.ones(500)) == 0.0
    with pytest.raises(LengthMismatch):
        distance_correlation(a, b[:10])


def test_distance_correlation_brute_force():
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal(7), rng.standard_normal(7) + rng.standard_normal(7)
    n = 7

    def centered(v):
        D = np.abs(v[:, None] - v[None, :])
        A = np.empty_like(D)
        for i in range(n):
            for j in range(n):
                A[i, j] = D[i, j] - D[i].mean() - D[:, j].mean() + D.mean()
        return A

    A, B = centered(x), centered(y)
    ref = np.sqrt((A * B).mean() / np.sqrt((A * A).mean() * (B * B).mean()))
    assert np.isclose(distance_correlation(x, y), ref, rtol=1e-12)


def test_layer_dcor_table():
    rng = np.random.default_rng(5)
    W = rng.standard_normal((30, 5))
    rows = layer_dcor_table(W, (("a", 0, 2), ("b", 2, 3)))
    assert [r[:2] for r in rows] == [("a", "a"), ("a", "b"), ("b", "b")]
    assert np.isclose(rows[0][2], 1.0)


def linear_setup():
    spec = ModelSpec.linear_toy(degree=1, n_steps=3)
    data = make_linear_dataset(2, 3, (0.3, 0.8), 0.05, seed=0)
    return spec, data


def test_cmn_two_draw_hand_case():
    spec, data = linear_setup()
    w_map = np.array([0.3, 0.8])
    W = np.array([[0.4, 0.6], [0.1, 1.1]])
    pf = pushforward(spec, W, data, w_map)
    # hand evaluation: deviations are basis @ (w - w_map)
    dev = []
    for s in data:
        B = np.column_stack([np.ones(3), s.time_inputs[:, 0]])
        for w in canonical_rows(W):
            dev.append(B @ (w - w_map))
    dev = np.array(dev)
    cov = np.zeros((3, 3))
    for d in dev:
        cov += np.outer(d, d)
    cov /= len(dev)
    corr = cov / np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
    assert np.max(np.abs(pf.covariance - cov)) < 1e-12
    assert np.max(np.abs(pf.cmn - corr)) < 1e-12


def test_single_draw_collapses_bands():
    spec, data = linear_setup()
    w = np.array([[0.3, 0.8]])
    pf = pushforward(spec, w, data, w[0])
    assert np.array_equal(pf.q05, pf.q95) and np.array_equal(pf.q50, pf.map_prediction)
    assert np.array_equal(pf.cmn, np.zeros((3, 3)))
    assert np.array_equal(pf.covariance, np.zeros((3, 3)))


def test_pushforward_row_order_invariant():
    spec, data = linear_setup()
    rng = np.random.default_rng(6)
    W = rng.standard_normal((10, 2))
    a = pushforward(spec, W, data)
    b = pushforward(spec, W[::-1], data)
    assert np.array_equal(a.kss, b.kss) and np.array_equal(a.q05, b.q05)
    assert np.array_equal(a.cmn, b.cmn)


def test_cmn_zero_variance_step():
    preds = np.array([[[1.0, 2.0], [1.0, 3.0]]])
    corr, cov = cmn_matrix(preds, np.array([[1.0, 2.5]]))
    assert corr[0, 1] == 0.0 and corr[0, 0] == 0.0 and corr[1, 1] == 1.0
    assert np.isclose(cov[1, 1], 0.25)


def test_rank_cases():
    assert rank_cases(np.array([0.3, 0.1, 0.5, 0.2])) == {"min": 1, "median": 3, "max": 2}


def test_spectral_embedding_line():
    t = np.linspace(0, 1, 40)
    X = np.column_stack([t, 2 * t, -t])
    Y = spectral_embedding(X, k_neighbors=4, n_components=1)
    assert abs(spearmanr(Y[:, 0], t).statistic) > 0.99


def test_spectral_embedding_duplicates_and_translation():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((20, 3))
    XX = np.vstack([X, X])
    Y = spectral_embedding(XX, 6, 2)
    assert np.allclose(Y[:20], Y[20:], atol=1e-10)
    Z = spectral_embedding(X, 6, 2)
    Zt = spectral_embedding(X + 5.0, 6, 2)
    assert np.allclose(Z, Zt, atol=1e-8)


def test_spectral_embedding_disconnected():
    X = np.vstack([np.zeros((5, 2)) + np.arange(5)[:, None] * 0.01,
                   100 + np.arange(5)[:, None] * 0.01 + np.zeros((5, 2))])
    with pytest.raises(DisconnectedGraph):
        spectral_embedding(X, 2, 1)
