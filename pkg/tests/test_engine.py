import numpy as np
import pytest
from scipy import stats

from shrinkmvn import engine as eng
from shrinkmvn.engine import (EngineConfig, PosteriorDrawSet, bayes_path, common_nu_draw,
                              factor_model_sigma, inclusion_probabilities, ledoit_combine,
                              mle_path, phi_inverse, summarize, with_factors)
from shrinkmvn.errors import DataError
from shrinkmvn.layout import DataMatrix, order_monotone
from shrinkmvn.samplers import draw_nu

from conftest import batch_se, philox

nan = np.nan


def direct_moments(Y):
    mu = Y.mean(axis=0)
    D = Y - mu
    return mu, D.T @ D / len(Y)


def monotone_sample(r, n, counts, m=None, mu=None, S=None):
    m = len(counts)
    A = r.normal(size=(m, m))
    S = A @ A.T + m * np.eye(m) if S is None else S
    mu = r.normal(size=m) if mu is None else mu
    Y = r.multivariate_normal(mu, S, size=n)
    for j, nj in enumerate(counts):
        Y[nj:, j] = nan
    return Y


# -- parameter map -------------------------------------------------------------

def test_phi_inverse_pinned():
    mu2, col = phi_inverse(1.0, [2.0], 0.5, [3.0], [[4.0]])
    assert mu2 == 7.0
    assert col.tolist() == [8.0, 16.5]


def test_phi_inverse_zero_beta_gives_zero_covariance(rng):
    A = rng.normal(size=(3, 3))
    mu, col = phi_inverse(0.3, np.zeros(3), 2.0, rng.normal(size=3), A @ A.T)
    assert np.all(col[:3] == 0) and col[3] == 2.0 and mu == 0.3


def test_chained_ols_reproduces_sample_moments(rng):
    Y = rng.normal(size=(20, 3)) @ rng.normal(size=(3, 3)) + 1.0
    e = mle_path(DataMatrix.from_array(Y), None, 0.9)
    mu, S = direct_moments(Y)
    assert np.max(np.abs(e.mu - mu)) < 1e-10
    assert np.max(np.abs(e.sigma - S)) < 1e-10
    assert e.methods == ["mean", "ols", "ols"]


def test_shrinkage_branch_below_threshold(rng):
    Y = monotone_sample(rng, 30, [30, 30, 25, 20, 10])
    e = mle_path(DataMatrix.from_array(Y), None, 0.2)
    # 0.2 * 10 = 2 < 5
    assert e.methods[4] == "ridge"
    assert e.methods[1] == "ols"  # 0.2 * 30 = 6 >= 2


def test_mle_positive_definite_when_counts_exceed_dimension():
    for s in range(30):
        r = philox(100, s)
        m = int(r.integers(2, 7))
        n = int(r.integers(m + 3, 40))
        counts = np.sort(r.integers(m + 1, n + 1, size=m))[::-1]
        counts[0] = n
        Y = monotone_sample(r, n, counts)
        e = mle_path(DataMatrix.from_array(Y), None, 0.9)
        assert np.linalg.eigvalsh(e.sigma).min() > 0


def test_mle_on_shuffled_columns_returns_original_order(rng):
    Y = monotone_sample(rng, 40, [40, 35, 30])
    perm = [2, 0, 1]
    a = mle_path(DataMatrix.from_array(Y), None, 0.9)
    b = mle_path(DataMatrix.from_array(Y[:, perm]), None, 0.9)
    np.testing.assert_allclose(b.mu, a.mu[perm], atol=1e-12)
    np.testing.assert_allclose(b.sigma, a.sigma[np.ix_(perm, perm)], atol=1e-12)


def test_mle_rejects_gaps_with_pointer_to_augmentation(rng):
    Y = rng.normal(size=(10, 3))
    Y[2, 1] = nan
    Y[6:, 2] = nan
    with pytest.raises(DataError, match="mda"):
        mle_path(DataMatrix.from_array(Y))


# -- Bayesian path ---------------------------------------------------------------

def test_single_column_normal_inverse_gamma():
    r = philox(101)
    y = r.normal(2.0, 1.5, size=50)
    dr = bayes_path(DataMatrix.from_array(y[:, None]), None, EngineConfig(T=10000, seed=3))
    n, S = 50, np.sum((y - y.mean()) ** 2)
    mu, s2 = dr.mu[:, 0], dr.sigma[:, 0, 0]
    assert abs(mu.mean() - y.mean()) < 3 * batch_se(mu)
    assert abs(s2.mean() - S / (n - 3)) < 3 * batch_se(s2)


def test_inclusion_strong_beats_null():
    r = philox(102)
    n = 100
    x1, x2, x3 = r.normal(size=(3, n))
    y = 2.0 * x1 + r.normal(size=n)
    d = DataMatrix.from_array(np.column_stack([x1, x2, x3, y]))
    cfg = EngineConfig(delta=0.0, prior="lasso", model_averaging=True, T=400, seed=1)
    P, rows, cols = inclusion_probabilities(bayes_path(d, None, cfg))
    assert P[3, 0] > 0.9
    assert P[3, 0] > P[3, 1] and P[3, 0] > P[3, 2]
    assert np.all((P[~np.isnan(P)] >= 0) & (P[~np.isnan(P)] <= 1))


def test_flat_path_matches_direct_mvn_gibbs():
    r = philox(103)
    n, m = 100, 3
    Y = r.multivariate_normal([1.0, -1.0, 0.5], [[2, 0.6, 0.3], [0.6, 1, 0.2], [0.3, 0.2, 1.5]],
                              size=n)
    T = 4000
    d = DataMatrix.from_array(Y)
    lay = order_monotone(d)
    cfg = EngineConfig(delta=0.9, T=T, seed=5)
    cols = eng._build_columns(lay.ordered(d.values), lay.ordered(d.state), lay, cfg)
    # with a_sigma = 2j - m - 1 for 1-based column j, the chained flat posterior
    # is the inverse-Wishart posterior of the |Sigma|^{-(m+1)/2} prior
    for c in cols:
        c.reg.hyper.a_sigma = float(2 * (c.j + 1) - m - 1)
    out = [eng._run_independent((c, T, 200, 1)) for c in cols]
    mu_c, S_c = eng._phi_inverse_batch([o[0] for o in out], [o[1] for o in out],
                                       [o[2] for o in out])
    g = philox(104)
    mu = Y.mean(axis=0)
    Sg = np.empty((T, m, m))
    for t in range(T + 200):
        D = Y - mu
        Sig = stats.invwishart(df=n, scale=D.T @ D).rvs(random_state=g)
        mu = g.multivariate_normal(Y.mean(axis=0), Sig / n)
        if t >= 200:
            Sg[t - 200] = Sig
    D = Y - Y.mean(axis=0)
    exact = D.T @ D / (n - m - 2)
    for i in range(m):
        for j in range(i, m):
            a, b = S_c[:, i, j], Sg[:, i, j]
            se = np.hypot(batch_se(a), batch_se(b))
            assert abs(a.mean() - b.mean()) < 3.5 * se
            assert abs(a.mean() - exact[i, j]) < 3.5 * batch_se(a)


def test_public_flat_path_column_shapes():
    # the public path uses the 1/sigma^2 prior in every column
    r = philox(111)
    Y = r.normal(size=(60, 2))
    dr = bayes_path(DataMatrix.from_array(Y), None, EngineConfig(delta=0.9, T=6000, seed=1))
    S11 = np.sum((Y[:, 0] - Y[:, 0].mean()) ** 2)
    s = dr.sigma[:, 0, 0]
    assert abs(s.mean() - S11 / (60 - 3)) < 3 * batch_se(s)


def natural_layout(Y):
    """Layout of the complete matrix, so that a later hole is a real gap."""
    return order_monotone(DataMatrix.from_array(np.nan_to_num(Y)))


def test_gaps_require_augmentation(rng):
    Y = rng.normal(size=(20, 3))
    Y[4, 1] = nan
    with pytest.raises(DataError, match="mda"):
        bayes_path(DataMatrix.from_array(Y), natural_layout(Y), EngineConfig(T=10))


def test_zero_gaps_leave_data_untouched(rng):
    Y = monotone_sample(rng, 30, [30, 28, 20])
    d = DataMatrix.from_array(Y)
    before = d.values.copy()
    a = bayes_path(d, None, EngineConfig(T=50, seed=2, mda=True))
    b = bayes_path(d, None, EngineConfig(T=50, seed=2))
    np.testing.assert_array_equal(d.values, before)
    assert a.gaps.shape == (50, 0)
    np.testing.assert_array_equal(a.mu, b.mu)


def test_gap_draws_follow_regression_predictive():
    r = philox(105)
    Y = r.multivariate_normal([0, 1, 2], [[1, 0.7, 0.3], [0.7, 1.5, 0.4], [0.3, 0.4, 1]], size=60)
    Y[7, 1] = nan
    dr = bayes_path(DataMatrix.from_array(Y), natural_layout(Y),
                    EngineConfig(T=3000, seed=4, mda=True, delta=0.9))
    assert dr.gap_cells == [(7, 1)]
    y1 = Y[7, 0]
    cond = dr.mu[:, 1] + dr.sigma[:, 0, 1] / dr.sigma[:, 0, 0] * (y1 - dr.mu[:, 0])
    diff = dr.gaps[:, 0] - cond
    assert abs(diff.mean()) < 3 * batch_se(diff)


def test_full_mode_gap_draws_use_later_columns():
    r = philox(106)
    Y = r.multivariate_normal([0, 0, 0], [[1, 0.2, 0.2], [0.2, 1, 0.9], [0.2, 0.9, 1]], size=60)
    Y[3, 1] = nan
    d = DataMatrix.from_array(Y)
    lay = natural_layout(Y)
    cfg = dict(T=1500, seed=4, mda=True, delta=0.9)
    full = bayes_path(d, lay, EngineConfig(mda_mode="full", **cfg))
    pred = bayes_path(d, lay, EngineConfig(**cfg))
    # the third column carries most of the information about the hole
    assert full.gaps[:, 0].var() < pred.gaps[:, 0].var()
    assert abs(full.gaps[:, 0].mean() - 0.9 * Y[3, 2]) < 0.5


def test_serial_and_independent_schedules_agree(rng):
    Y = monotone_sample(rng, 25, [25, 24, 20, 15])
    d = DataMatrix.from_array(Y)
    cfg = EngineConfig(delta=0.0, prior="ng", T=30, burnin=10, seed=8)
    lay = order_monotone(d)
    V = lay.ordered(d.values)
    st = lay.ordered(d.state)
    a = eng._build_columns(V, st, lay, cfg)
    b = eng._build_columns(V, st, lay, cfg)
    rec = eng._Recorder(30, 4, 0)
    eng._serial_schedule(a, V.copy(), st, cfg, 30, 10, 1, rec, [])
    for c in b:
        b0, beta, s2, *_ = eng._run_independent((c, 30, 10, 1))
        np.testing.assert_array_equal(b0, rec.beta0[c.j])
        np.testing.assert_array_equal(beta, rec.beta[c.j])
        np.testing.assert_array_equal(s2, rec.sigma2[c.j])


def test_parallel_columns_bitwise_equal(rng):
    Y = monotone_sample(rng, 30, [30, 25, 22, 12])
    d = DataMatrix.from_array(Y)
    a = bayes_path(d, None, EngineConfig(delta=0.0, T=40, seed=1, jobs=1))
    b = bayes_path(d, None, EngineConfig(delta=0.0, T=40, seed=1, jobs=2))
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.sigma, b.sigma)


def test_draws_positive_definite_and_symmetric(rng):
    Y = monotone_sample(rng, 20, [20, 15, 12, 8, 5])
    dr = bayes_path(DataMatrix.from_array(Y), None,
                    EngineConfig(delta=0.0, prior="ridge", T=100, seed=2))
    np.testing.assert_array_equal(dr.sigma, np.swapaxes(dr.sigma, 1, 2))
    assert np.linalg.eigvalsh(dr.sigma).min() > 0


# -- Student-t and common nu ---------------------------------------------------------

def test_common_nu_single_column_is_the_column_conditional():
    w = 1.0 / philox(107).gamma(2.0, 0.5, size=30)
    assert common_nu_draw(philox(108), [w], 0.1) == draw_nu(philox(108), w, 0.1)


def test_common_nu_shared_and_deterministic(rng):
    Y = monotone_sample(rng, 40, [40, 35, 30])
    d = DataMatrix.from_array(Y)
    cfg = dict(student_t=True, common_nu=True, T=30, seed=3, delta=0.0)
    a = bayes_path(d, None, EngineConfig(jobs=1, **cfg))
    b = bayes_path(d, None, EngineConfig(jobs=2, **cfg))
    assert np.all(a.nu == a.nu[:, :1])
    np.testing.assert_array_equal(a.mu, b.mu)


# -- factors -------------------------------------------------------------------------

def test_factors_empty_is_plain_path(rng):
    Y = monotone_sample(rng, 30, [30, 25, 20])
    d = DataMatrix.from_array(Y)
    cfg = EngineConfig(T=20, seed=1)
    a = with_factors(d, np.zeros((30, 0)), cfg)
    b = bayes_path(d, None, cfg)
    np.testing.assert_array_equal(a.mu, b.mu)


def test_factor_inclusion_dominates():
    r = philox(109)
    n, m = 120, 4
    f = r.normal(size=n)
    Y = np.outer(f, [1.0, 0.8, 1.2, 0.9]) + 0.5 * r.normal(size=(n, m))
    for j, nj in enumerate([120, 110, 100, 90]):
        Y[nj:, j] = nan
    cfg = EngineConfig(delta=0.0, prior="lasso", model_averaging=True, T=300, seed=2)
    dr = with_factors(DataMatrix.from_array(Y), f, cfg)
    assert dr.mu.shape == (300, m) and dr.sigma.shape == (300, m, m)
    P, rows, cols = inclusion_probabilities(dr)
    assert P.shape == (m, m + 1) and cols[0] == "F1"
    for j in range(m):
        others = P[j, 1:][~np.isnan(P[j, 1:])]
        assert np.all(P[j, 0] > others)


def test_factor_model_sigma_cases(rng):
    s2 = np.array([1.0, 2.0, 0.5])
    np.testing.assert_array_equal(factor_model_sigma(np.zeros((2, 3)), np.eye(2), s2), np.diag(s2))
    S = factor_model_sigma(np.ones((1, 3)), [[0.7]], s2)
    np.testing.assert_allclose(S, 0.7 * np.ones((3, 3)) + np.diag(s2))
    L = rng.normal(size=(2, 3))
    S = factor_model_sigma(L, np.eye(2), s2)
    assert np.linalg.eigvalsh(S).min() >= s2.min() - 1e-12


def test_ledoit_combine_endpoints_and_psd(rng):
    A, B = rng.normal(size=(2, 4, 4))
    F, C = A @ A.T, B @ B.T
    assert np.array_equal(ledoit_combine(F, C, 1.0), F)
    assert np.array_equal(ledoit_combine(F, C, 0.0), C)
    assert np.linalg.eigvalsh(ledoit_combine(F, C, 0.3)).min() >= -1e-12


# -- summaries -----------------------------------------------------------------------

def test_summaries():
    S = np.array([[[2.0, 0.5], [0.5, 1.0]]])
    one = PosteriorDrawSet(np.array([[1.0, 2.0]]), S, ["a", "b"], logpost=np.zeros(1))
    for kind in ("mean", "map"):
        e = summarize(one, kind)
        assert e.mu.tolist() == [1.0, 2.0] and np.array_equal(e.sigma, S[0])
    r = philox(110)
    A = r.normal(size=(50, 3, 3))
    draws = PosteriorDrawSet(r.normal(size=(50, 3)), A @ np.swapaxes(A, 1, 2), list("xyz"),
                             logpost=r.normal(size=50))
    e = summarize(draws)
    assert np.array_equal(e.sigma, e.sigma.T)
    assert np.linalg.eigvalsh(e.sigma).min() >= -1e-12
    assert np.array_equal(summarize(draws, "map").mu, draws.mu[np.argmax(draws.logpost)])


def test_inclusion_extremes(rng):
    Y = monotone_sample(rng, 30, [30, 30, 30])
    dr = bayes_path(DataMatrix.from_array(Y), None, EngineConfig(T=20, delta=0.0, seed=1))
    P, _, _ = inclusion_probabilities(dr)
    # without model averaging every predictor is always in
    assert P[1, 0] == 1.0 and P[2, 0] == 1.0 and P[2, 1] == 1.0
    assert np.isnan(P[0, 0])
    dr.inclusion[:] = False
    P, _, _ = inclusion_probabilities(dr)
    assert P[2, 1] == 0.0
