"""Synthetic benchmarks: random MVN truths, monotone masks, ELL scoring,
normal-versus-Student-t Bayes factors, and the two experiment harnesses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special, stats

from .engine import phi_inverse
from .layout import DataMatrix
from .samplers import BayesianRegression, RegressionHyperParams

BF_BETA = np.array([2.0, -3.0, 0.0, 0.75, 0.0, 0.0, -0.9])
BF_BETA0 = 1.0


@dataclass
class GeneratorSpec:
    method: str = "normwish"
    m: int = 10
    n: int = 100
    rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("normwish", "parsimonious"):
            raise ValueError("method must be 'normwish' or 'parsimonious'")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must lie in [0, 1]")


@dataclass
class EllScore:
    value: float
    entropy: float
    divergence: float


def randmvn(spec: GeneratorSpec, rng: np.random.Generator | None = None):
    """Random ``(mu, Sigma)``.

    ``normwish``: ``mu ~ N(0, I)`` and ``Sigma ~ Wishart(m, I)``, dense with
    no conditional independencies. ``parsimonious``: column ``j`` regresses
    on ``Bin(j-1, rate)`` randomly chosen earlier columns with ``N(0, 1)``
    coefficients and intercept and ``IG(3, 2)`` noise variance, and the
    regressions are chained into ``(mu, Sigma)``.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    m = spec.m
    if spec.method == "normwish":
        mu = rng.standard_normal(m)
        S = np.atleast_2d(stats.wishart(df=m, scale=np.eye(m)).rvs(random_state=rng))
        return mu, 0.5 * (S + S.T)
    mu = np.zeros(m)
    S = np.zeros((m, m))
    for j in range(m):
        beta = np.zeros(j)
        k = rng.binomial(j, spec.rate) if j else 0
        if k:
            beta[rng.choice(j, size=k, replace=False)] = rng.standard_normal(k)
        b0 = rng.standard_normal()
        s2 = 2.0 / rng.gamma(3.0)
        mu[j], col = phi_inverse(b0, beta, s2, mu[:j], S[:j, :j])
        S[:j, j] = S[j, :j] = col[:-1]
        S[j, j] = col[-1]
    return mu, S


def rmono(Y, rng: np.random.Generator | None = None, floor: int | None = None) -> DataMatrix:
    """Impose a random monotone missingness pattern on a complete matrix.

    Column 1 stays complete; the other columns keep their first ``n_j``
    rows, with the ``n_j`` drawn uniformly on ``[floor, n]`` and sorted
    non-increasing. The default floor is ``max(2, ceil(n/10))``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    Y = np.array(Y, float, copy=True)
    n, m = Y.shape
    floor = max(2, math.ceil(0.1 * n)) if floor is None else int(floor)
    floor = min(max(floor, 1), n)
    counts = np.sort(rng.integers(floor, n + 1, size=m - 1))[::-1] if m > 1 else np.zeros(0, int)
    nj = np.concatenate([[n], counts]).astype(int)
    for j in range(m):
        Y[nj[j]:, j] = np.nan
    return DataMatrix.from_array(Y)


def ell(mu_hat, sigma_hat, mu, sigma, paper_form: bool = False) -> EllScore:
    """Expected log density of ``N(mu_hat, sigma_hat)`` under ``N(mu, sigma)``.

    The value is the negative entropy of the truth minus the KL divergence
    of the estimate from it. ``paper_form=True`` drops the ``-N`` constant
    from the divergence, shifting every score by ``N/2``.
    """
    mu_hat, mu = np.atleast_1d(np.asarray(mu_hat, float)), np.atleast_1d(np.asarray(mu, float))
    Sh = np.atleast_2d(np.asarray(sigma_hat, float))
    S = np.atleast_2d(np.asarray(sigma, float))
    N = len(mu)
    try:
        Lh = np.linalg.cholesky(Sh)
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError("covariances must be positive definite") from None
    logdet_h = 2.0 * np.log(np.diag(Lh)).sum()
    logdet = 2.0 * np.log(np.diag(L)).sum()
    A = np.linalg.solve(Lh, L)
    z = np.linalg.solve(Lh, mu_hat - mu)
    kl = 0.5 * (float((A * A).sum()) + float(z @ z) + logdet_h - logdet
                - (0.0 if paper_form else N))
    ent = -0.5 * (N * math.log(2.0 * math.pi * math.e) + logdet)
    return EllScore(ent - kl, ent, kl)


# ----------------------------------------------------------------------------
# Bayes factors
# ----------------------------------------------------------------------------

def _normal_loglik(r, s2):
    return -0.5 * len(r) * math.log(2 * math.pi * s2) - 0.5 * float(r @ r) / s2


def _t_loglik(r, s2, nu):
    n = len(r)
    return (n * (special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
                 - 0.5 * math.log(nu * math.pi * s2))
            - 0.5 * (nu + 1) * float(np.log1p(r * r / (nu * s2)).sum()))


def bayes_factor_normal_vs_t(beta0, beta, sigma2, nu, X, y) -> float:
    """Natural-log Bayes factor of normal over Student-t errors.

    Averages the likelihood ratio over draws from the Student-t posterior
    (positive values favor normal errors).
    """
    beta0 = np.atleast_1d(np.asarray(beta0, float))
    T = len(beta0)
    if T == 0:
        raise ValueError("no posterior draws")
    beta = np.asarray(beta, float).reshape(T, -1)
    sigma2 = np.atleast_1d(np.asarray(sigma2, float))
    nu = np.atleast_1d(np.asarray(nu, float))
    X = np.asarray(X, float).reshape(len(y), -1)
    y = np.asarray(y, float)
    lr = np.empty(T)
    for t in range(T):
        r = y - beta0[t] - X @ beta[t]
        lr[t] = _normal_loglik(r, sigma2[t]) - _t_loglik(r, sigma2[t], nu[t])
    return float(special.logsumexp(lr) - math.log(T))


def bf_data(n, nu, rng):
    """Synthetic regression with the fixed seven-coefficient truth."""
    X = rng.uniform(size=(n, 7))
    eps = rng.standard_normal(n) if not np.isfinite(nu) else rng.standard_t(nu, size=n)
    return X, BF_BETA0 + X @ BF_BETA + eps


def bf_replicate(n, nu, seed, T=1000, burnin=200, thin=None):
    """One replicate: simulate, run the Student-t lasso chain, return log BF."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, n, 0 if not np.isfinite(nu) else int(nu)])))
    X, y = bf_data(n, nu, rng)
    reg = BayesianRegression(X, y, RegressionHyperParams(prior="lasso", student_t=True))
    thin = max(1, math.ceil(n / 100)) if thin is None else thin
    tr = reg.run(rng, T, burnin, thin)
    return bayes_factor_normal_vs_t(tr.beta0, tr.beta, tr.sigma2, tr.nu, X, y)


def correct_call(log_bf, nu, threshold=1.0):
    """Whether a log Bayes factor picks the true model with ``|log10 BF| > threshold``."""
    l10 = log_bf / math.log(10.0)
    if np.isfinite(nu):
        return l10 < -threshold if threshold > 0 else l10 < 0
    return l10 > threshold if threshold > 0 else l10 > 0


def bf_frequency_experiment(n_grid, nu_grid, reps, seed=0, threshold=1.0, T=1000,
                            burnin=200, thin=None, jobs=1):
    """Frequency of correct normal-vs-t determinations over an ``(n, nu)`` grid.

    Returns a list of dicts with keys ``n, nu, reps, correct, frequency,
    log_bf`` (the individual log Bayes factors).
    """
    if not len(n_grid) or not len(nu_grid):
        raise ValueError("grids must be nonempty")
    tasks = [(n, nu, seed * 100003 + r, T, burnin, thin)
             for n in n_grid for nu in nu_grid for r in range(reps)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            vals = list(ex.map(_bf_task, tasks))
    else:
        vals = [_bf_task(t) for t in tasks]
    out, i = [], 0
    for n in n_grid:
        for nu in nu_grid:
            lbf = np.array(vals[i:i + reps])
            i += reps
            ok = sum(correct_call(v, nu, threshold) for v in lbf)
            out.append(dict(n=n, nu=nu, reps=reps, correct=int(ok), frequency=ok / reps,
                            log_bf=lbf))
    return out


def _bf_task(a):
    n, nu, s, T, burnin, thin = a
    return bf_replicate(n, nu, s, T, burnin, thin)


# ----------------------------------------------------------------------------
# ELL ranking
# ----------------------------------------------------------------------------

@dataclass
class RankTable:
    """Per-replication ELL scores and ranks (1 = best)."""

    names: list
    scores: np.ndarray
    ranks: np.ndarray
    failed: np.ndarray
    extra: dict = field(default_factory=dict)

    def summary(self):
        return {nm: dict(min=int(self.ranks[:, i].min()), mean=float(self.ranks[:, i].mean()),
                         max=int(self.ranks[:, i].max()))
                for i, nm in enumerate(self.names)}


def rank_scores(scores):
    """Rank each row (higher score is better); ties keep estimator order."""
    scores = np.asarray(scores, float)
    s = np.where(np.isnan(scores), -np.inf, scores)
    order = np.argsort(-s, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(s.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, s.shape[1] + 1)
    return ranks


def rank_experiment(spec: GeneratorSpec, estimators: dict, reps: int, floor=None,
                    seed: int | None = None) -> RankTable:
    """Score each estimator by ELL on ``reps`` random truths with monotone masks.

    ``estimators`` maps names to callables ``f(DataMatrix, rng) -> (mu, Sigma)``.
    A failing estimator gets the worst score (and rank) for that replication.
    """
    if not estimators:
        raise ValueError("at least one estimator is required")
    names = list(estimators)
    scores = np.full((reps, len(names)), np.nan)
    failed = np.zeros((reps, len(names)), bool)
    base = spec.seed if seed is None else seed
    for r in range(reps):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([base, r])))
        mu, S = randmvn(spec, rng)
        Y = rng.multivariate_normal(mu, S, size=spec.n, method="cholesky")
        d = rmono(Y, rng, floor)
        for i, nm in enumerate(names):
            try:
                mh, Sh = estimators[nm](d, np.random.Generator(
                    np.random.Philox(np.random.SeedSequence([base, r, i + 1]))))
                scores[r, i] = ell(mh, Sh, mu, S).value
            except (ArithmeticError, ValueError, np.linalg.LinAlgError):
                failed[r, i] = True
    return RankTable(names, scores, rank_scores(scores), failed)


def bayes_estimator(prior, delta=0.0, model_averaging=True, T=300, burnin=None,
                    **kw) -> Callable:
    """Posterior-mean estimator for :func:`rank_experiment`."""
    from .engine import EngineConfig, bayes_path, summarize

    def f(d, rng):
        cfg = EngineConfig(delta=delta, prior=prior, model_averaging=model_averaging, T=T,
                           burnin=burnin, seed=int(rng.integers(2**31)), **kw)
        s = summarize(bayes_path(d, None, cfg))
        return s.mu, s.sigma
    return f


def mle_estimator(delta=0.0) -> Callable:
    """Classical estimator (least squares / GCV ridge) for :func:`rank_experiment`."""
    from .engine import mle_path

    def f(d, rng):
        e = mle_path(d, None, delta)
        return e.mu, e.sigma
    return f
