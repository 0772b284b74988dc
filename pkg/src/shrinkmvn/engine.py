"""Estimation of (mu, Sigma) through chained per-column regressions.

Once columns and rows are arranged in a staircase, the multivariate normal
likelihood factors into a marginal for the first column and a sequence of
regressions of each column on all preceding ones. Each regression's
``(beta0, beta, sigma^2)`` maps back to the next block of ``(mu, Sigma)``
with :func:`phi_inverse`.

:func:`mle_path` chains least-squares (or ridge) point estimates;
:func:`bayes_path` chains posterior draws from
:class:`~shrinkmvn.samplers.BayesianRegression`, optionally imputing the
cells that break the staircase, pooling a common Student-t ``nu``, and
prepending fully observed factors.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layout as lay
from .errors import DataError, NumericError
from .samplers import (BayesianRegression, RegressionHyperParams, draw_nu,
                       ridge_gcv, standardize)


@dataclass
class MvnEstimate:
    """A point estimate of a multivariate normal."""

    mu: np.ndarray
    sigma: np.ndarray
    labels: list = field(default_factory=list)
    methods: list = field(default_factory=list)


@dataclass
class EngineConfig:
    """Settings for :func:`bayes_path` and :func:`mle_path`.

    ``burnin=None`` means 20% of ``T``. ``thin=None`` means 1, or
    ``ceil(n/100)`` sweeps per saved draw with Student-t errors. ``hyper``
    holds extra :class:`RegressionHyperParams` fields applied to every
    column (``prior``, ``student_t`` and ``model_averaging`` come from this
    config). ``mda_mode`` is ``"predictive"`` (gap rows left out of their
    own regression and redrawn from its predictive) or ``"full"`` (gap rows
    kept and redrawn from their exact full conditional).
    """

    delta: float = 0.2
    prior: str = "lasso"
    student_t: bool = False
    common_nu: bool = False
    mda: bool = False
    mda_mode: str = "predictive"
    model_averaging: bool = False
    T: int = 1000
    burnin: int | None = None
    thin: int | None = None
    seed: int = 0
    jobs: int = 1
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.mda_mode not in ("predictive", "full"):
            raise ValueError("mda_mode must be 'predictive' or 'full'")
        if self.common_nu and not self.student_t:
            raise ValueError("common_nu requires student_t")

    def resolved_burnin(self) -> int:
        return int(0.2 * self.T) if self.burnin is None else int(self.burnin)

    def resolved_thin(self, n: int) -> int:
        if self.thin is not None:
            return max(1, int(self.thin))
        return max(1, math.ceil(n / 100)) if self.student_t else 1

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorDrawSet:
    """Saved posterior draws of ``(mu, Sigma)`` in original column order.

    Attributes
    ----------
    mu : (T, m) array
    sigma : (T, m, m) array
    labels : list of str
    nu : (T, m) array or None
        Per-column degrees of freedom (identical columns under a common nu).
    inclusion : (T, M, M) bool array or None
        ``inclusion[t, j, l]`` is true when predictor ``l`` has a nonzero
        coefficient in the regression for column ``j``. Indices refer to
        ``pred_labels``; entries for non-predictors are false.
    predictor_mask : (M, M) bool array or None
        Which ``(j, l)`` pairs are regressions/predictors at all.
    gaps : (T, G) array
        Imputed values of the latent gap cells listed in ``gap_cells``
        (original ``(row, col)`` indices).
    logpost : (T,) array
        Sum over columns of each regression's log posterior at the draw.
    """

    mu: np.ndarray
    sigma: np.ndarray
    labels: list
    nu: np.ndarray | None = None
    inclusion: np.ndarray | None = None
    predictor_mask: np.ndarray | None = None
    pred_labels: list = field(default_factory=list)
    gaps: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    gap_cells: list = field(default_factory=list)
    logpost: np.ndarray = field(default_factory=lambda: np.zeros(0))
    diagnostics: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.mu.shape[0]

    @property
    def m(self) -> int:
        return self.mu.shape[1]

    def estimate(self, t: int) -> MvnEstimate:
        return MvnEstimate(self.mu[t].copy(), self.sigma[t].copy(), list(self.labels))


# ----------------------------------------------------------------------------
# parameter map
# ----------------------------------------------------------------------------

def phi_inverse(beta0, beta, sigma2, mu_prev, sigma_prev):
    """Map one regression to the next block of ``(mu, Sigma)``.

    Parameters
    ----------
    beta0 : float
    beta : (p,) array
    sigma2 : float
    mu_prev : (p,) array
    sigma_prev : (p, p) array

    Returns
    -------
    mu_j : float
    sigma_col : (p + 1,) array
        ``Sigma[:p, j]`` followed by ``Sigma[j, j]``.
    """
    beta = np.asarray(beta, float)
    mu_prev = np.asarray(mu_prev, float)
    sigma_prev = np.asarray(sigma_prev, float)
    p = len(beta)
    if mu_prev.shape != (p,) or sigma_prev.shape != (p, p):
        raise ValueError(f"dimension mismatch: beta has {p} entries, mu {mu_prev.shape}, "
                         f"Sigma {sigma_prev.shape}")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    s = sigma_prev @ beta
    return float(beta0 + beta @ mu_prev), np.append(s, sigma2 + beta @ s)


def _phi_inverse_batch(beta0, betas, sigma2):
    """Vectorized map over ``T`` draws; ``betas[j]`` has shape ``(T, j)``."""
    m = len(beta0)
    T = beta0[0].shape[0]
    mu = np.empty((T, m))
    S = np.zeros((T, m, m))
    for j in range(m):
        b = betas[j]
        if j == 0:
            mu[:, 0] = beta0[0]
            S[:, 0, 0] = sigma2[0]
            continue
        s = np.einsum("tij,tj->ti", S[:, :j, :j], b)
        mu[:, j] = beta0[j] + np.einsum("tj,tj->t", b, mu[:, :j])
        S[:, :j, j] = s
        S[:, j, :j] = s
        S[:, j, j] = sigma2[j] + np.einsum("tj,tj->t", b, s)
    return mu, S


def _reorder(mu, S, perm_inv):
    return mu[..., perm_inv], S[..., perm_inv, :][..., perm_inv]


# ----------------------------------------------------------------------------
# maximum likelihood
# ----------------------------------------------------------------------------

def _prepare(d: lay.DataMatrix, layout: lay.MonotoneLayout | None):
    if layout is None:
        layout = lay.order_monotone(d)
    return layout


def mle_path(d: lay.DataMatrix, layout: lay.MonotoneLayout | None = None,
             delta: float = 0.2) -> MvnEstimate:
    """Maximum-likelihood ``(mu, Sigma)`` for monotone data.

    Column 1 uses the sample mean and divisor-``n`` variance. Column ``j``
    (1-based, ``j-1`` predictors) is fit by least squares when
    ``delta * n_j >= j`` and by GCV ridge otherwise; the residual variance
    is ``RSS / n_j`` in both cases.

    Raises
    ------
    DataError
        If the pattern is not monotone (impute with ``bayes_path(mda=True)``).
    NumericError
        If a least-squares design is rank deficient.
    """
    layout = _prepare(d, layout)
    if d.has_gaps() or lay.check_monotone(layout, d):
        raise DataError("missingness is not monotone; maximum likelihood needs a monotone "
                        "pattern (use the Bayesian fit with data augmentation, fit --mda)")
    m = d.m
    V = layout.ordered(d.values)
    mu = np.zeros(m)
    S = np.zeros((m, m))
    methods = []
    for j in range(m):
        nj = int(layout.n_obs[j])
        y = V[:nj, j]
        if j == 0:
            mu[0] = y.mean()
            S[0, 0] = float(((y - mu[0]) ** 2).mean())
            methods.append("mean")
            continue
        X = V[:nj, :j]
        if delta * nj >= j + 1:
            Xi = np.column_stack([np.ones(nj), X])
            coef, _, rank, _ = np.linalg.lstsq(Xi, y, rcond=None)
            if rank < j + 1:
                raise NumericError(f"least-squares design for column "
                                   f"{d.labels[layout.col_order[j]]!r} is rank deficient "
                                   f"(n_j={nj}, {j} predictors)")
            b0, b = coef[0], coef[1:]
            resid = y - Xi @ coef
            methods.append("ols")
        else:
            sd = standardize(X, y)
            bs, _, _ = ridge_gcv(sd.X, sd.y_tilde)
            b = bs / sd.scales
            b0 = sd.y_bar - b @ sd.centers
            resid = y - b0 - X @ b
            methods.append("ridge")
        s2 = float(resid @ resid) / nj
        if not s2 > 0:
            raise NumericError(f"zero residual variance for column "
                               f"{d.labels[layout.col_order[j]]!r}")
        mu[j], col = phi_inverse(b0, b, s2, mu[:j], S[:j, :j])
        S[:j, j] = S[j, :j] = col[:-1]
        S[j, j] = col[-1]
    inv = np.argsort(layout.col_order)
    mu, S = _reorder(mu, S, inv)
    return MvnEstimate(mu, S, list(d.labels), [methods[i] for i in inv])


# ----------------------------------------------------------------------------
# Bayesian path
# ----------------------------------------------------------------------------

def column_stream(seed: int, j: int) -> np.random.Generator:
    """Independent counter-based stream for regression ``j``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(j)])))


def _column_hyper(cfg: EngineConfig, j: int, nj: int, n_rows: int) -> RegressionHyperParams:
    """Per-column prior: parsimonious below the ``delta`` threshold, else flat."""
    flat_ok = cfg.delta * nj >= j + 1 and n_rows - 1 - j >= 1
    kw = dict(cfg.hyper)
    kw.update(student_t=cfg.student_t)
    if j == 0 or flat_ok:
        kw.update(prior="flat", model_averaging=False)
        for key in ("b_lambda", "a_tau", "b_tau", "pi"):
            kw.pop(key, None)
    else:
        kw.update(prior=cfg.prior, model_averaging=cfg.model_averaging)
    return RegressionHyperParams(**kw)


@dataclass
class _Column:
    j: int
    rows: np.ndarray
    gap_rows: np.ndarray
    reg: BayesianRegression
    rng: np.random.Generator
    state: object = None
    needs_refresh: bool = False


def _build_columns(V, state, layout, cfg, fixed_scales=True):
    cols = []
    m = V.shape[1]
    for j in range(m):
        nj = int(layout.n_obs[j])
        gap_rows = np.asarray(layout.gaps[j], int)
        if cfg.mda_mode == "predictive" and len(gap_rows):
            rows = np.setdiff1d(np.arange(nj), gap_rows)
        else:
            rows = np.arange(nj)
        if len(rows) < 2:
            raise DataError(f"column position {j} has fewer than two usable rows")
        hyper = _column_hyper(cfg, j, nj, len(rows))
        try:
            reg = BayesianRegression(V[rows, :j], V[rows, j], hyper)
        except DataError as e:
            raise DataError(f"column position {j}: {e}") from None
        needs = bool((state[rows, :j] == lay.GAP).any()) or (
            cfg.mda_mode == "full" and len(gap_rows) > 0)
        cols.append(_Column(j, rows, gap_rows, reg, column_stream(cfg.seed, j),
                            needs_refresh=needs))
    return cols


class _Recorder:
    def __init__(self, T, m, gap_count):
        self.beta0 = [np.empty(T) for _ in range(m)]
        self.beta = [np.empty((T, j)) for j in range(m)]
        self.sigma2 = [np.empty(T) for _ in range(m)]
        self.nu = np.full((T, m), np.inf)
        self.nz = [np.empty((T, j), bool) for j in range(m)]
        self.logpost = np.zeros(T)
        self.gaps = np.empty((T, gap_count))

    def record(self, t, c: _Column):
        j, st = c.j, c.state
        self.beta0[j][t], self.beta[j][t] = c.reg.full_beta(st)
        self.sigma2[j][t] = st.sigma2
        if c.reg.hyper.student_t:
            self.nu[t, j] = st.nu
        nz = np.zeros(j, bool)
        nz[st.active] = st.beta != 0.0
        self.nz[j][t] = nz
        self.logpost[t] += c.reg.log_posterior(st)


def _run_independent(args):
    """Worker: a whole chain for one column (no cross-column coupling)."""
    c, T, burnin, thin = args
    tr = c.reg.run(c.rng, T, burnin, thin)
    nz = tr.beta != 0.0
    return tr.beta0, tr.beta, tr.sigma2, tr.nu, nz, tr.logpost, tr.diagnostics


def _impute(c: _Column, cols, V, state, mode):
    """Redraw the gap cells of column ``c`` in the ordered matrix ``V``."""
    if not len(c.gap_rows):
        return
    b0, b = c.reg.full_beta(c.state)
    s2 = c.state.sigma2
    rows = c.gap_rows
    mean = b0 + V[rows, :c.j] @ b
    if mode == "predictive":
        V[rows, c.j] = mean + math.sqrt(s2) * c.rng.standard_normal(len(rows))
        return
    # exact full conditional: own regression plus every later regression
    # in which the cell is a predictor
    om = c.state.omega2
    prec = 1.0 / (s2 * (om[rows] if om is not None else np.ones(len(rows))))
    num = mean * prec
    for k in cols[c.j + 1:]:
        inside = rows[rows < len(k.rows)]
        if not len(inside):
            continue
        kb0, kb = k.reg.full_beta(k.state)
        coef = kb[c.j]
        if coef == 0.0:
            continue
        wk = 1.0 / (k.state.sigma2 * (k.state.omega2[inside] if k.state.omega2 is not None
                                        else 1.0))
        partial = V[inside, k.j] - kb0 - V[inside, :k.j] @ kb + coef * V[inside, c.j]
        sel = np.searchsorted(rows, inside)
        prec[sel] += coef * coef * wk
        num[sel] += coef * partial * wk
    V[rows, c.j] = num / prec + c.rng.standard_normal(len(rows)) / np.sqrt(prec)


def _serial_schedule(cols, V, state, cfg, T, burnin, thin, rec, gap_index):
    m = len(cols)
    nu_rng = column_stream(cfg.seed, m)
    for c in cols:
        c.state = c.reg.initial_state(c.rng)
    tune = [c.reg.hyper.prior == "ng" for c in cols]
    total = burnin + T * thin
    for it in range(total):
        saving = it >= burnin and (it - burnin + 1) % thin == 0
        if it == burnin:
            for c in cols:
                c.reg.gamma_accepts = c.reg.gamma_tries = 0
        if cfg.common_nu:
            nu = draw_nu(nu_rng, [c.state.omega2 for c in cols], cols[0].reg.hyper.theta)
            for c in cols:
                c.state.nu = nu
        for c in cols:
            if c.needs_refresh:
                if cfg.mda_mode == "full":
                    c.reg.set_design(V[c.rows, :c.j], V[c.rows, c.j])
                else:
                    c.reg.set_design(V[c.rows, :c.j])
            c.state = c.reg.sweep(c.rng, c.state, update_nu=not cfg.common_nu,
                                  tune=tune[c.j] and it < burnin)
            if cfg.mda:
                _impute(c, cols, V, state, cfg.mda_mode)
        if saving:
            t = (it - burnin) // thin
            for c in cols:
                rec.record(t, c)
            if gap_index:
                rec.gaps[t] = [V[i, j] for i, j in gap_index]


def bayes_path(d: lay.DataMatrix, layout: lay.MonotoneLayout | None = None,
               config: EngineConfig | None = None) -> PosteriorDrawSet:
    """Posterior draws of ``(mu, Sigma)`` by chained Bayesian regressions.

    Column chains run independently (in parallel with ``config.jobs > 1``)
    unless gaps are imputed or ``nu`` is shared, in which case every sweep
    visits the columns in order. Each column owns a random stream derived
    from ``(seed, position)``, so the independent and serial schedules give
    identical draws when both apply.

    Raises
    ------
    DataError
        If the pattern has gaps and ``config.mda`` is false.
    """
    cfg = config or EngineConfig()
    d = d.copy()
    layout = _prepare(d, layout)
    if not d.has_gaps():
        if lay.check_monotone(layout, d):
            if not cfg.mda:
                raise DataError("missingness is not monotone; enable data augmentation (mda)")
            d, layout = lay.mark_gaps(d, layout)
    elif not cfg.mda:
        raise DataError("latent gaps present; enable data augmentation (mda)")
    m, n = d.m, d.n
    V = layout.ordered(d.values).copy()
    state = layout.ordered(d.state)
    gap_index = [(int(i), j) for j in range(m) for i in layout.gaps[j]]
    for j in range(m):
        g = layout.gaps[j]
        if len(g):
            nj = int(layout.n_obs[j])
            obs = V[:nj, j][state[:nj, j] == lay.VALUE]
            V[g, j] = obs.mean()
    T = cfg.T
    burnin = cfg.resolved_burnin()
    thin = cfg.resolved_thin(n)
    cols = _build_columns(V, state, layout, cfg)
    rec = _Recorder(T, m, len(gap_index))
    coupled = cfg.mda and gap_index or cfg.common_nu
    diags = {}
    if coupled:
        _serial_schedule(cols, V, state, cfg, T, burnin, thin, rec, gap_index)
        for c in cols:
            diags[c.j] = c.reg.diagnostics()
    else:
        jobs = [(c, T, burnin, thin) for c in cols]
        if cfg.jobs > 1 and m > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
                results = list(ex.map(_run_independent, jobs))
        else:
            results = [_run_independent(a) for a in jobs]
        for c, (b0, b, s2, nu, nz, lp, dg) in zip(cols, results):
            rec.beta0[c.j], rec.beta[c.j], rec.sigma2[c.j] = b0, b, s2
            if cfg.student_t:
                rec.nu[:, c.j] = nu
            rec.nz[c.j] = nz
            rec.logpost += lp
            diags[c.j] = dg
    mu, S = _phi_inverse_batch(rec.beta0, rec.beta, rec.sigma2)
    inv = np.argsort(layout.col_order)
    mu, S = _reorder(mu, S, inv)
    incl = np.zeros((T, m, m), bool)
    mask = np.zeros((m, m), bool)
    co = layout.col_order
    for j in range(m):
        if j:
            incl[:, co[j], co[:j]] = rec.nz[j]
            mask[co[j], co[:j]] = True
    nu = rec.nu[:, inv] if cfg.student_t else None
    cells = [(int(layout.row_order[i]), int(co[j])) for i, j in gap_index]
    labels = list(d.labels)
    diagnostics = {labels[co[j]]: dg for j, dg in diags.items()}
    return PosteriorDrawSet(mu, S, labels, nu, incl, mask, list(labels), rec.gaps, cells,
                            rec.logpost, diagnostics)


def common_nu_draw(rng, omega2_by_column, theta):
    """Single ``nu`` pooled over all columns' latent variances."""
    return draw_nu(rng, list(omega2_by_column), theta)


def with_factors(d: lay.DataMatrix, F, config: EngineConfig | None = None,
                 factor_labels=None) -> PosteriorDrawSet:
    """Fit ``[F, Y]`` jointly and return the draws for the ``Y`` block only.

    The fully observed factors come first in the staircase, so every asset
    regression may use them as predictors. Inclusion probabilities keep the
    factor columns as predictors (rows are assets only).
    """
    F = np.asarray(F, float)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] != d.n:
        raise DataError(f"factors have {F.shape[0]} rows, data have {d.n}")
    if np.isnan(F).any():
        raise DataError("factors must be completely observed")
    K = F.shape[1]
    if K == 0:
        return bayes_path(d, None, config)
    flab = list(factor_labels) if factor_labels is not None else [f"F{k + 1}" for k in range(K)]
    comb = lay.DataMatrix(np.column_stack([F, d.values]),
                          np.column_stack([np.zeros(F.shape, np.int8), d.state]),
                          flab + list(d.labels))
    full = bayes_path(comb, None, config)
    a = slice(K, K + d.m)
    nu = full.nu[:, a] if full.nu is not None else None
    gaps_keep = [i for i, (_, c) in enumerate(full.gap_cells) if c >= K]
    return PosteriorDrawSet(full.mu[:, a], full.sigma[:, a, a], list(d.labels), nu,
                            full.inclusion[:, a, :], full.predictor_mask[a, :],
                            full.pred_labels, full.gaps[:, gaps_keep],
                            [(r, c - K) for r, c in (full.gap_cells[i] for i in gaps_keep)],
                            full.logpost, full.diagnostics)


def factor_model_sigma(loadings, omega, sigma2):
    """``Lambda' Omega Lambda + diag(sigma2)`` for ``K x m`` loadings."""
    L = np.atleast_2d(np.asarray(loadings, float))
    Om = np.atleast_2d(np.asarray(omega, float))
    s2 = np.asarray(sigma2, float)
    if L.shape[0] != Om.shape[0] or L.shape[1] != len(s2):
        raise ValueError("dimension mismatch between loadings, factor covariance and variances")
    return L.T @ Om @ L + np.diag(s2)


def ledoit_combine(sigma_f, sigma_c, alpha):
    """Convex combination ``alpha * sigma_f + (1 - alpha) * sigma_c``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    sigma_f = np.asarray(sigma_f, float)
    sigma_c = np.asarray(sigma_c, float)
    if sigma_f.shape != sigma_c.shape:
        raise ValueError("matrices must have the same shape")
    return alpha * sigma_f + (1.0 - alpha) * sigma_c


def summarize(draws: PosteriorDrawSet, kind: str = "mean") -> MvnEstimate:
    """Posterior mean, or the saved draw with the largest summed log posterior."""
    if draws.T == 0:
        raise ValueError("no draws to summarize")
    if kind == "mean":
        S = draws.sigma.mean(axis=0)
        return MvnEstimate(draws.mu.mean(axis=0), 0.5 * (S + S.T), list(draws.labels))
    if kind == "map":
        return draws.estimate(int(np.argmax(draws.logpost)))
    raise ValueError("kind must be 'mean' or 'map'")


def inclusion_probabilities(draws: PosteriorDrawSet):
    """Posterior inclusion frequencies with NaN where ``l`` is not a predictor of ``j``.

    Returns ``(P, row_labels, col_labels)``.
    """
    if draws.inclusion is None:
        raise ValueError("draws carry no inclusion indicators")
    P = draws.inclusion.mean(axis=0)
    P = np.where(draws.predictor_mask, P, np.nan)
    return P, list(draws.labels), list(draws.pred_labels)
