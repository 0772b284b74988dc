"""Mean-variance portfolio balancing and rolling-window backtests.

The quadratic programs are small and dense, so they are solved with a
primal active-set method started from a feasible vertex (found by linear
programming). Every solution carries its Lagrange multipliers and a KKT
residual as a certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog, lsq_linear

from .errors import DataError, InfeasibleError, NumericError
from .layout import DataMatrix


@dataclass
class PortfolioProblem:
    """Inputs of a long-only mean-variance problem.

    ``mu`` and ``target`` switch on the expected-return constraint. With
    ``riskfree`` set, the remainder ``1 - sum(w)`` earns ``riskfree`` and full
    investment relaxes to ``sum(w) <= 1``.
    """

    sigma: np.ndarray
    mu: np.ndarray | None = None
    target: float | None = None
    riskfree: float | None = None
    cap: float = 1.0

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, float))
        if self.mu is not None:
            self.mu = np.asarray(self.mu, float)


@dataclass
class Weights:
    """A QP solution with its optimality certificate."""

    w: np.ndarray
    objective: float
    binding: dict = field(default_factory=dict)
    multipliers: dict = field(default_factory=dict)
    kkt_residual: float = 0.0
    iterations: int = 0


# ----------------------------------------------------------------------------
# generic convex QP: min 1/2 x'Gx + c'x  s.t.  A_eq x = b_eq,  A_in x >= b_in
# ----------------------------------------------------------------------------

@dataclass
class QPResult:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    kkt_residual: float
    iterations: int


def _feasible_point(n, A_eq, b_eq, A_in, b_in):
    res = linprog(np.zeros(n), A_ub=-A_in if len(b_in) else None,
                  b_ub=-b_in if len(b_in) else None,
                  A_eq=A_eq if len(b_eq) else None, b_eq=b_eq if len(b_eq) else None,
                  bounds=[(None, None)] * n, method="highs")
    if res.status == 2:
        raise InfeasibleError("constraints admit no feasible portfolio")
    if res.status != 0:
        raise NumericError(f"phase-1 linear program failed: {res.message}")
    return res.x


def _independent_rows(rows, start):
    """Greedily extend ``start`` (a matrix) with rows that keep full row rank."""
    keep = []
    M = start
    for i, r in rows:
        cand = np.vstack([M, r]) if M.size else r[None, :]
        if np.linalg.matrix_rank(cand, tol=1e-10) == cand.shape[0]:
            keep.append(i)
            M = cand
    return keep


def solve_qp(G, c, A_eq, b_eq, A_in, b_in, tol=1e-10, max_iter=None, x0=None) -> QPResult:
    """Primal active-set method for a convex QP with a bounded feasible set.

    ``G`` must be positive semidefinite. The equality-constrained
    subproblems are solved through the full KKT system; a singular system
    (possible with semidefinite ``G``) falls back to least squares.
    """
    G = np.asarray(G, float)
    n = G.shape[0]
    c = np.zeros(n) if c is None else np.asarray(c, float)
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, float))
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, float))
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, float))
    b_in = np.zeros(0) if b_in is None else np.atleast_1d(np.asarray(b_in, float))
    n_eq, n_in = len(b_eq), len(b_in)
    x = _feasible_point(n, A_eq, b_eq, A_in, b_in) if x0 is None else np.asarray(x0, float)
    scale = max(1.0, float(np.abs(b_in).max(initial=0.0)), float(np.abs(b_eq).max(initial=0.0)))
    ftol = 1e-9 * scale
    # project away LP round-off
    slack = A_in @ x - b_in
    active0 = [i for i in np.argsort(slack) if slack[i] <= ftol]
    W = _independent_rows([(i, A_in[i]) for i in active0], A_eq)
    max_iter = max_iter or 50 * (n + n_in) + 100
    it = 0
    for it in range(1, max_iter + 1):
        Aw = np.vstack([A_eq, A_in[W]]) if W else A_eq
        k = Aw.shape[0]
        g = G @ x + c
        K = np.zeros((n + k, n + k))
        K[:n, :n] = G
        K[:n, n:] = -Aw.T
        K[n:, :n] = Aw
        rhs = np.concatenate([-g, np.zeros(k)])
        try:
            sol = np.linalg.solve(K, rhs)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        p = sol[:n]
        lam = sol[n:]
        if np.linalg.norm(p, np.inf) <= tol * max(1.0, np.linalg.norm(x, np.inf)):
            lam_in = lam[n_eq:]
            if not W or lam_in.min() >= -tol:
                break
            W.pop(int(np.argmin(lam_in)))
            continue
        Ap = A_in @ p
        alpha, block = 1.0, None
        for i in range(n_in):
            if i in W or Ap[i] >= -1e-14:
                continue
            a = (b_in[i] - A_in[i] @ x) / Ap[i]
            if a < alpha:
                alpha, block = max(a, 0.0), i
        x = x + alpha * p
        if block is not None:
            W.append(block)
    else:
        raise NumericError("active-set iterations exhausted")
    lam_eq, lam_in, resid = kkt_certificate(G, c, A_eq, b_eq, A_in, b_in, x, ftol)
    return QPResult(x, lam_eq, lam_in, resid, it)


def kkt_certificate(G, c, A_eq, b_eq, A_in, b_in, x, ftol=1e-9):
    """Multipliers at ``x`` and the largest KKT violation.

    Multipliers of constraints that are not active (slack above ``ftol``)
    are zero; the rest come from bounded least squares on the stationarity
    equations (inequality multipliers kept nonnegative). The residual is the max of stationarity, primal
    infeasibility, negative inequality multipliers and complementary
    slackness.
    """
    n_eq = len(b_eq)
    slack = A_in @ x - b_in
    act = np.flatnonzero(slack <= ftol)
    A = np.vstack([A_eq, A_in[act]])
    g = G @ x + c
    if A.shape[0]:
        # nonnegative inequality multipliers; unique only at nondegenerate points
        lo = np.concatenate([np.full(n_eq, -np.inf), np.zeros(len(act))])
        lam = lsq_linear(A.T, g, bounds=(lo, np.full(A.shape[0], np.inf)),
                         method="bvls", tol=1e-14).x
    else:
        lam = np.zeros(0)
    lam_eq = lam[:n_eq]
    lam_in = np.zeros(len(b_in))
    lam_in[act] = lam[n_eq:]
    stat = np.abs(g - A_eq.T @ lam_eq - A_in.T @ lam_in).max(initial=0.0)
    prim = max(np.abs(A_eq @ x - b_eq).max(initial=0.0), (-slack).max(initial=0.0))
    dual = (-lam_in).max(initial=0.0)
    comp = np.abs(lam_in * slack).max(initial=0.0)
    return lam_eq, lam_in, float(max(stat, prim, dual, comp))


# ----------------------------------------------------------------------------
# portfolio problems
# ----------------------------------------------------------------------------

def _check_sigma(S):
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(S, S.T, atol=1e-10 * max(1.0, np.abs(S).max())):
        raise ValueError("covariance must be symmetric")
    S = 0.5 * (S + S.T)
    ev = np.linalg.eigvalsh(S)
    if ev.min() < -1e-8 * max(np.trace(S), 1e-300):
        raise NumericError(f"covariance is not positive semidefinite (min eigenvalue {ev.min():.3g})")
    return S


def _build(p: PortfolioProblem, with_target: bool):
    S = _check_sigma(p.sigma)
    m = S.shape[0]
    if not 0 < p.cap <= 1:
        raise ValueError("cap must lie in (0, 1]")
    rf = p.riskfree
    if rf is None and p.cap * m < 1 - 1e-12:
        raise InfeasibleError(f"cap {p.cap} with {m} assets cannot reach full investment")
    rows, rhs, names = [np.eye(m), -np.eye(m)], [np.zeros(m), -np.full(m, p.cap)], \
        [f"lower[{i}]" for i in range(m)] + [f"upper[{i}]" for i in range(m)]
    A_eq, b_eq = np.ones((1, m)), np.ones(1)
    if rf is not None:
        rows.append(-np.ones((1, m)))
        rhs.append(-np.ones(1))
        names.append("budget")
        A_eq, b_eq = np.zeros((0, m)), np.zeros(0)
    if with_target:
        if p.mu is None or p.target is None:
            raise ValueError("mean-variance problems need mu and target")
        if len(p.mu) != m:
            raise ValueError("mu length does not match the covariance")
        if rf is None:
            rows.append(p.mu[None, :])
            rhs.append(np.array([p.target]))
        else:
            rows.append((p.mu - rf)[None, :])
            rhs.append(np.array([p.target - rf]))
        names.append("target")
    return S, A_eq, b_eq, np.vstack(rows), np.concatenate(rhs), names


def _solve(p, with_target):
    S, A_eq, b_eq, A_in, b_in, names = _build(p, with_target)
    if with_target and p.riskfree is None:
        best = np.sort(p.mu)[::-1]
        # largest attainable mean under the box and budget
        rem, top = 1.0, 0.0
        for v in best:
            take = min(p.cap, rem)
            top += take * v
            rem -= take
            if rem <= 0:
                break
        if p.target > top + 1e-12:
            raise InfeasibleError(f"target return {p.target} exceeds the attainable maximum {top}")
    res = solve_qp(2.0 * S, None, A_eq, b_eq, A_in, b_in)
    w = res.x
    slack = A_in @ w - b_in
    binding = {nm: bool(s <= 1e-9) for nm, s in zip(names, slack)}
    mult = {nm: float(l) for nm, l in zip(names, res.lam_in)}
    if len(res.lam_eq):
        mult["budget"] = float(res.lam_eq[0])
        binding["budget"] = True
    return Weights(w, float(w @ S @ w), binding, mult, res.kkt_residual, res.iterations)


def solve_min_variance(p: PortfolioProblem) -> Weights:
    """Minimize ``w' Sigma w`` with ``sum(w) = 1`` and ``0 <= w <= cap``.

    Raises
    ------
    InfeasibleError
        If ``cap * m < 1``.
    NumericError
        If ``Sigma`` is not positive semidefinite.
    """
    return _solve(p, False)


def solve_mean_variance(p: PortfolioProblem) -> Weights:
    """Minimum variance subject to an expected-return floor.

    Without a risk-free asset: ``w' mu >= target``, ``sum(w) = 1``. With
    ``riskfree = R``: ``w' mu + (1 - sum(w)) R >= target`` and ``sum(w) <= 1``.
    """
    return _solve(p, True)


def estimation_risk_moments(draws=None, mu_draws=None, sigma_draws=None):
    """Predictive moments integrating over parameter uncertainty.

    Returns the mean of the ``mu`` draws and the mean of the ``Sigma``
    draws plus the covariance of the ``mu`` draws (divisor ``T``).
    Accepts a :class:`~shrinkmvn.engine.PosteriorDrawSet` or raw arrays.
    """
    if draws is not None:
        mu_draws, sigma_draws = draws.mu, draws.sigma
    mu_draws = np.asarray(mu_draws, float)
    sigma_draws = np.asarray(sigma_draws, float)
    if mu_draws.ndim == 1:
        mu_draws = mu_draws[:, None]
    if sigma_draws.ndim == 1:
        sigma_draws = sigma_draws[:, None, None]
    T = mu_draws.shape[0]
    if T < 2:
        raise ValueError("at least two draws are needed")
    mbar = mu_draws.mean(axis=0)
    dev = mu_draws - mbar
    S = sigma_draws.mean(axis=0) + dev.T @ dev / T
    return mbar, 0.5 * (S + S.T)


# ----------------------------------------------------------------------------
# backtest
# ----------------------------------------------------------------------------

@dataclass
class Strategy:
    """How to form weights at each rebalance date.

    ``estimator`` maps a window of excess returns (a :class:`DataMatrix`)
    to ``(mu, Sigma)``; ``None`` gives equal weights. ``objective`` is
    ``"min_variance"`` or ``"mean_variance"``; for the latter ``target``
    is a number or a callable of the estimated ``mu``.
    """

    name: str
    estimator: Callable | None = None
    objective: str = "min_variance"
    target: float | Callable | None = None
    cap: float = 1.0


@dataclass
class BacktestReport:
    """Annualized performance statistics of one strategy."""

    name: str
    mean: float
    sd: float
    sharpe: float
    te: float
    cm: float
    wmin: float
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def row(self):
        return [self.mean, self.sd, self.sharpe, self.te, self.cm, self.wmin]

    COLUMNS = ("mean", "sd", "sharpe", "te", "cm", "wmin")


def effective_holdings(w, threshold: float = 0.005) -> int:
    """Number of weights above ``threshold`` (half a percent by default)."""
    return int((np.asarray(w, float) > threshold).sum())


def eligible_assets(window: np.ndarray, min_obs: int = 12) -> np.ndarray:
    """Columns with at least ``min_obs`` returns and an observed latest return."""
    obs = ~np.isnan(window)
    return np.flatnonzero((obs.sum(axis=0) >= min_obs) & obs[-1])


def performance(r, benchmark, riskfree, periods: int = 12):
    """``(mean, sd, sharpe, te, cm)`` of a realized return series.

    Raises
    ------
    NumericError
        If the series is constant (Sharpe ratio undefined).
    """
    r = np.asarray(r, float)
    b = np.asarray(benchmark, float)
    f = np.asarray(riskfree, float)
    sd = float(np.std(r, ddof=1)) * math.sqrt(periods)
    # round-off spread of a constant series counts as zero
    scale = float(np.abs(r).max()) if r.size else 0.0
    if not sd > 1e-12 * scale * math.sqrt(periods):
        raise NumericError("portfolio returns are constant; Sharpe ratio undefined")
    mean = float(r.mean()) * periods
    sharpe = float((r - f).mean()) * periods / sd
    te = float(np.std(r - b, ddof=1)) * math.sqrt(periods)
    cm = float(np.corrcoef(r, b)[0, 1])
    return mean, sd, sharpe, te, cm


def backtest(returns, benchmark, riskfree, strategy: Strategy, window: int = 60,
             rebalance: int = 12, start: int | None = None,
             min_obs: int = 12) -> BacktestReport:
    """Rolling-window backtest of one strategy.

    At each rebalance date ``t`` (row index, starting at ``start`` which
    defaults to ``window``), the eligible assets' excess returns over rows
    ``t-window .. t-1`` feed the estimator; the resulting weights are held
    for rows ``t .. t+rebalance-1``. A missing return during the holding
    period contributes zero. Infeasible or failed solves keep the previous
    weights and are listed in ``flags``.
    """
    Y = returns.values if isinstance(returns, DataMatrix) else np.asarray(returns, float)
    n, m = Y.shape
    b = np.asarray(benchmark, float)
    f = np.asarray(riskfree, float)
    if len(b) != n or len(f) != n:
        raise DataError("benchmark and risk-free series must align with the returns")
    start = window if start is None else start
    if start >= n:
        raise DataError("no out-of-sample periods after the first window")
    realized = []
    wlist, flags = [], []
    prev = None
    for t in range(start, n, rebalance):
        win = Y[max(0, t - window):t] - f[max(0, t - window):t, None]
        elig = eligible_assets(win, min_obs)
        w = np.zeros(m)
        try:
            if not len(elig):
                raise InfeasibleError("no eligible assets")
            if strategy.estimator is None:
                w[elig] = 1.0 / len(elig)
            else:
                mu_hat, S_hat = strategy.estimator(DataMatrix.from_array(win[:, elig]))
                prob = PortfolioProblem(S_hat, mu_hat, None, None, strategy.cap)
                if strategy.objective == "mean_variance":
                    tg = strategy.target(mu_hat) if callable(strategy.target) else strategy.target
                    prob.target = tg
                    w[elig] = solve_mean_variance(prob).w
                else:
                    w[elig] = solve_min_variance(prob).w
        except (InfeasibleError, NumericError) as e:
            if prev is None:
                raise
            w = prev
            flags.append((t, str(e)))
        hold = Y[t:t + rebalance]
        realized.append(np.nan_to_num(hold, nan=0.0) @ w)
        wlist.append((t, w.copy()))
        prev = w
    r = np.concatenate(realized)
    idx = np.arange(start, start + len(r))
    try:
        mean, sd, sharpe, te, cm = performance(r, b[idx], f[idx])
    except NumericError as e:
        mean, sd = float(r.mean()) * 12, 0.0
        sharpe = cm = math.nan
        te = float(np.std(r - b[idx], ddof=1)) * math.sqrt(12)
        flags.append((None, str(e)))
    wmin = float(np.mean([effective_holdings(w) for _, w in wlist]))
    return BacktestReport(strategy.name, mean, sd, sharpe, te, cm, wmin, r, wlist, flags)
