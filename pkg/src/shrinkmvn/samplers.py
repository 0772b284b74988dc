"""Gibbs samplers for hierarchical Bayesian shrinkage regression.

Supported coefficient priors (``prior=``):

``lasso``
    Laplace prior as a normal scale mixture, ``tau_j^2 ~ Exp(lambda^2/2)``,
    ``lambda^2 ~ G(a_lambda, b_lambda)``.
``ng``
    Normal-gamma: ``tau_j^2 ~ G(gamma, lambda^2/2)``,
    ``lambda^2 | gamma ~ G(a_lambda, b_lambda/gamma)``, ``gamma ~ Exp(1)``.
``ridge``
    A single shared ``tau^2 ~ IG(a_tau/2, b_tau/2)``.
``flat``
    ``tau^2 = inf``; ordinary Bayesian least squares.

Errors are normal, or Student-t through latent ``omega_i^2 ~ IG(nu/2, nu/2)``
with ``nu ~ Exp(theta)``. Optional reversible-jump moves average over
subsets of predictors of size at most ``p* = min(p, n-1)``.

Gamma distributions are shape/rate; ``IG(a, b)`` is shape/rate on the
reciprocal. The regression works on a design whose columns are centred and
scaled to unit Euclidean norm; draws are mapped back to raw coordinates
before they leave this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, special

from .distributions import rgig1, rinvgamma
from .errors import DataError, NumericError

PRIORS = ("lasso", "ng", "ridge", "flat")

_LOG2PI = math.log(2.0 * math.pi)
# latent scales below this are treated as this (keeps 1/tau^2 finite when a
# small normal-gamma shape makes gamma/GIG draws underflow)
TAU2_FLOOR = 1e-300


# ----------------------------------------------------------------------------
# containers
# ----------------------------------------------------------------------------

@dataclass
class RegressionHyperParams:
    """Prior hyperparameters and sampler switches for one regression.

    ``b_lambda=None`` means "choose by empirical Bayes" (``M/2`` with ``M``
    an estimate of the standardized signal-to-noise ratio). Likewise
    ``a_tau=b_tau=None`` gives the ridge scale a weak ``IG(1/2, M/2)`` prior;
    ``a_tau=b_tau=0`` is the improper ``1/tau^2`` prior. ``pi=None``
    makes the inclusion probability hierarchical, ``pi ~ Beta(g, h)``.
    Names in ``fixed`` (any of ``tau2``, ``lambda2``, ``gamma``, ``nu``,
    ``sigma2``, ``pi``) are held at their initial values.
    """

    prior: str = "lasso"
    a_sigma: float = 0.0
    b_sigma: float = 0.0
    a_lambda: float = 2.0
    b_lambda: float | None = None
    a_tau: float | None = None
    b_tau: float | None = None
    theta: float = 0.1
    sigma_gamma: float = 0.5
    g: float = 1.0
    h: float = 1.0
    pi: float | None = None
    model_averaging: bool = False
    student_t: bool = False
    marginal_sigma2: bool = True
    eb_alpha: float = 0.05
    fixed: tuple = ()

    def __post_init__(self):
        if self.prior not in PRIORS:
            raise ValueError(f"unknown prior {self.prior!r}; choose from {PRIORS}")
        if self.model_averaging and self.prior == "flat":
            raise ValueError("model averaging needs a proper coefficient prior")

    @property
    def M(self) -> float | None:
        return None if self.b_lambda is None else 2.0 * self.b_lambda


@dataclass
class RegressionState:
    """Current values of one regression's parameters (standardized scale).

    ``beta`` holds the ``k`` active coefficients, indexed by ``active``.
    ``tau2`` has one entry per active coefficient (lasso/NG), a single
    entry (ridge) or none (flat).
    """

    beta0: float
    beta: np.ndarray
    active: np.ndarray
    sigma2: float
    tau2: np.ndarray
    lambda2: float = 1.0
    gamma: float = 1.0
    omega2: np.ndarray | None = None
    nu: float = 10.0
    pi: float = 0.5

    @property
    def k(self) -> int:
        return len(self.active)

    def copy(self) -> "RegressionState":
        return replace(self, beta=self.beta.copy(), active=self.active.copy(),
                       tau2=self.tau2.copy(),
                       omega2=None if self.omega2 is None else self.omega2.copy())


@dataclass
class StandardizedDesign:
    """Design with zero-mean, unit-norm columns plus the inverse transform."""

    X: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    y: np.ndarray
    y_tilde: np.ndarray
    y_bar: float

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def standardize(Xraw, y, scales=None) -> StandardizedDesign:
    """Centre each column and scale it to unit L2 norm.

    ``scales`` may be supplied to reuse a previous scaling (columns are
    then centred but only approximately unit norm).
    """
    Xraw = np.asarray(Xraw, float)
    y = np.asarray(y, float)
    n = y.shape[0]
    if Xraw.ndim != 2:
        Xraw = Xraw.reshape(n, -1)
    if n < 2:
        raise DataError("at least two observations required")
    centers = Xraw.mean(axis=0)
    Xc = Xraw - centers
    if scales is None:
        scales = np.sqrt((Xc * Xc).sum(axis=0))
        const = np.flatnonzero(scales <= 1e-12 * np.maximum(1.0, np.abs(centers)))
        if len(const):
            raise DataError(f"constant design column(s) {const.tolist()}; drop before fitting")
    scales = np.asarray(scales, float)
    ybar = float(y.mean())
    return StandardizedDesign(Xc / scales, centers, scales, y, y - ybar, ybar)


def unstandardize_draw(beta0: float, beta: np.ndarray, design: StandardizedDesign):
    """Map standardized ``(beta0, beta)`` to raw-coordinate coefficients."""
    braw = np.asarray(beta, float) / design.scales
    return float(beta0 - braw @ design.centers), braw


# ----------------------------------------------------------------------------
# individual conditionals
# ----------------------------------------------------------------------------

def _chol(A):
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NumericError("posterior precision matrix is not positive definite") from None


def posterior_factor(xtx, xty, prec):
    """Factor ``A = xtx + diag(prec)``.

    Returns ``(L, beta_tilde, quad, logdet)`` with ``L`` lower Cholesky,
    ``beta_tilde = A^{-1} xty``, ``quad = beta_tilde' A beta_tilde`` and
    ``logdet = log|A|``.
    """
    if len(xty) == 0:
        return np.zeros((0, 0)), np.zeros(0), 0.0, 0.0
    A = xtx + np.diag(prec)
    L = _chol(A)
    z = linalg.solve_triangular(L, xty, lower=True, check_finite=False)
    bt = linalg.solve_triangular(L.T, z, lower=False, check_finite=False)
    return L, bt, float(z @ z), 2.0 * float(np.log(np.diag(L)).sum())


def draw_beta(rng, sigma2, xtx, xty, prec, factor=None):
    """Draw ``beta ~ N(A^{-1} xty, sigma2 A^{-1})`` with ``A = xtx + diag(prec)``.

    ``prec`` holds the prior precisions ``1/tau_j^2`` (0 for a flat
    coefficient such as the Student-t intercept). ``factor`` may pass a
    precomputed :func:`posterior_factor` result. Returns ``(beta, beta_tilde)``.
    """
    L, bt, _, _ = factor if factor is not None else posterior_factor(xtx, xty, prec)
    if len(bt) == 0:
        return np.zeros(0), np.zeros(0)
    e = rng.standard_normal(len(bt))
    return bt + math.sqrt(sigma2) * linalg.solve_triangular(L.T, e, lower=False,
                                                           check_finite=False), bt


def draw_intercept(rng, y_bar, sigma2, n):
    """``beta0 ~ N(ybar, sigma2/n)`` (normal errors, centred design)."""
    return y_bar + math.sqrt(sigma2 / n) * rng.standard_normal()


def sigma2_shape_rate(a_sigma, b_sigma, n_eff, n_finite, n_flat, psi, marginal):
    """Shape and rate of the inverse-gamma conditional for ``sigma^2``.

    ``n_eff`` is ``n-1`` for normal errors (intercept integrated out) and
    ``n`` for Student-t errors. ``n_finite`` and ``n_flat`` count
    coefficients with proper and flat priors. ``psi`` is the residual plus
    penalty quadratic form for the current (conditional) or posterior-mean
    (marginal) coefficients.
    """
    if marginal:
        shape = 0.5 * (a_sigma + n_eff - n_flat)
    else:
        shape = 0.5 * (a_sigma + n_eff + n_finite)
    return shape, 0.5 * (b_sigma + psi)


def draw_sigma2(rng, shape, rate):
    """``IG(shape, rate)`` draw with a numerical sanity check."""
    if not (rate > 0.0) or not (shape > 0.0):
        raise NumericError(f"improper sigma^2 conditional (shape={shape}, rate={rate})")
    return float(rinvgamma(rng, shape, rate))


def draw_tau2_lasso(rng, beta, sigma2, lambda2):
    """Lasso latent scales: ``1/tau_j^2 ~ InvGauss(sqrt(l2 s2 / b_j^2), l2)``.

    A zero coefficient has an infinite inverse-Gaussian mean; its scale is
    drawn from the prior ``Exp(lambda^2/2)`` instead.
    """
    beta = np.asarray(beta, float)
    out = np.empty(beta.shape)
    nz = beta != 0.0
    if nz.any():
        mu = np.sqrt(lambda2 * sigma2 / beta[nz] ** 2)
        out[nz] = 1.0 / rng.wald(mu, lambda2)
    if (~nz).any():
        out[~nz] = rng.exponential(2.0 / lambda2, size=int((~nz).sum()))
    return np.maximum(out, TAU2_FLOOR)


def draw_tau2_ng(rng, beta, sigma2, lambda2, gamma):
    """Normal-gamma latent scales: ``tau_j^2 ~ GIG(gamma - 1/2, b_j^2/s2, l2)``."""
    if gamma == 1.0:
        # GIG(1/2, chi, psi) is the reciprocal inverse-Gaussian lasso conditional
        return draw_tau2_lasso(rng, beta, sigma2, lambda2)
    beta = np.asarray(beta, float)
    lam = gamma - 0.5
    return np.maximum([rgig1(rng, lam, b * b / sigma2, lambda2) for b in beta], TAU2_FLOOR)


def draw_tau2_ridge(rng, beta, sigma2, a_tau, b_tau):
    """Shared ridge scale: ``tau^2 ~ IG((a_tau + k)/2, (b_tau + b'b/s2)/2)``."""
    beta = np.asarray(beta, float)
    shape = 0.5 * (a_tau + len(beta))
    rate = 0.5 * (b_tau + float(beta @ beta) / sigma2)
    if shape <= 0 or rate <= 0:
        raise NumericError("ridge tau^2 conditional is improper")
    return float(rinvgamma(rng, shape, rate))


def lambda2_shape_rate(tau2, gamma, a_lambda, b_lambda):
    tau2 = np.asarray(tau2, float)
    return a_lambda + len(tau2) * gamma, b_lambda / gamma + 0.5 * float(tau2.sum())


def draw_lambda2(rng, tau2, gamma, a_lambda, b_lambda):
    """``lambda^2 ~ G(a_lambda + k gamma, b_lambda/gamma + sum(tau^2)/2)``."""
    shape, rate = lambda2_shape_rate(tau2, gamma, a_lambda, b_lambda)
    return float(rng.gamma(shape, 1.0 / rate))


def gamma_log_target(gamma, tau2, lambda2, a_lambda, b_lambda):
    """Log conditional density of the normal-gamma shape, up to a constant.

    Combines the ``G(gamma, lambda^2/2)`` densities of the latent scales,
    the ``G(a_lambda, b_lambda/gamma)`` density of ``lambda^2`` and the
    ``Exp(1)`` prior.
    """
    tau2 = np.asarray(tau2, float)
    k = len(tau2)
    return (k * gamma * math.log(lambda2 / 2.0) - k * math.lgamma(gamma)
            + gamma * float(np.log(tau2).sum())
            - a_lambda * math.log(gamma) - gamma - b_lambda * lambda2 / gamma)


def gamma_log_accept(gamma, gamma_new, tau2, lambda2, a_lambda, b_lambda):
    """Log MH ratio for the multiplicative random walk on ``gamma``.

    Includes the ``gamma_new/gamma`` Hastings term of the log-normal proposal.
    """
    return (gamma_log_target(gamma_new, tau2, lambda2, a_lambda, b_lambda)
            - gamma_log_target(gamma, tau2, lambda2, a_lambda, b_lambda)
            + math.log(gamma_new) - math.log(gamma))


def draw_gamma_mh(rng, gamma, tau2, lambda2, a_lambda, b_lambda, sigma_gamma):
    """One random-walk Metropolis step ``gamma' = gamma exp(sigma_gamma z)``.

    Returns ``(gamma, accepted)``.
    """
    gnew = gamma * math.exp(sigma_gamma * rng.standard_normal())
    la = gamma_log_accept(gamma, gnew, tau2, lambda2, a_lambda, b_lambda)
    if la >= 0.0 or math.log(rng.random()) < la:
        return gnew, True
    return gamma, False


def draw_omega2(rng, resid, sigma2, nu):
    """Student-t latent variances ``IG((nu+1)/2, (nu + r_i^2/s2)/2)``."""
    resid = np.asarray(resid, float)
    return rinvgamma(rng, 0.5 * (nu + 1.0), 0.5 * (nu + resid * resid / sigma2),
                     size=resid.shape)


def nu_eta(omega2, theta):
    """``eta = sum(log w + 1/w)/2 + theta`` over all latent variances given."""
    w = np.concatenate([np.ravel(a) for a in omega2]) if isinstance(omega2, (list, tuple)) \
        else np.ravel(omega2)
    return 0.5 * float(np.sum(np.log(w) + 1.0 / w)) + theta, len(w)


def nu_log_density(nu, n, eta):
    """Unnormalized log conditional density of the degrees of freedom."""
    nu = np.asarray(nu, float)
    return 0.5 * n * nu * np.log(nu / 2.0) - n * special.gammaln(nu / 2.0) - eta * nu


def _nu_root_fn(nu, n, eta):
    h = nu / 2.0
    f = 0.5 * n * (math.log(h) + 1.0 - special.digamma(h)) + 1.0 / nu - eta
    df = 0.5 * n * (1.0 / nu - 0.5 * special.polygamma(1, h)) - 1.0 / (nu * nu)
    return f, df


def nu_star(n, eta, lo=1e-2, hi=1e3, tol=1e-12, maxit=200):
    """Envelope parameter: root of ``(n/2)[log(v/2)+1-digamma(v/2)] + 1/v - eta``.

    The left side decreases strictly from ``+inf`` to ``n/2 - eta``, so a
    root exists whenever ``eta > n/2`` (always true for real latent
    variances and ``theta > 0``). Newton steps are safeguarded by bisection;
    the bracket is expanded if needed.
    """
    if not eta > 0.5 * n:
        raise NumericError(f"no root: eta={eta} <= n/2={0.5 * n}")
    flo, _ = _nu_root_fn(lo, n, eta)
    while flo < 0.0:
        lo /= 10.0
        if lo < 1e-300:
            raise NumericError("nu* bracket expansion failed (low side)")
        flo, _ = _nu_root_fn(lo, n, eta)
    fhi, _ = _nu_root_fn(hi, n, eta)
    while fhi > 0.0:
        hi *= 10.0
        if hi > 1e300:
            raise NumericError("nu* bracket expansion failed (high side)")
        fhi, _ = _nu_root_fn(hi, n, eta)
    x = math.sqrt(lo * hi)
    for _ in range(maxit):
        f, df = _nu_root_fn(x, n, eta)
        if f > 0.0:
            lo = x
        else:
            hi = x
        step = f / df if df != 0.0 else 0.0
        xn = x - step
        if not (lo < xn < hi) or df >= 0.0:
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= tol * max(1.0, abs(x)):
            x = xn
            break
        x = xn
    return x


def nu_log_accept(nu, nustar, n, eta):
    """Log acceptance probability for the exponential-envelope rejection step."""
    return (n * (special.gammaln(nustar / 2.0) - special.gammaln(nu / 2.0))
            + 0.5 * n * (nu * math.log(nu / 2.0) - nustar * math.log(nustar / 2.0))
            + (nu - nustar) * (1.0 / nustar - eta))


def draw_nu(rng, omega2, theta, max_tries=10_000):
    """Degrees-of-freedom draw by rejection from an exponential envelope.

    ``omega2`` is an array of latent variances, or a list of arrays to pool
    several regressions sharing one ``nu``. The envelope has mean ``nu*``,
    where the envelope/target ratio is maximized.
    """
    eta, n = nu_eta(omega2, theta)
    ns = nu_star(n, eta)
    for _ in range(max_tries):
        nu = rng.exponential(ns)
        if nu <= 0.0:
            continue
        if math.log(rng.random()) <= nu_log_accept(nu, ns, n, eta):
            return nu
    raise NumericError(f"nu rejection sampler exceeded {max_tries} attempts")


def draw_pi(rng, k, pstar, g, h):
    """``pi | k ~ Beta(g + k, h + p* - k)``."""
    return float(rng.beta(g + k, h + pstar - k))


def log_model_prior(k, p, pstar, pi):
    """Log prior of one particular model with ``k`` of ``p`` predictors.

    The model size is ``Bin(p*, pi)`` and, given the size, every subset is
    equally likely.
    """
    if k > pstar:
        return -math.inf
    return (math.lgamma(pstar + 1) - math.lgamma(k + 1) - math.lgamma(pstar - k + 1)
            + k * math.log(pi) + (pstar - k) * math.log1p(-pi)
            - (math.lgamma(p + 1) - math.lgamma(k + 1) - math.lgamma(p - k + 1)))


def size_prior_ratio(k, pstar, pi):
    """``Bin(k+1; p*, pi) / Bin(k; p*, pi)``."""
    return (pstar - k) / (k + 1) * pi / (1.0 - pi)


def birth_prob(k, pstar):
    if k <= 0:
        return 1.0
    if k >= pstar:
        return 0.0
    return 0.5


def log_q_birth(k, p, pstar):
    """Log probability of proposing one specific birth from a size-``k`` model."""
    return math.log(birth_prob(k, pstar)) - math.log(p - k)


def log_q_death(k, pstar):
    """Log probability of proposing one specific death from a size-``k`` model."""
    return math.log(1.0 - birth_prob(k, pstar)) - math.log(k)


def empirical_bayes_bsigma(yty, a_sigma=1.5, alpha=0.05):
    """Rate ``b`` putting the ``1-alpha`` quantile of ``IG(a, b)`` at ``yty``."""
    if not yty > 0.0:
        raise NumericError("empirical Bayes b_sigma needs a positive sum of squares")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    # CDF of IG(a, b) at x is Q(a, b/x)
    return float(yty * special.gammainccinv(a_sigma, 1.0 - alpha))


def ridge_gcv(X, y, n_grid=60):
    """Closed-form ridge regression with the penalty chosen by GCV.

    ``X`` and ``y`` are assumed centred. Returns ``(beta, lam, rss)``.
    """
    n, p = X.shape
    if p == 0:
        return np.zeros(0), 0.0, float(y @ y)
    U, d, Vt = np.linalg.svd(X, full_matrices=False)
    uy = U.T @ y
    yy = float(y @ y)
    resid_perp = max(yy - float(uy @ uy), 0.0)
    d2 = d * d
    top = max(float(d2.max()), 1e-12)

    def df(loglam):
        return float((d2 / (d2 + math.exp(loglam))).sum())

    def gcv(loglam):
        lam = math.exp(loglam)
        f = d2 / (d2 + lam)
        rss = float(((1.0 - f) * uy) @ ((1.0 - f) * uy)) + resid_perp
        # +1 for the intercept absorbed by centring
        denom = (1.0 - (f.sum() + 1.0) / n) ** 2
        return rss / n / denom if denom > 1e-12 else math.inf

    lo_grid = math.log(top) - 25.0
    # keep at least one residual degree of freedom: near-interpolating fits
    # have vanishing RSS and a degenerate variance estimate
    cap = n - 2.0
    if cap <= 0:
        raise NumericError(f"ridge needs at least 3 rows, got {n}")
    if df(lo_grid) > cap:
        from scipy.optimize import brentq
        lo_grid = brentq(lambda g: df(g) - cap, lo_grid, math.log(top) + 40.0, xtol=1e-10)
    grid = np.linspace(lo_grid, max(math.log(top) + 10.0, lo_grid + 1.0), n_grid)
    vals = np.array([gcv(g) for g in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(gcv, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-6})
    loglam = res.x if res.fun <= vals[i] else grid[i]
    lam = math.exp(loglam)
    beta = Vt.T @ (d / (d2 + lam) * uy)
    r = y - X @ beta
    return beta, lam, float(r @ r)


# ----------------------------------------------------------------------------
# the regression chain
# ----------------------------------------------------------------------------

@dataclass
class RegressionTrace:
    """Saved draws of one regression, in raw (unstandardized) coordinates."""

    beta0: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    nu: np.ndarray
    k: np.ndarray
    lambda2: np.ndarray
    gamma: np.ndarray
    pi: np.ndarray
    logpost: np.ndarray
    diagnostics: dict = field(default_factory=dict)


class BayesianRegression:
    """Gibbs / reversible-jump sampler for one shrinkage regression.

    Parameters
    ----------
    Xraw : (n, p) array
        Predictors (no intercept column; one is always included).
    y : (n,) array
        Response.
    hyper : RegressionHyperParams
    scales : array, optional
        Fixed column scales (used when the design is updated in place by
        data augmentation).
    """

    def __init__(self, Xraw, y, hyper: RegressionHyperParams | None = None, scales=None):
        self.hyper = replace(hyper) if hyper is not None else RegressionHyperParams()
        self.design = standardize(Xraw, y, scales)
        self.n, self.p = self.design.n, self.design.p
        hp = self.hyper
        if hp.model_averaging:
            self.pstar = min(self.p, self.n - 1)
        else:
            self.pstar = self.p
        self._refresh()
        self._M = self._eb_M()
        if hp.b_lambda is None:
            hp.b_lambda = 0.5 * self._M
        if hp.a_tau is None or hp.b_tau is None:
            hp.a_tau, hp.b_tau = 1.0, self._M
        if (hp.prior != "flat" and not hp.model_averaging and self.p >= self.n
                and hp.a_sigma == 0.0 and hp.b_sigma == 0.0):
            # a proper sigma^2 prior is needed when p >= n
            b = empirical_bayes_bsigma(self._yty_c, 1.5, hp.eb_alpha)
            hp.a_sigma, hp.b_sigma = 3.0, 2.0 * b
        if hp.prior == "flat" and self.p >= self.n - 1 + hp.a_sigma:
            raise DataError(f"flat prior with p={self.p}, n={self.n} gives an improper posterior")
        self.gamma_accepts = 0
        self.gamma_tries = 0

    # -- data ---------------------------------------------------------------
    def set_design(self, Xraw, y=None):
        """Replace the predictors (and optionally the response), keeping the scaling."""
        y = self.design.y if y is None else y
        self.design = standardize(Xraw, y, self.design.scales)
        self._refresh()

    def _refresh(self):
        d = self.design
        self._yty_c = float(d.y_tilde @ d.y_tilde)
        if not self.hyper.student_t:
            self._xtx = d.X.T @ d.X
            self._xty = d.X.T @ d.y_tilde
        else:
            self._Xi = np.column_stack([np.ones(self.n), d.X])

    def _eb_M(self):
        self._beta_init = np.zeros(self.p)
        if self.p == 0 or self.hyper.prior == "flat" or self.n < 3:
            return 1.0
        beta, _, rss = ridge_gcv(self.design.X, self.design.y_tilde)
        self._beta_init = beta
        s2 = max(rss / max(self.n - 1, 1), 1e-12 * max(self._yty_c, 1e-300))
        return float(np.clip(np.mean(beta ** 2) / s2, 1e-2, 1e4))

    # -- sufficient statistics ------------------------------------------------
    def _suff(self, state):
        """(xtx, xty, yty, n_eff) over all candidate coefficients.

        For Student-t errors the intercept is coefficient 0 and everything
        is weighted by ``1/omega^2``.
        """
        if not self.hyper.student_t:
            return self._xtx, self._xty, self._yty_c, self.n - 1
        w = 1.0 / state.omega2
        Xw = self._Xi * w[:, None]
        y = self.design.y
        return Xw.T @ self._Xi, Xw.T @ y, float((w * y) @ y), self.n

    def _index(self, active):
        if self.hyper.student_t:
            return np.concatenate(([0], np.asarray(active, int) + 1))
        return np.asarray(active, int)

    def _prec(self, state, active=None, tau2=None):
        active = state.active if active is None else active
        tau2 = state.tau2 if tau2 is None else tau2
        k = len(active)
        kind = self.hyper.prior
        if kind == "flat":
            prec = np.zeros(k)
        elif kind == "ridge":
            prec = np.full(k, 1.0 / tau2[0])
        else:
            prec = 1.0 / np.asarray(tau2, float)
        if self.hyper.student_t:
            prec = np.concatenate(([0.0], prec))
        return prec

    def _factor(self, suff, state, active=None, tau2=None):
        xtx, xty = suff[0], suff[1]
        idx = self._index(state.active if active is None else active)
        return posterior_factor(xtx[np.ix_(idx, idx)], xty[idx], self._prec(state, active, tau2))

    # -- initialization ------------------------------------------------------
    def initial_state(self, rng=None) -> RegressionState:
        hp = self.hyper
        k0 = 0 if hp.model_averaging else self.p
        active = np.arange(k0)
        s2 = max(self._yty_c / max(self.n - 1, 1), 1e-8)
        if hp.prior in ("lasso", "ng"):
            tau2 = np.full(k0, self._M)
        elif hp.prior == "ridge":
            tau2 = np.array([self._M])
        else:
            tau2 = np.zeros(0)
        beta = self._beta_init[:k0].copy() if k0 else np.zeros(0)
        if hp.prior != "flat":
            # keep the lasso inverse-Gaussian mean finite at the start
            beta[beta == 0.0] = 1e-8
        st = RegressionState(beta0=self.design.y_bar, beta=beta, active=active,
                             sigma2=s2, tau2=tau2, lambda2=2.0 / self._M, gamma=1.0,
                             omega2=np.ones(self.n) if hp.student_t else None,
                             nu=1.0 / hp.theta,
                             pi=0.5 if hp.pi is None else hp.pi)
        return st

    # -- pieces of the sweep ---------------------------------------------------
    def residuals(self, state):
        d = self.design
        r = d.y - state.beta0
        if state.k:
            r = r - d.X[:, state.active] @ state.beta
        return r

    def rj_log_accept_birth(self, suff, state, col, tau2_new, factor_k=None):
        """Log acceptance ratio for adding predictor ``col`` with scale ``tau2_new``.

        The coefficients are integrated out; the new latent scale is
        proposed from its prior so its density cancels.
        """
        k = state.k
        hp = self.hyper
        act_new = np.append(state.active, col)
        if hp.prior == "ridge":
            tau_new = state.tau2
            t_new = float(state.tau2[0])
        else:
            tau_new = np.append(state.tau2, tau2_new)
            t_new = float(tau2_new)
        _, _, qk, ldk = factor_k if factor_k is not None else self._factor(suff, state)
        _, _, qk1, ldk1 = self._factor(suff, state, act_new, tau_new)
        pi = state.pi
        return (-0.5 * math.log(t_new) - 0.5 * ldk1 + 0.5 * ldk
                + (qk1 - qk) / (2.0 * state.sigma2)
                + log_model_prior(k + 1, self.p, self.pstar, pi)
                - log_model_prior(k, self.p, self.pstar, pi)
                + log_q_death(k + 1, self.pstar) - log_q_birth(k, self.p, self.pstar))

    def _prior_tau2(self, rng, state):
        kind = self.hyper.prior
        if kind == "lasso":
            return max(rng.exponential(2.0 / state.lambda2), TAU2_FLOOR)
        if kind == "ng":
            return max(rng.gamma(state.gamma, 2.0 / state.lambda2), TAU2_FLOOR)
        return float(state.tau2[0])

    def _birth_log_ratio(self, k, pi):
        return (log_model_prior(k + 1, self.p, self.pstar, pi)
                - log_model_prior(k, self.p, self.pstar, pi)
                + log_q_death(k + 1, self.pstar) - log_q_birth(k, self.p, self.pstar))

    def rj_step(self, rng, state, suff=None, cache=None):
        """One birth or death proposal. Returns ``(state, accepted)``.

        ``cache`` is a :class:`_ModelCache` for ``state`` (built if omitted)
        and is kept in sync on acceptance. ``state.beta`` is not redrawn
        here; the sweep draws it afterwards.
        """
        if self.pstar == 0:
            return state, False
        suff = self._suff(state) if suff is None else suff
        cache = _ModelCache(self, suff, state) if cache is None else cache
        k = state.k
        s2 = state.sigma2
        ridge = self.hyper.prior == "ridge"
        if rng.random() < birth_prob(k, self.pstar):
            absent = np.flatnonzero(~_present(state.active, self.p))
            col = int(absent[rng.integers(len(absent))])
            t_new = self._prior_tau2(rng, state)
            u, sc, e = cache.birth_terms(col + cache.off, 1.0 / t_new)
            la = (-0.5 * math.log(t_new) - 0.5 * math.log(sc) + 0.5 * sc * e * e / s2
                  + self._birth_log_ratio(k, state.pi))
            if la >= 0.0 or math.log(rng.random()) < la:
                cache.add(col + cache.off, u, sc, e)
                state.active = np.append(state.active, col)
                if not ridge:
                    state.tau2 = np.append(state.tau2, t_new)
                state.beta = np.append(state.beta, 0.0)
                return state, True
            return state, False
        pos = int(rng.integers(k))
        t_rm = float(state.tau2[0] if ridge else state.tau2[pos])
        b, bt = cache.death_terms(pos + cache.off)
        # reverse of the birth that would re-add this predictor
        la = -(-0.5 * math.log(t_rm) + 0.5 * math.log(b) + 0.5 * bt * bt / (b * s2)
               + self._birth_log_ratio(k - 1, state.pi))
        if la >= 0.0 or math.log(rng.random()) < la:
            cache.remove(pos + cache.off)
            keep = np.arange(k) != pos
            state.active = state.active[keep]
            state.beta = state.beta[keep]
            if not ridge:
                state.tau2 = state.tau2[keep]
            return state, True
        return state, False

    def sweep(self, rng, state: RegressionState, update_nu=True, tune=False):
        """One full Gibbs scan; returns the updated state.

        Order: latent variances and ``nu`` (Student-t), latent scales,
        ``lambda^2``, ``gamma``, reversible-jump moves, ``pi``, then
        ``sigma^2`` and ``beta``. With the marginal ``sigma^2`` conditional,
        ``sigma^2`` is drawn before ``beta`` so both come from their joint
        conditional; otherwise ``beta`` is drawn first.
        """
        hp = self.hyper
        fixed = hp.fixed
        if hp.student_t:
            r = self.residuals(state)
            state.omega2 = draw_omega2(rng, r, state.sigma2, state.nu)
            if update_nu and "nu" not in fixed:
                state.nu = draw_nu(rng, state.omega2, hp.theta)
        kind = hp.prior
        if state.k and "tau2" not in fixed:
            if kind == "lasso":
                state.tau2 = draw_tau2_lasso(rng, state.beta, state.sigma2, state.lambda2)
            elif kind == "ng":
                state.tau2 = draw_tau2_ng(rng, state.beta, state.sigma2, state.lambda2,
                                          state.gamma)
        if kind == "ridge" and "tau2" not in fixed:
            if state.k:
                state.tau2 = np.array([draw_tau2_ridge(rng, state.beta, state.sigma2,
                                                       hp.a_tau, hp.b_tau)])
            elif hp.a_tau > 0 and hp.b_tau > 0:
                state.tau2 = np.array([float(rinvgamma(rng, hp.a_tau / 2, hp.b_tau / 2))])
        if kind in ("lasso", "ng") and "lambda2" not in fixed:
            state.lambda2 = draw_lambda2(rng, state.tau2, state.gamma, hp.a_lambda, hp.b_lambda)
        if kind == "ng" and "gamma" not in fixed:
            state.gamma, acc = draw_gamma_mh(rng, state.gamma, state.tau2, state.lambda2,
                                             hp.a_lambda, hp.b_lambda, hp.sigma_gamma)
            self.gamma_tries += 1
            self.gamma_accepts += acc
            if tune:
                step = (self.gamma_tries + 1) ** -0.6
                hp.sigma_gamma = float(np.clip(
                    hp.sigma_gamma * math.exp(step * ((1.0 if acc else 0.0) - 0.25)),
                    1e-3, 10.0))
        suff = self._suff(state)
        if hp.model_averaging and self.pstar > 0:
            cache = _ModelCache(self, suff, state)
            for _ in range(self.p):
                state, _ = self.rj_step(rng, state, suff, cache)
            if hp.pi is None and "pi" not in fixed:
                state.pi = draw_pi(rng, state.k, self.pstar, hp.g, hp.h)
        factor = self._factor(suff, state)
        xtx, xty, yty, n_eff = suff
        idx = self._index(state.active)
        n_flat = int(hp.student_t) + (state.k if kind == "flat" else 0)
        n_fin = 0 if kind == "flat" else state.k
        prec = self._prec(state)
        if hp.marginal_sigma2:
            if "sigma2" not in fixed:
                psi = yty - factor[2]
                shape, rate = sigma2_shape_rate(hp.a_sigma, hp.b_sigma, n_eff, n_fin,
                                                n_flat, psi, True)
                state.sigma2 = draw_sigma2(rng, shape, rate)
            b, _ = draw_beta(rng, state.sigma2, None, None, None, factor)
        else:
            b, _ = draw_beta(rng, state.sigma2, None, None, None, factor)
            if "sigma2" not in fixed:
                sub = xtx[np.ix_(idx, idx)]
                psi = yty - 2.0 * float(b @ xty[idx]) + float(b @ sub @ b) + float(b @ (prec * b))
                shape, rate = sigma2_shape_rate(hp.a_sigma, hp.b_sigma, n_eff, n_fin,
                                                n_flat, psi, False)
                state.sigma2 = draw_sigma2(rng, shape, rate)
        if hp.student_t:
            state.beta0 = float(b[0])
            state.beta = b[1:]
        else:
            state.beta = b
            state.beta0 = draw_intercept(rng, self.design.y_bar, state.sigma2, self.n)
        return state

    # -- summaries -------------------------------------------------------------
    def full_beta(self, state):
        """Raw-coordinate ``(beta0, beta)`` with zeros for excluded predictors."""
        bfull = np.zeros(self.p)
        bfull[state.active] = state.beta
        return unstandardize_draw(state.beta0, bfull, self.design)

    def log_posterior(self, state):
        """Unnormalized log posterior of ``(beta0, beta, sigma^2)`` given the scales."""
        hp = self.hyper
        r = self.residuals(state)
        s2 = state.sigma2
        if hp.student_t:
            nu = state.nu
            ll = float(np.sum(special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
                              - 0.5 * np.log(nu * math.pi * s2)
                              - 0.5 * (nu + 1) * np.log1p(r * r / (nu * s2))))
        else:
            ll = -0.5 * self.n * (_LOG2PI + math.log(s2)) - 0.5 * float(r @ r) / s2
        lp = 0.0
        if hp.prior != "flat" and state.k:
            prec = self._prec(state)
            if hp.student_t:
                prec = prec[1:]
            lp = float(-0.5 * np.sum(_LOG2PI + np.log(s2 / prec)) - 0.5 * np.sum(
                state.beta ** 2 * prec) / s2)
        a, b = hp.a_sigma / 2.0, hp.b_sigma / 2.0
        lp += -(a + 1.0) * math.log(s2) - (b / s2 if b > 0 else 0.0)
        return ll + lp

    def run(self, rng, T, burnin=0, thin=1, state=None, record_hook=None) -> RegressionTrace:
        """Run the chain, keeping ``T`` draws after ``burnin`` sweeps, every ``thin``."""
        state = self.initial_state(rng) if state is None else state
        for _ in range(burnin):
            state = self.sweep(rng, state, tune=self.hyper.prior == "ng")
        self.gamma_accepts = self.gamma_tries = 0
        tr = _TraceBuilder(T, self.p)
        for t in range(T):
            for _ in range(thin):
                state = self.sweep(rng, state)
            tr.record(t, self, state)
            if record_hook is not None:
                record_hook(t, state)
        out = tr.finish()
        out.diagnostics = self.diagnostics()
        self.last_state = state
        return out

    def diagnostics(self):
        d = {"pstar": self.pstar, "sigma_gamma": self.hyper.sigma_gamma}
        if self.gamma_tries:
            d["gamma_accept_rate"] = self.gamma_accepts / self.gamma_tries
        return d


def _present(active, p):
    mask = np.zeros(p, bool)
    mask[active] = True
    return mask


class _ModelCache:
    """Inverse posterior precision and mean of the current model.

    Births and deaths update ``B = A^{-1}``, ``beta_tilde``, ``log|A|`` and
    ``q = beta_tilde' A beta_tilde`` in ``O(k^2)`` through the Schur
    complement of the added or removed coordinate. Positions are in the
    extended coordinates of the sufficient statistics (the Student-t
    intercept is position 0 and is never removed).
    """

    def __init__(self, reg, suff, state):
        self.xtx, self.xty = suff[0], suff[1]
        self.off = 1 if reg.hyper.student_t else 0
        self.idx = [int(i) for i in reg._index(state.active)]
        k = len(self.idx)
        if k:
            A = self.xtx[np.ix_(self.idx, self.idx)] + np.diag(reg._prec(state))
            L = _chol(A)
            Li = linalg.solve_triangular(L, np.eye(k), lower=True, check_finite=False)
            self.B = Li.T @ Li
            self.bt = self.B @ self.xty[self.idx]
        else:
            self.B = np.zeros((0, 0))
            self.bt = np.zeros(0)

    def birth_terms(self, col, prec_new):
        a = self.xtx[self.idx, col]
        u = self.B @ a
        s = float(self.xtx[col, col] + prec_new - a @ u)
        if not s > 0.0:
            raise NumericError("birth proposal gives a singular posterior precision")
        e = float(self.xty[col] - a @ self.bt) / s
        return u, s, e

    def add(self, col, u, s, e):
        k = len(self.idx)
        B = np.empty((k + 1, k + 1))
        B[:k, :k] = self.B + np.outer(u, u) / s
        B[:k, k] = B[k, :k] = -u / s
        B[k, k] = 1.0 / s
        self.B = B
        self.bt = np.append(self.bt - u * e, e)
        self.idx.append(col)

    def death_terms(self, pos):
        return float(self.B[pos, pos]), float(self.bt[pos])

    def remove(self, pos):
        b = self.B[pos, pos]
        Bi = self.B[:, pos]
        bt = self.bt - Bi * (self.bt[pos] / b)
        B = self.B - np.outer(Bi, Bi) / b
        keep = np.arange(len(self.idx)) != pos
        self.B = B[np.ix_(keep, keep)]
        self.bt = bt[keep]
        del self.idx[pos]


class _TraceBuilder:
    def __init__(self, T, p):
        self.beta0 = np.empty(T)
        self.beta = np.empty((T, p))
        self.sigma2 = np.empty(T)
        self.nu = np.full(T, np.inf)
        self.k = np.empty(T, int)
        self.lambda2 = np.empty(T)
        self.gamma = np.empty(T)
        self.pi = np.empty(T)
        self.logpost = np.empty(T)

    def record(self, t, reg, st):
        self.beta0[t], self.beta[t] = reg.full_beta(st)
        self.sigma2[t] = st.sigma2
        if reg.hyper.student_t:
            self.nu[t] = st.nu
        self.k[t] = st.k
        self.lambda2[t] = st.lambda2
        self.gamma[t] = st.gamma
        self.pi[t] = st.pi
        self.logpost[t] = reg.log_posterior(st)

    def finish(self):
        return RegressionTrace(self.beta0, self.beta, self.sigma2, self.nu, self.k,
                               self.lambda2, self.gamma, self.pi, self.logpost)
