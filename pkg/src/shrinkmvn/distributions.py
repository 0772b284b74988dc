"""Random variate generators not covered directly by numpy.

Parameterizations
-----------------
* ``IG(shape, rate)``: density proportional to ``x**(-shape-1) exp(-rate/x)``.
* ``GIG(lam, chi, psi)``: density proportional to
  ``x**(lam-1) exp(-(chi/x + psi*x)/2)``.
"""

from __future__ import annotations

import math

import numpy as np


def rinvgamma(rng: np.random.Generator, shape, rate, size=None):
    """Inverse-gamma draws as ``rate / Gamma(shape, 1)``."""
    return np.asarray(rate) / rng.gamma(shape, 1.0, size=size)


def rinvgauss(rng: np.random.Generator, mean, shape, size=None):
    """Inverse-Gaussian (Wald) draws with the given mean and shape."""
    return rng.wald(mean, shape, size=size)


def _gig_logq(x, lam, omega):
    return (lam - 1.0) * math.log(x) - 0.5 * omega * (x + 1.0 / x)


def _gig_mode(lam, omega):
    if lam < 1.0:
        return omega / (math.sqrt((1.0 - lam) ** 2 + omega * omega) + 1.0 - lam)
    return (math.sqrt((lam - 1.0) ** 2 + omega * omega) - (1.0 - lam)) / omega


def _rgig_std(rng, lam, omega):
    """One draw with density prop. to ``x**(lam-1) exp(-omega (x + 1/x) / 2)``.

    Exact rejection methods of Hoermann & Leydold (2014, Stat. Comput.):
    ratio-of-uniforms with or without mode shift, or a three-piece
    dominating density for small ``omega`` and ``lam < 1``. Requires
    ``lam >= 0`` and ``omega > 0``.
    """
    rand = rng.random
    m = _gig_mode(lam, omega)
    if lam >= 1.0 or omega > 1.0:
        # ratio of uniforms with mode shift; bounding box via Cardano
        a2 = -2.0 * (lam + 1.0) / omega - m
        a1 = 2.0 * m * (lam - 1.0) / omega - 1.0
        p1 = a1 - a2 * a2 / 3.0
        q1 = 2.0 * a2 ** 3 / 27.0 - a2 * a1 / 3.0 + m
        phi = math.acos(max(-1.0, min(1.0, -q1 * math.sqrt(-27.0 / p1 ** 3) / 2.0)))
        s1 = -math.sqrt(-4.0 * p1 / 3.0)
        r1 = s1 * math.cos(phi / 3.0 + math.pi / 3.0) - a2 / 3.0
        r2 = -s1 * math.cos(phi / 3.0) - a2 / 3.0
        lm = _gig_logq(m, lam, omega)
        vmin = (r1 - m) * math.exp(0.5 * (_gig_logq(r1, lam, omega) - lm))
        vmax = (r2 - m) * math.exp(0.5 * (_gig_logq(r2, lam, omega) - lm))
        while True:
            u = rand()
            x = (vmin + (vmax - vmin) * rand()) / u + m
            if x > 0.0 and 2.0 * math.log(u) <= _gig_logq(x, lam, omega) - lm:
                return x
    if omega >= min(0.5, 2.0 * math.sqrt(1.0 - lam) / 3.0):
        # ratio of uniforms without mode shift
        lm = _gig_logq(m, lam, omega)
        xp = ((1.0 + lam) + math.sqrt((1.0 + lam) ** 2 + omega * omega)) / omega
        vmax = xp * math.exp(0.5 * (_gig_logq(xp, lam, omega) - lm))
        while True:
            u = rand()
            x = vmax * rand() / u
            if x > 0.0 and 2.0 * math.log(u) <= _gig_logq(x, lam, omega) - lm:
                return x
    # three-piece hat for 0 <= lam < 1, small omega
    x0 = omega / (1.0 - lam)
    xs = max(x0, 2.0 / omega)
    k1 = math.exp(_gig_logq(m, lam, omega))
    a1 = k1 * x0
    if x0 < 2.0 / omega:
        k2 = math.exp(-omega)
        if lam > 0.0:
            a2 = k2 * ((2.0 / omega) ** lam - x0 ** lam) / lam
        else:
            a2 = k2 * math.log(2.0 / omega ** 2)
    else:
        k2 = a2 = 0.0
    k3 = xs ** (lam - 1.0)
    a3 = 2.0 * k3 * math.exp(-xs * omega / 2.0) / omega
    total = a1 + a2 + a3
    while True:
        u = rand()
        v = total * rand()
        if v <= a1:
            x = x0 * v / a1
            h = k1
        elif v <= a1 + a2:
            v -= a1
            if lam > 0.0:
                x = (x0 ** lam + v * lam / k2) ** (1.0 / lam)
            else:
                x = omega * math.exp(v * math.exp(omega))
            h = k2 * x ** (lam - 1.0)
        else:
            v -= a1 + a2
            x = -2.0 / omega * math.log(math.exp(-xs * omega / 2.0) - v * omega / (2.0 * k3))
            h = k3 * math.exp(-x * omega / 2.0)
        if x > 0.0 and math.log(u * h) <= _gig_logq(x, lam, omega):
            return x


def rgig1(rng: np.random.Generator, lam: float, chi: float, psi: float) -> float:
    """A single GIG(lam, chi, psi) draw.

    Degenerate boundaries: ``chi == 0`` gives ``Gamma(lam, rate=psi/2)``
    (needs ``lam > 0``); ``psi == 0`` gives ``IG(-lam, chi/2)`` (needs
    ``lam < 0``).
    """
    if chi < 0.0 or psi < 0.0:
        raise ValueError("GIG requires chi >= 0 and psi >= 0")
    if chi == 0.0 or psi == 0.0:
        if chi == 0.0 and lam > 0.0 and psi > 0.0:
            return rng.gamma(lam, 2.0 / psi)
        if psi == 0.0 and lam < 0.0 and chi > 0.0:
            return 0.5 * chi / rng.gamma(-lam)
        raise ValueError(f"improper GIG(lam={lam}, chi={chi}, psi={psi})")
    omega = math.sqrt(chi * psi)
    scale = math.sqrt(chi / psi)
    if omega < 1e-300:
        # numerically at the boundary; fall back on the limiting form
        return rgig1(rng, lam, 0.0, psi) if lam > 0 else rgig1(rng, lam, chi, 0.0)
    if lam < 0.0:
        return scale / _rgig_std(rng, -lam, omega)
    return scale * _rgig_std(rng, lam, omega)


def rgig(rng: np.random.Generator, lam, chi, psi) -> np.ndarray:
    """Elementwise GIG draws over broadcast parameter arrays."""
    lam, chi, psi = np.broadcast_arrays(np.asarray(lam, float), np.asarray(chi, float),
                                        np.asarray(psi, float))
    out = np.empty(lam.shape)
    for idx in np.ndindex(lam.shape):
        out[idx] = rgig1(rng, float(lam[idx]), float(chi[idx]), float(psi[idx]))
    return out


def gig_logpdf_unnorm(x, lam, chi, psi):
    """Unnormalized GIG log density."""
    x = np.asarray(x, float)
    return (lam - 1.0) * np.log(x) - 0.5 * (chi / x + psi * x)
