"""Incomplete oscillatory power integrals and small quadrature helpers.

The central object is

    E(X; a) = int_0^X (1 - cos y) y^(-a) dy,   0 < a < 3,

which gives closed forms for truncated stable exponents.  Small arguments use
the alternating power series; large arguments use the complete integral minus
a tail evaluated along a rotated contour with Gauss-Laguerre nodes.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import gamma, sici

_SERIES_SWITCH = 4.0
_SERIES_TERMS = 30
_LAGUERRE_NODES = 40


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _laguerre() -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.laguerre.laggauss(_LAGUERRE_NODES)


@lru_cache(maxsize=None)
def _series_coefficients(a: float) -> np.ndarray:
    n = np.arange(1, _SERIES_TERMS + 1)
    log_fact = np.array([np.sum(np.log(np.arange(1, 2 * k + 1))) for k in n])
    sign = np.where(n % 2 == 1, 1.0, -1.0)
    return sign * np.exp(-log_fact) / (2 * n + 1 - a)


def complete_integral(a: float) -> float:
    """int_0^inf (1 - cos y) y^(-a) dy for 1 < a < 3."""
    if not 1.0 < a < 3.0:
        raise ValueError(f"complete integral diverges for a={a}")
    b = 2.0 - a
    return 0.5 * np.pi * np.sinc(0.5 * b) * gamma(1.0 + b) / (a - 1.0)


def cosine_tail(x: np.ndarray, a: float) -> np.ndarray:
    """int_x^inf cos(y) y^(-a) dy for x >= 1 (contour rotated onto x + i s)."""
    s, w = _laguerre()
    x = np.asarray(x, dtype=float)
    vals = ((x[..., None] + 1j * s) ** (-a)) @ w
    return np.real(1j * np.exp(1j * x) * vals)


def _series(x: np.ndarray, a: float) -> np.ndarray:
    coef = _series_coefficients(a)
    x2 = x * x
    acc = np.zeros_like(x)
    for c in coef[::-1]:
        acc = acc * x2 + c
    return acc * x ** (3.0 - a)


def one_minus_cos_integral(x, a: float) -> np.ndarray:
    """E(X; a) = int_0^X (1 - cos y) y^(-a) dy, vectorised over X >= 0."""
    if not 0.0 < a < 3.0:
        raise ValueError(f"exponent a={a} outside (0, 3)")
    x = np.abs(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    small = x <= _SERIES_SWITCH
    if np.any(small):
        out[small] = _series(x[small], a)
    big = ~small
    if np.any(big):
        xb = x[big]
        if a == 1.0:
            _, ci = sici(xb)
            out[big] = np.euler_gamma + np.log(xb) - ci
        elif a > 1.0:
            out[big] = complete_integral(a) - xb ** (1.0 - a) / (a - 1.0) + cosine_tail(xb, a)
        else:
            full_cos = gamma(1.0 - a) * np.sin(0.5 * np.pi * a)
            out[big] = xb ** (1.0 - a) / (1.0 - a) - full_cos + cosine_tail(xb, a)
    return out


def composite_gauss(edges: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule over consecutive intervals of ``edges``."""
    x, w = gauss_legendre(n)
    edges = np.asarray(edges, dtype=float)
    lo, width = edges[:-1, None], np.diff(edges)[:, None]
    return (lo + width * x).ravel(), (width * w).ravel()


_TABLE_LO = _SERIES_SWITCH
_TABLE_HI = 64.0
_TABLE_STEP = 1.0 / 64.0
_ASYMPTOTIC_TERMS = 14


def _asymptotic_cosine_tail(x: np.ndarray, a: float) -> np.ndarray:
    # int_x^inf e^(iy) y^-a dy = i e^(ix) x^-a sum_n (a)_n (-i/x)^n, real part
    z = -1j / x
    acc = np.zeros_like(z)
    poch = np.ones(_ASYMPTOTIC_TERMS)
    for n in range(1, _ASYMPTOTIC_TERMS):
        poch[n] = poch[n - 1] * (a + n - 1)
    for c in poch[::-1]:
        acc = acc * z + c
    return np.real(1j * np.exp(1j * x) * x ** (-a) * acc)


class FastE:
    """Vectorised E(X; a) for repeated bulk evaluation.

    Series below 4, cubic Hermite table on [4, 64] (exact nodes and slopes),
    asymptotic tail expansion above 64.  Also returns the complement
    E(inf; a) - E(X; a) without cancellation when a > 1.
    """

    def __init__(self, a: float):
        if not 0.0 < a < 3.0:
            raise ValueError(f"exponent a={a} outside (0, 3)")
        self.a = float(a)
        n = int(round((_TABLE_HI - _TABLE_LO) / _TABLE_STEP))
        self._nodes = _TABLE_LO + _TABLE_STEP * np.arange(n + 1)
        self._vals = one_minus_cos_integral(self._nodes, a)
        self._slopes = 2.0 * np.sin(0.5 * self._nodes) ** 2 * self._nodes ** (-a)
        self._complete = complete_integral(a) if a > 1.0 else None

    def _table(self, x: np.ndarray) -> np.ndarray:
        s = (x - _TABLE_LO) / _TABLE_STEP
        i = np.clip(s.astype(np.int64), 0, self._nodes.size - 2)
        t = s - i
        h = _TABLE_STEP
        t2, t3 = t * t, t * t * t
        return ((2 * t3 - 3 * t2 + 1) * self._vals[i] + (t3 - 2 * t2 + t) * h * self._slopes[i]
                + (-2 * t3 + 3 * t2) * self._vals[i + 1] + (t3 - t2) * h * self._slopes[i + 1])

    def _far(self, x: np.ndarray) -> np.ndarray:
        a = self.a
        tail = _asymptotic_cosine_tail(x, a)
        if a == 1.0:
            return np.euler_gamma + np.log(x) + tail
        if a > 1.0:
            return self._complete - x ** (1.0 - a) / (a - 1.0) + tail
        return x ** (1.0 - a) / (1.0 - a) - gamma(1.0 - a) * np.sin(0.5 * np.pi * a) + tail

    def __call__(self, x) -> np.ndarray:
        x = np.abs(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        lo = x <= _TABLE_LO
        hi = x > _TABLE_HI
        mid = ~(lo | hi)
        if np.any(lo):
            out[lo] = _series(x[lo], self.a)
        if np.any(mid):
            out[mid] = self._table(x[mid])
        if np.any(hi):
            out[hi] = self._far(x[hi])
        return out

    def complement(self, x) -> np.ndarray:
        """E(inf; a) - E(X; a), for a > 1."""
        if self._complete is None:
            raise ValueError("complement needs a > 1")
        x = np.abs(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        hi = x > _TABLE_HI
        if np.any(~hi):
            out[~hi] = self._complete - self(x[~hi])
        if np.any(hi):
            xh = x[hi]
            out[hi] = xh ** (1.0 - self.a) / (self.a - 1.0) - _asymptotic_cosine_tail(xh, self.a)
        return out


@lru_cache(maxsize=None)
def fast_e(a: float) -> FastE:
    return FastE(a)


def sinh_rule(scale: float, reach: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric trapezoid rule on x = scale sinh(tau), |x| <= reach, n odd."""
    n = int(n) | 1
    T = float(np.arcsinh(reach / scale))
    tau = np.linspace(-T, T, n)
    h = tau[1] - tau[0]
    x = scale * np.sinh(tau)
    w = scale * np.cosh(tau) * h
    w[[0, -1]] *= 0.5
    return x, w
