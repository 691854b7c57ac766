"""Bulk evaluation of one-dimensional Fourier symbols.

The d-dimensional solvers evaluate, at very many frequencies and horizons,

* psi(eta)                       full exponent,
* psi_R(eta)                     exponent truncated at radius R,
* Phi_a(eta) = int_0^a psi_{R_r}(eta) dr,
* D_a(eta)   = psi(eta) - psi_{R_a}(eta)   (big-jump part).

Stable components use tabulated E-functions; other measures defer to the
exact routines of :mod:`levy1d`.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import levy1d
from ._special import complete_integral, fast_e


class ComponentSymbols:
    """Vectorised symbols of one component for a fixed truncation exponent."""

    def __init__(self, component: levy1d.LevyComponent, eps: float):
        self.component = component
        self.eps = float(eps)
        m = component.measure
        self._stable = isinstance(m, levy1d.Stable)
        self._atomic = isinstance(m, levy1d.DiscretizedStable)
        if self._stable:
            self._a1 = 1.0 + m.alpha
            self._a2 = 1.0 - m.alpha * self.eps / (1.0 - self.eps)
            self._e1 = fast_e(self._a1)
            self._e2 = fast_e(self._a2) if self._a2 > 0.0 else None
            self._psi_amp = 2.0 * m.c * complete_integral(self._a1)

    @lru_cache(maxsize=4096)
    def radius(self, a: float) -> float:
        return float(levy1d.truncation_radius(self.component, self.eps, a))

    def psi(self, eta) -> np.ndarray:
        eta = np.abs(np.asarray(eta, dtype=float))
        if self._stable:
            return self._psi_amp * eta ** self.component.measure.alpha
        return self.component.measure.psi(eta)

    def psi_trunc(self, eta, R: float) -> np.ndarray:
        eta = np.abs(np.asarray(eta, dtype=float))
        m = self.component.measure
        if self._stable:
            return 2.0 * m.c * eta ** m.alpha * self._e1(R * eta)
        return m.psi_trunc(eta, R)

    def big_jump(self, a: float, eta) -> np.ndarray:
        """D_a(eta) = int_{|v| > R_a} (1 - cos(eta v)) nu(dv)."""
        eta = np.abs(np.asarray(eta, dtype=float))
        R = self.radius(a)
        m = self.component.measure
        if self._stable:
            return 2.0 * m.c * eta ** m.alpha * self._e1.complement(R * eta)
        if self._atomic:
            out = np.zeros_like(eta)
            for k in range(1, int(m.count_above(R)) + 1):
                out += m.mass(k) * levy1d._half_versine(eta * m.rho(k))
            return out
        return m.psi(eta) - m.psi_trunc(eta, R)

    def exponent(self, a: float, eta) -> np.ndarray:
        """Phi_a(eta) = int_0^a psi_{R_r}(eta) dr."""
        eta = np.abs(np.asarray(eta, dtype=float))
        m = self.component.measure
        if self._stable and self._e2 is not None:
            k = m.pruitt_constant
            p = m.alpha / (1.0 - self.eps)
            X = self.radius(a) * eta
            out = np.zeros_like(eta)
            pos = eta > 0
            ep = eta[pos]
            kappa = ep ** (-p) * k ** (-1.0 / (1.0 - self.eps))
            bracket = a * self._e1(X[pos]) - kappa * self._e2(X[pos])
            out[pos] = 2.0 * m.c * ep ** m.alpha * bracket
            return np.maximum(out, 0.0)
        return np.asarray(levy1d.integrated_exponent(self.component, self.eps, a, eta), dtype=float)


@lru_cache(maxsize=64)
def symbols_for(component: levy1d.LevyComponent, eps: float) -> ComponentSymbols:
    return ComponentSymbols(component, eps)
