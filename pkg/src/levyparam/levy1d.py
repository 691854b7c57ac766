"""One-dimensional symmetric Levy components.

A component bundles a symmetric infinite Levy measure with its declared weak
scaling indices.  The measure variants expose the same small interface
(tails, truncated second moments, exponents, small-jump quadrature nodes), and
module-level functions build Pruitt functions, truncation radii, truncated and
full densities, and the generator of the truncated process on top of it.

Conventions
-----------
* ``tail(r)`` is the two-sided mass nu(|x| > r).
* ``inner_moment(r)`` is int_{|x| <= r} x^2 nu(dx).
* ``psi_trunc(xi, R)`` is int_{|x| <= R} (1 - cos(xi x)) nu(dx).
* Small-jump nodes integrate against the one-sided measure on (0, inf).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Union

import numpy as np
from scipy import integrate, optimize

from ._special import (
    complete_integral,
    composite_gauss,
    gauss_legendre,
    one_minus_cos_integral,
)
from .exceptions import AdmissibilityError, ConvergenceError, CutoffError, QuadratureError

ArrayLike = Union[float, np.ndarray]

INVERSION_TOL = 1e-12
_PANEL_NODES = 32
_CHUNK = 4_000_000
_SMALL_ARG = 1e-5
_GEN_PANELS = 12
_GEN_NODES = 16
_GEN_INNER = 1e-4
_CUSP_PANELS = 24


def _half_versine(x: np.ndarray) -> np.ndarray:
    # 1 - cos(x) without cancellation at small x
    s = np.sin(0.5 * x)
    return 2.0 * s * s


def _quad(f, a, b, what: str, **kw) -> float:
    out = integrate.quad(f, a, b, full_output=1, limit=kw.pop("limit", 400), **kw)
    value, err = out[0], out[1]
    warned = len(out) > 3
    if not np.isfinite(value) or (warned and err > 1e-8 * max(abs(value), 1e-300)):
        raise QuadratureError(f"quadrature did not converge (estimate {value}, error {err})", stage=what)
    return value


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def stable_normalizing_c(alpha: float) -> float:
    """c such that c|x|^(-1-alpha) dx has exponent |xi|^alpha (by quadrature)."""
    a = 1.0 + alpha
    near = _quad(lambda y: _half_versine(np.array(y)) * y ** (-a), 0.0, 1.0, "stable_normalizing_c")
    far_cos = _quad(lambda y: y ** (-a), 1.0, np.inf, "stable_normalizing_c", weight="cos", wvar=1.0)
    total = near + 1.0 / alpha - far_cos
    return 1.0 / (2.0 * total)


@dataclass(frozen=True)
class Stable:
    """nu(dx) = c |x|^(-1-alpha) dx."""

    alpha: float
    c: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise AdmissibilityError(f"stable index {self.alpha} outside (0, 2)", stage="levy1d.Stable")
        if not self.c > 0.0:
            raise AdmissibilityError(f"stable intensity c={self.c} must be positive", stage="levy1d.Stable")

    @property
    def pruitt_constant(self) -> float:
        return 4.0 * self.c / (self.alpha * (2.0 - self.alpha))

    def tail(self, r):
        return 2.0 * self.c / self.alpha * np.asarray(r, dtype=float) ** (-self.alpha)

    def inner_moment(self, r):
        return 2.0 * self.c * np.asarray(r, dtype=float) ** (2.0 - self.alpha) / (2.0 - self.alpha)

    def h(self, r):
        return self.pruitt_constant * np.asarray(r, dtype=float) ** (-self.alpha)

    def h_inverse(self, s):
        return (self.pruitt_constant / np.asarray(s, dtype=float)) ** (1.0 / self.alpha)

    def psi(self, xi):
        ax = np.abs(np.asarray(xi, dtype=float))
        return 2.0 * self.c * complete_integral(1.0 + self.alpha) * ax ** self.alpha

    def psi_trunc(self, xi, R: float):
        ax = np.abs(np.asarray(xi, dtype=float))
        return 2.0 * self.c * ax ** self.alpha * one_minus_cos_integral(R * ax, 1.0 + self.alpha)

    def integrated_exponent(self, xi, u: float, eps: float):
        """int_0^u psi_{R_r}(xi) dr in closed form (None when unavailable)."""
        a2 = 1.0 - self.alpha * eps / (1.0 - eps)
        if a2 <= 0.0:
            return None
        ax = np.abs(np.asarray(xi, dtype=float))
        k = self.pruitt_constant
        p = self.alpha / (1.0 - eps)
        R_u = (k * u ** (1.0 - eps)) ** (1.0 / self.alpha)
        X = R_u * ax
        out = np.zeros_like(X)
        pos = ax > 0
        kappa = ax[pos] ** (-p) * k ** (-1.0 / (1.0 - eps))
        Xp = X[pos]
        bracket = u * one_minus_cos_integral(Xp, 1.0 + self.alpha) - kappa * one_minus_cos_integral(Xp, a2)
        out[pos] = 2.0 * self.c * ax[pos] ** self.alpha * bracket
        return np.maximum(out, 0.0)

    def small_jump_rule(self, lo: float, hi: float):
        edges = lo * (hi / lo) ** np.linspace(0.0, 1.0, _GEN_PANELS + 1)
        z, w = composite_gauss(edges, _GEN_NODES)
        return z, w * self.c * z ** (-1.0 - self.alpha)

    def one_sided_density(self, z):
        return self.c * np.asarray(z, dtype=float) ** (-1.0 - self.alpha)


@dataclass(frozen=True)
class DiscretizedStable:
    """Atoms at +-decay^k (k >= 1) carrying the stable mass of each shell."""

    alpha: float
    c: float
    decay: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise AdmissibilityError(f"index {self.alpha} outside (0, 2)", stage="levy1d.DiscretizedStable")
        if not self.c > 0.0:
            raise AdmissibilityError(f"intensity c={self.c} must be positive", stage="levy1d.DiscretizedStable")
        if not 0.0 < self.decay < 1.0:
            raise AdmissibilityError(f"decay {self.decay} outside (0, 1)", stage="levy1d.DiscretizedStable")

    # atom k carries two-sided mass M_k = (2c/alpha)(rho_{k+1}^-a - rho_k^-a)
    @property
    def _mass_factor(self) -> float:
        return 2.0 * self.c / self.alpha * (self.decay ** (-self.alpha) - 1.0)

    def rho(self, k):
        return self.decay ** np.asarray(k, dtype=float)

    def mass(self, k):
        return self._mass_factor * self.rho(k) ** (-self.alpha)

    def count_above(self, r):
        """Number of atoms rho_k strictly larger than r."""
        r = np.asarray(r, dtype=float)
        x = np.log(r) / np.log(self.decay)
        return np.maximum(np.ceil(x - 1e-12) - 1.0, 0.0).astype(np.int64)

    def _moment_tail(self, k):
        # sum_{j >= k} M_j rho_j^2, geometric in j
        q = self.decay ** (2.0 - self.alpha)
        return self._mass_factor * q ** np.asarray(k, dtype=float) / (1.0 - q)

    def tail(self, r):
        K = self.count_above(r)
        return 2.0 * self.c / self.alpha * (self.rho(K + 1) ** (-self.alpha) - self.decay ** (-self.alpha))

    def inner_moment(self, r):
        return self._moment_tail(self.count_above(r) + 1)

    def h(self, r):
        r = np.asarray(r, dtype=float)
        return self.tail(r) + self.inner_moment(r) / (r * r)

    def _last_atom(self, xi_max: float, k_first: int, until=None) -> int:
        k = k_first
        if xi_max > 0:
            k = max(k, int(math.ceil(math.log(_SMALL_ARG / xi_max) / math.log(self.decay))))
        if until is not None:
            while not until(k):
                k += 1
        return k

    def _atom_sum(self, xi, k_first: int, weights=None, tail_weight: float = 1.0, until=None):
        ax = np.abs(np.asarray(xi, dtype=float))
        xi_max = float(ax.max()) if ax.size else 0.0
        k_last = self._last_atom(xi_max, k_first, until)
        out = np.zeros_like(ax)
        for k in range(k_first, k_last + 1):
            wk = 1.0 if weights is None else weights(k)
            if wk <= 0.0:
                continue
            out += self.mass(k) * wk * _half_versine(ax * self.rho(k))
        out += 0.5 * ax * ax * tail_weight * self._moment_tail(k_last + 1)
        return out

    def psi(self, xi):
        return self._atom_sum(xi, 1)

    def psi_trunc(self, xi, R: float):
        if not np.isfinite(R):
            return self.psi(xi)
        return self._atom_sum(xi, int(self.count_above(R)) + 1)

    def integrated_exponent(self, xi, u: float, eps: float):
        def r_k(k):
            return float(self.h(self.rho(k))) ** (-1.0 / (1.0 - eps))

        def weight(k):
            return max(u - r_k(k), 0.0)

        return self._atom_sum(xi, 1, weights=weight, tail_weight=u, until=lambda k: r_k(k) <= 1e-8 * u)

    def small_jump_rule(self, lo: float, hi: float):
        k0 = int(self.count_above(hi)) + 1
        k1 = int(self.count_above(lo))
        ks = np.arange(k0, k1 + 1)
        return self.rho(ks), 0.5 * self.mass(ks)

    def lower_band(self) -> float:
        """B_1 = min_{r <= 1} r^alpha * (stable measure on |y| <= decay, Pruitt)."""
        return 2.0 * self.c * self.decay ** (2.0 - self.alpha) / (2.0 - self.alpha)

    def upper_band(self) -> float:
        """B_2 = decay^-2 * 4c / (alpha (2 - alpha))."""
        return self.decay ** (-2.0) * 4.0 * self.c / (self.alpha * (2.0 - self.alpha))


@dataclass(frozen=True)
class Custom:
    """User density on (0, inf), extended symmetrically, with analytic tail mass.

    ``tail_mass(r)`` must return nu([r, inf)) for the one-sided measure.
    """

    density: Callable[[float], float]
    tail_mass: Callable[[float], float]

    def tail(self, r):
        return 2.0 * np.vectorize(lambda x: float(self.tail_mass(x)))(np.asarray(r, dtype=float))

    def _inner_scalar(self, r: float) -> float:
        return 2.0 * _quad(lambda x: x * x * self.density(x), 0.0, r, "levy1d.pruitt_h(Custom)")

    def inner_moment(self, r):
        return np.vectorize(self._inner_scalar)(np.asarray(r, dtype=float))

    def h(self, r):
        r = np.asarray(r, dtype=float)
        return self.tail(r) + self.inner_moment(r) / (r * r)

    def _psi_scalar(self, xi: float, R: float) -> float:
        ax = abs(xi)
        if ax == 0.0:
            return 0.0
        split = min(1.0 / ax, R)
        near = _quad(lambda x: float(_half_versine(np.array(ax * x))) * self.density(x), 0.0, split, "levy1d.psi(Custom)")
        if split >= R:
            return 2.0 * near
        if np.isfinite(R):
            far_cos = _quad(self.density, split, R, "levy1d.psi(Custom)", weight="cos", wvar=ax)
            far_mass = float(self.tail_mass(split)) - float(self.tail_mass(R))
        else:
            far_cos = _quad(self.density, split, np.inf, "levy1d.psi(Custom)", weight="cos", wvar=ax)
            far_mass = float(self.tail_mass(split))
        return 2.0 * (near + far_mass - far_cos)

    def psi(self, xi):
        return np.vectorize(lambda x: self._psi_scalar(x, np.inf))(np.asarray(xi, dtype=float))

    def psi_trunc(self, xi, R: float):
        return np.vectorize(lambda x: self._psi_scalar(x, R))(np.asarray(xi, dtype=float))

    def integrated_exponent(self, xi, u, eps):
        return None

    def small_jump_rule(self, lo: float, hi: float):
        edges = lo * (hi / lo) ** np.linspace(0.0, 1.0, _GEN_PANELS + 1)
        z, w = composite_gauss(edges, _GEN_NODES)
        return z, w * np.array([self.density(x) for x in z])

    def one_sided_density(self, z):
        return np.vectorize(lambda x: float(self.density(x)))(np.asarray(z, dtype=float))


Measure = Union[Stable, DiscretizedStable, Custom]


@dataclass(frozen=True)
class LevyComponent:
    """A symmetric Levy measure with declared weak scaling data (alpha, beta, C1, C2)."""

    measure: Measure
    alpha_idx: float
    beta_idx: float
    C1: float = 1.0
    C2: float = 1.0
    h_at_1: float = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.alpha_idx <= self.beta_idx <= 2.0:
            raise AdmissibilityError(
                f"need 0 < alpha <= beta <= 2, got alpha={self.alpha_idx}, beta={self.beta_idx}",
                stage="levy1d.LevyComponent",
            )
        if not 0.0 < self.C1 <= 1.0 <= self.C2:
            raise AdmissibilityError(
                f"need 0 < C1 <= 1 <= C2, got C1={self.C1}, C2={self.C2}", stage="levy1d.LevyComponent"
            )
        small = self.measure.tail(np.array([1e-12, 1e-6]))
        if not (np.all(np.isfinite(small)) and small[1] > 0.0 and small[0] > 1.5 * small[1]):
            raise AdmissibilityError("Levy measure must be infinite near the origin", stage="levy1d.LevyComponent")
        object.__setattr__(self, "h_at_1", float(self.measure.h(1.0)))

    @property
    def sandwich_constant(self) -> float:
        """c = (2/C1)^(2/alpha) - 1 in h <= c K and the psi-vs-h sandwich."""
        return (2.0 / self.C1) ** (2.0 / self.alpha_idx) - 1.0


def stable_component(alpha: float, c: float | None = None) -> LevyComponent:
    """Symmetric alpha-stable component; ``c=None`` normalises psi(xi) = |xi|^alpha."""
    if c is None:
        c = stable_normalizing_c(float(alpha))
    return LevyComponent(Stable(alpha, c), alpha, alpha, 1.0, 1.0)


def discretized_stable_component(alpha: float, c: float, decay: float) -> LevyComponent:
    """Atomic component with scaling constants from its two-sided power band."""
    m = DiscretizedStable(alpha, c, decay)
    ratio = m.lower_band() / m.upper_band()
    return LevyComponent(m, alpha, alpha, ratio, 1.0 / ratio)


def custom_component(density, tail_mass, alpha: float, beta: float, C1: float = 1.0, C2: float = 1.0) -> LevyComponent:
    return LevyComponent(Custom(density, tail_mass), alpha, beta, C1, C2)


# ---------------------------------------------------------------------------
# Pruitt functions and scaling
# ---------------------------------------------------------------------------


def pruitt_h(comp: LevyComponent, r: ArrayLike):
    """h(r) = int (1 ^ x^2 / r^2) nu(dx)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("pruitt_h requires r > 0")
    out = comp.measure.h(r)
    return float(out) if out.ndim == 0 else out


def pruitt_K(comp: LevyComponent, r: ArrayLike):
    """K(r) = r^-2 int_{|x| <= r} x^2 nu(dx)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("pruitt_K requires r > 0")
    out = comp.measure.inner_moment(r) / (r * r)
    return float(out) if np.ndim(out) == 0 else out


def h_inverse(comp: LevyComponent, s: ArrayLike):
    """Solve h(r) = s for r (h is continuous and strictly decreasing)."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr <= 0):
        raise ValueError("h_inverse requires s > 0")
    m = comp.measure
    if isinstance(m, Stable):
        out = m.h_inverse(s_arr)
    else:
        out = np.vectorize(lambda v: _h_inverse_scalar(comp, v))(s_arr)
    return float(out) if np.ndim(out) == 0 else out


def _h_inverse_scalar(comp: LevyComponent, s: float) -> float:
    h = comp.measure.h
    target = math.log(s)

    def f(logr):
        return math.log(float(h(math.exp(logr)))) - target

    lo = hi = 0.0
    step = 1.0
    while f(lo) < 0.0:
        lo -= step
        step *= 2.0
        if lo < -700.0:
            raise ConvergenceError(f"h_inverse bracket underflow for s={s}", stage="levy1d.h_inverse")
    step = 1.0
    while f(hi) > 0.0:
        hi += step
        step *= 2.0
        if hi > 700.0:
            raise ConvergenceError(f"h_inverse bracket overflow for s={s}", stage="levy1d.h_inverse")
    if lo == hi:
        return math.exp(lo)
    root = optimize.brentq(f, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=400)
    return math.exp(root)


def truncation_radius(comp: LevyComponent, eps: float, u: ArrayLike):
    """R_u = h^-1(u^(eps-1))."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps={eps} outside (0, 1)")
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ValueError("truncation_radius requires u > 0")
    return h_inverse(comp, u ** (eps - 1.0))


def scaling_constants_h_inverse(comp: LevyComponent, tau: float) -> tuple[float, float]:
    """(c1, c2) with c1 u^(1/alpha) <= h^-1(1/u) <= c2 u^(1/beta) for 0 < u <= tau."""
    a, b = comp.alpha_idx, comp.beta_idx
    c1 = comp.C1 ** (1.0 / a) * min(comp.h_at_1, 1.0 / tau) ** (1.0 / a)
    c2 = comp.C2 ** (1.0 / b) * max(h_inverse(comp, 1.0 / tau), 1.0) * comp.h_at_1 ** (1.0 / b)
    return c1, c2


def psi(comp: LevyComponent, xi: ArrayLike):
    """Characteristic exponent psi(xi) = int (1 - cos(xi x)) nu(dx)."""
    out = comp.measure.psi(np.asarray(xi, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def psi_sandwich(comp: LevyComponent, xi: ArrayLike, xi0: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper bounds of psi by h(1/|xi|), valid for |xi| >= xi0."""
    ax = np.abs(np.asarray(xi, dtype=float))
    hv = comp.measure.h(1.0 / ax)
    lower = hv / (4.0 * comp.sandwich_constant * max(1.0, xi0 ** -2))
    return lower, 2.0 * hv


@dataclass(frozen=True)
class WscReport:
    lower_ratio_min: float
    upper_ratio_max: float
    psi_lower_ratio_min: float
    psi_upper_ratio_max: float
    C1: float
    C2: float
    C1_star: float
    C2_star: float
    h_passed: bool
    psi_passed: bool

    @property
    def passed(self) -> bool:
        return self.h_passed and self.psi_passed


def check_wsc(comp: LevyComponent, r_grid, lambda_grid) -> WscReport:
    """Empirical weak scaling ratios of h (and of psi via the sandwich constants)."""
    r = np.asarray(r_grid, dtype=float).ravel()
    lam = np.asarray(lambda_grid, dtype=float).ravel()
    if np.any((r <= 0) | (r > 1)) or np.any((lam <= 0) | (lam > 1)):
        raise ValueError("check_wsc grids must lie in (0, 1]")
    a, b = comp.alpha_idx, comp.beta_idx
    h = comp.measure.h
    hr = h(r)[:, None]
    hl = h(r[:, None] * lam[None, :])
    lo = float(np.min(hl * lam ** a / hr))
    hi = float(np.max(hl * lam ** b / hr))
    c = comp.sandwich_constant
    c1s, c2s = comp.C1 / (8.0 * c), 8.0 * c * comp.C2
    xi = 1.0 / r
    big = 1.0 / lam
    pv = comp.measure.psi(xi)[:, None]
    pl = comp.measure.psi(xi[:, None] * big[None, :])
    plo = float(np.min(pl / (big ** a * pv)))
    phi = float(np.max(pl / (big ** b * pv)))
    slack = 1e-10
    return WscReport(
        lower_ratio_min=lo,
        upper_ratio_max=hi,
        psi_lower_ratio_min=plo,
        psi_upper_ratio_max=phi,
        C1=comp.C1,
        C2=comp.C2,
        C1_star=c1s,
        C2_star=c2s,
        h_passed=lo >= comp.C1 * (1 - slack) and hi <= comp.C2 * (1 + slack),
        psi_passed=plo >= c1s * (1 - slack) and phi <= c2s * (1 + slack),
    )


# ---------------------------------------------------------------------------
# exponents of the truncated process
# ---------------------------------------------------------------------------


def _exponent_by_quadrature(comp: LevyComponent, eps: float, u: float, xi: np.ndarray) -> np.ndarray:
    # r = u v^(1/(1-eps)) makes R_r a power of v; geometric panels absorb the v -> 0 end
    edges = np.concatenate([[0.0], 0.25 ** np.arange(7, -1, -1)])
    v, wv = composite_gauss(edges, 8)
    r = u * v ** (1.0 / (1.0 - eps))
    jac = u / (1.0 - eps) * v ** (eps / (1.0 - eps))
    radii = truncation_radius(comp, eps, r)
    out = np.zeros_like(xi)
    for R, w, j in zip(np.atleast_1d(radii), wv, jac):
        out += w * j * comp.measure.psi_trunc(xi, float(R))
    return out


def integrated_exponent(comp: LevyComponent, eps: float, u: float, xi: ArrayLike, method: str = "auto"):
    """Phi_u(xi) = int_0^u psi_{R_r}(xi) dr.

    ``method='auto'`` uses the closed form of the measure when one exists;
    ``'quadrature'`` forces the 64-node composite rule in r.
    """
    if u <= 0:
        raise ValueError("integrated_exponent requires u > 0")
    x = np.asarray(xi, dtype=float)
    flat = np.atleast_1d(x).ravel()
    out = None
    if method == "auto":
        out = comp.measure.integrated_exponent(flat, u, eps)
    elif method != "quadrature":
        raise ValueError(f"unknown method {method!r}")
    if out is None:
        out = _exponent_by_quadrature(comp, eps, u, flat)
    out = out.reshape(x.shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


def _cosine_transform(exponent: Callable[[np.ndarray], np.ndarray], Z: float, w: np.ndarray, order: int) -> np.ndarray:
    """(1/pi) int_0^Z z^k trig(w z) exp(-exponent(z)) dz for the k-th w-derivative."""
    w = np.asarray(w, dtype=float)
    flat = w.ravel()
    wmax = float(np.max(np.abs(flat))) if flat.size else 0.0
    # two oscillation periods per panel; geometric panels resolve the cusp of exponent at 0
    width = 4.0 * math.pi / (2.0 * wmax + 1.0)
    n_panels = max(int(math.ceil(Z / width)), 1)
    edges = np.concatenate([[0.0], width * 0.5 ** np.arange(_CUSP_PANELS, 0, -1), width * np.arange(1, n_panels + 1)])
    z, wz = composite_gauss(edges, _PANEL_NODES)
    weight = wz * np.exp(-exponent(z))
    if order == 1:
        weight = -weight * z
    elif order == 2:
        weight = -weight * z * z
    trig = np.sin if order == 1 else np.cos
    out = np.empty_like(flat)
    step = max(1, _CHUNK // z.size)
    for i in range(0, flat.size, step):
        out[i:i + step] = trig(np.outer(flat[i:i + step], z)) @ weight
    return (out / math.pi).reshape(w.shape)


def _stable_cutoff(amp: float, alpha: float, shift: float, order: int, tol: float) -> float:
    # smallest Z with amp Z^alpha - shift >= log(1/tol) + (order + 1) log Z
    Z = 1.0
    for _ in range(60):
        need = math.log(1.0 / tol) + shift + (order + 1) * math.log(max(Z, 1.0))
        Z_new = max((need / amp) ** (1.0 / alpha), 1.0)
        if abs(Z_new - Z) <= 1e-10 * Z_new:
            break
        Z = Z_new
    return Z_new


def _sandwich_cutoff(comp: LevyComponent, u: float, shift: float, order: int, tol: float) -> float:
    """Cutoff from u psi_lower(Z) - shift >= log(1/tol) + (order+1) log Z, psi_lower increasing."""

    def excess(logZ):
        Z = math.exp(logZ)
        lower, _ = psi_sandwich(comp, Z)
        return u * float(lower) - shift - math.log(1.0 / tol) - (order + 1) * logZ

    hi = 0.0
    while excess(hi) < 0.0:
        hi += 1.0
        if hi > 60.0:
            raise CutoffError(
                "exponent grows too slowly to truncate the inversion integral", stage="levy1d.truncated_density"
            )
    if hi == 0.0:
        return 1.0
    return math.exp(optimize.brentq(excess, hi - 1.0 if excess(hi - 1.0) < 0 else 0.0, hi, xtol=1e-6))


class Density1D:
    """Truncated density g_u of one component for a fixed horizon u and exponent eps.

    Exponent evaluations are cached per frequency layout; the object is
    otherwise immutable.
    """

    def __init__(self, component: LevyComponent, u: float, eps: float):
        if not u > 0:
            raise ValueError("Density1D requires u > 0")
        if not 0.0 < eps < 1.0:
            raise ValueError(f"eps={eps} outside (0, 1)")
        self.component = component
        self.u = float(u)
        self.eps = float(eps)
        self.R_u = float(truncation_radius(component, eps, u))
        self._cutoffs: dict[int, float] = {}

    def __repr__(self) -> str:
        return f"Density1D(u={self.u:g}, eps={self.eps:g}, R_u={self.R_u:.6g})"

    def exponent(self, z: np.ndarray) -> np.ndarray:
        return integrated_exponent(self.component, self.eps, self.u, np.asarray(z, dtype=float))

    def cutoff(self, order: int = 0, tol: float = INVERSION_TOL) -> float:
        key = order
        if key not in self._cutoffs:
            shift = 2.0 / self.eps * self.u ** self.eps
            m = self.component.measure
            if isinstance(m, Stable):
                amp = self.u * float(m.psi(1.0))
                Z = _stable_cutoff(amp, m.alpha, shift, order, tol)
            else:
                Z = _sandwich_cutoff(self.component, self.u, shift, order, tol)
            self._cutoffs[key] = Z
        return self._cutoffs[key]


def truncated_exponent(d1: Density1D, xi: ArrayLike):
    """psi_u(xi) = int_{|v| <= R_u} (1 - cos(v xi)) nu(dv)."""
    out = d1.component.measure.psi_trunc(np.asarray(xi, dtype=float), d1.R_u)
    return float(out) if np.ndim(out) == 0 else out


def truncated_density(d1: Density1D, w: ArrayLike, deriv_order: int = 0):
    """g_u(w) or its first two derivatives, by cosine-transform quadrature."""
    if deriv_order not in (0, 1, 2):
        raise ValueError("deriv_order must be 0, 1 or 2")
    w = np.asarray(w, dtype=float)
    sign = np.sign(w) if deriv_order == 1 else 1.0
    Z = d1.cutoff(deriv_order)
    out = sign * _cosine_transform(d1.exponent, Z, np.abs(w), deriv_order)
    return float(out) if np.ndim(out) == 0 else out


def full_cutoff(comp: LevyComponent, u: float, order: int = 0, tol: float = INVERSION_TOL) -> float:
    m = comp.measure
    if isinstance(m, Stable):
        return _stable_cutoff(u * float(m.psi(1.0)), m.alpha, 0.0, order, tol)
    return _sandwich_cutoff(comp, u, 0.0, order, tol)


def full_density(comp: LevyComponent, u: float, w: ArrayLike, deriv_order: int = 0):
    """Density of the component at time u, inverted from exp(-u psi)."""
    if not u > 0:
        raise ValueError("full_density requires u > 0")
    if deriv_order not in (0, 1, 2):
        raise ValueError("deriv_order must be 0, 1 or 2")
    w = np.asarray(w, dtype=float)
    sign = np.sign(w) if deriv_order == 1 else 1.0
    Z = full_cutoff(comp, u, deriv_order)
    out = sign * _cosine_transform(lambda z: u * comp.measure.psi(z), Z, np.abs(w), deriv_order)
    return float(out) if np.ndim(out) == 0 else out


def second_moment(d1: Density1D) -> float:
    """m_u = int x^2 nu_u(dx) = int_0^u inner_moment(R_r) dr."""
    comp, eps, u = d1.component, d1.eps, d1.u

    def integrand(v):
        r = u * v ** (1.0 / (1.0 - eps))
        jac = u / (1.0 - eps) * v ** (eps / (1.0 - eps))
        return float(comp.measure.inner_moment(truncation_radius(comp, eps, r))) * jac

    return _quad(integrand, 0.0, 1.0, "levy1d.second_moment", epsabs=0.0, epsrel=1e-12)


def generator_apply(d1: Density1D, f: Callable, w: ArrayLike, f2: Callable | None = None):
    """K_u f(w) = int_{(0, R_u]} (f(w+z) + f(w-z) - 2 f(w)) nu(dz).

    Jumps below 1e-4 R_u contribute f''(w) times their second moment; ``f2``
    supplies f'' (a central difference is used otherwise).
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    R = d1.R_u
    delta = _GEN_INNER * R
    m = d1.component.measure
    z, wz = m.small_jump_rule(delta, R)
    fw = np.asarray(f(w), dtype=float)
    plus = np.asarray(f(w[:, None] + z[None, :]), dtype=float)
    minus = np.asarray(f(w[:, None] - z[None, :]), dtype=float)
    if not (np.all(np.isfinite(fw)) and np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
        raise ValueError("generator_apply: non-finite function values")
    outer = (plus + minus - 2.0 * fw[:, None]) @ wz
    if f2 is None:
        hstep = 10.0 * delta
        d2 = (np.asarray(f(w + hstep)) + np.asarray(f(w - hstep)) - 2.0 * fw) / hstep ** 2
    else:
        d2 = np.asarray(f2(w), dtype=float)
    inner = d2 * 0.5 * m.inner_moment(delta)
    out = outer + inner
    return float(out[0]) if out.size == 1 else out


# ---------------------------------------------------------------------------
# tabulation
# ---------------------------------------------------------------------------


def density_table(comp: LevyComponent, eps: float, u_values, w_values) -> list[dict]:
    """Rows (u, w, g_u, gtilde_u) for CSV export."""
    rows = []
    w = np.asarray(w_values, dtype=float)
    for u in np.atleast_1d(np.asarray(u_values, dtype=float)):
        d1 = Density1D(comp, float(u), eps)
        g = np.atleast_1d(truncated_density(d1, w))
        gt = np.atleast_1d(full_density(comp, float(u), w))
        rows.extend({"u": float(u), "w": float(a), "g_u": float(b), "gtilde_u": float(c)} for a, b, c in zip(w, g, gt))
    return rows
