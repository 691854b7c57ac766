"""The parametrix kernel q0, the Volterra solve for p, residuals and semigroup action.

Orientation: q0_{t,s}(x, y) = (L_t^x - L_{t,s}^y) p^y_{t,s}(x - y), where L_t^x
is the full generator with jump map V_t(x, .) and L_{t,s}^y the generator of
the truncated noise pushed through A_s(y).  Per coordinate k it splits into

* I   small jumps |u| < R_k: p(z + u a_k^x) - p(z + u a_k^y), paired over +-u,
* II  small jumps: the shift U_t(x, u e_k), paired over +-u,
* III big jumps |u| >= R_k: p(z + u a_k^x + U) - p(z),

with z = x - y, a_k^x = A_t(x) e_k and a_k^y = A_s(y) e_k.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.special import gamma as gamma_fn

from . import levy1d
from ._fit import fit_loglog
from ._special import gauss_legendre
from ._symbols import symbols_for
from ._volterra import EXP_CAP, GridSolver, SpectralSolver
from .exceptions import ConfigError, ConvergenceError, LevyParamError

_INNER = 1e-4          # jumps below _INNER * R use the Hessian
_BIG_DECADES = 12.0    # big-jump rule reaches R * 10^(_BIG_DECADES / alpha)
_BIG_PANELS = 24
_BUMP_OFFSETS = np.array([-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0])
_CHUNK = 1 << 21       # evaluations per vectorised block


# ---------------------------------------------------------------------------
# pointwise q0
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Q0Terms:
    """q0 and its three parts at the requested points."""

    I: np.ndarray
    II: np.ndarray
    III: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.I + self.II + self.III


class _Frozen:
    """w -> p^y_{t,s}(w) and its Hessian for per-point matrices A_s(y)."""

    def __init__(self, ke, u: float, Ay: np.ndarray):
        self.ke, self.u = ke, float(u)
        self.Ainv = np.linalg.inv(Ay)
        self.det = np.abs(np.linalg.det(Ay))

    def __call__(self, w: np.ndarray) -> np.ndarray:
        """w has shape (P, n, d) (or (P, d)); matrices broadcast over axis 0."""
        if w.ndim == 2:
            zeta = np.einsum("pij,pj->pi", self.Ainv, w)
            return self.ke.product_density(self.u, zeta) / self.det
        zeta = np.einsum("pij,pnj->pni", self.Ainv, w)
        return self.ke.product_density(self.u, zeta) / self.det[:, None]

    def hessian(self, w: np.ndarray) -> np.ndarray:
        zeta = np.einsum("pij,pj->pi", self.Ainv, w)
        _, _, HG = self.ke.product_derivatives(self.u, zeta)
        return np.einsum("pai,pab,pbj->pij", self.Ainv, HG, self.Ainv) / self.det[:, None, None]


def _small_rule(measure, R: float):
    return measure.small_jump_rule(_INNER * R, R)


def _big_rule(comp, R: float, centre: np.ndarray, width: np.ndarray, n_gl: int):
    """One-sided rule for int_{u > R} f(u) nu(du) with panels refined at ``centre``.

    Returns nodes (P, n), weights (P, n) and the one-sided mass beyond the
    last node (which only sees the -2 p(z) part of the integrand).
    """
    m = comp.measure
    P = centre.shape[0]
    if isinstance(m, levy1d.DiscretizedStable):
        K = int(m.count_above(R))
        ks = np.arange(1, K + 1)
        nodes = np.broadcast_to(m.rho(ks), (P, K))
        weights = np.broadcast_to(0.5 * m.mass(ks), (P, K))
        return nodes, weights, 0.0
    top = R * 10.0 ** (_BIG_DECADES / comp.alpha_idx)
    top = max(top, float(np.max(centre + 10.0 * width, initial=0.0)))
    base = R * (top / R) ** np.linspace(0.0, 1.0, _BIG_PANELS + 1)
    local = centre[:, None] + width[:, None] * _BUMP_OFFSETS[None, :]
    edges = np.concatenate([np.broadcast_to(base, (P, base.size)), np.clip(local, R, top)], axis=1)
    edges.sort(axis=1)
    x, w = gauss_legendre(n_gl)
    lo, span = edges[:, :-1, None], np.diff(edges, axis=1)[:, :, None]
    nodes = (lo + span * x).reshape(P, -1)
    weights = (span * w).reshape(P, -1) * m.one_sided_density(nodes)
    rem = 0.5 * float(m.tail(top))
    return nodes, weights, rem


def _chunks(n_points: int, per_point: int):
    step = max(1, _CHUNK // max(per_point, 1))
    for a in range(0, n_points, step):
        yield slice(a, min(a + step, n_points))


def q0_terms(ke, t: float, s: float, x, y, n_gl: int = 16) -> Q0Terms:
    """I, II and III of q0_{t,s}(x, y) for y of shape (..., d)."""
    if not s > t:
        raise ValueError(f"need s > t, got t={t}, s={s}")
    model, fld = ke.model, ke.field
    d, u = model.d, float(s - t)
    x = np.asarray(x, dtype=float).reshape(d)
    y = np.asarray(y, dtype=float)
    shape = y.shape[:-1]
    yf = y.reshape(-1, d)
    Ax = fld.A(t, x)
    Ay = fld.A(s, yf)
    if Ay.ndim == 2:
        Ay = np.broadcast_to(Ay, (yf.shape[0], d, d))
    R = ke.radii(u)
    sigma = np.array([levy1d.h_inverse(c, 1.0 / u) for c in model.components])
    has_u = not fld.u_is_zero
    out_I = np.zeros(yf.shape[0])
    out_II = np.zeros(yf.shape[0])
    out_III = np.zeros(yf.shape[0])
    for sl in _chunks(yf.shape[0], 4 * n_gl * (_BIG_PANELS + 10)):
        pf = _Frozen(ke, u, Ay[sl])
        z = x - yf[sl]
        p_z = pf(z)
        H = pf.hessian(z)
        for k in range(d):
            comp = model.components[k]
            ax = Ax[:, k]
            ay = Ay[sl][:, :, k]
            ek = np.zeros(d)
            ek[k] = 1.0
            # small jumps
            us, ws = _small_rule(comp.measure, R[k])
            wp = z[:, None, :] + us[None, :, None] * ax
            wm = z[:, None, :] - us[None, :, None] * ax
            f_x = pf(wp) + pf(wm)
            f_y = pf(z[:, None, :] + us[None, :, None] * ay[:, None, :]) + pf(z[:, None, :] - us[None, :, None] * ay[:, None, :])
            out_I[sl] += (f_x - f_y) @ ws
            quad_x = np.einsum("i,pij,j->p", ax, H, ax)
            quad_y = np.einsum("pi,pij,pj->p", ay, H, ay)
            out_I[sl] += 0.5 * float(comp.measure.inner_moment(_INNER * R[k])) * (quad_x - quad_y)
            if has_u:
                Up = fld.U(t, x, us[:, None] * ek)
                Um = fld.U(t, x, -us[:, None] * ek)
                g = pf(wp + Up[None]) + pf(wm + Um[None]) - f_x
                out_II[sl] += g @ ws
            # big jumps, panels refined where the jump line passes the kernel bump
            b = np.einsum("pij,j->pi", pf.Ainv, ax)
            zeta0 = np.einsum("pij,pj->pi", pf.Ainv, z)
            nb = np.maximum(np.einsum("pi,pi->p", b, b), 1e-300)
            centre = np.abs(-np.einsum("pi,pi->p", zeta0, b) / nb)
            width = np.min(sigma[None, :] / np.maximum(np.abs(b), 1e-300), axis=1)
            ub, wb, rem = _big_rule(comp, R[k], centre, width, n_gl)
            shift_p = z[:, None, :] + ub[:, :, None] * ax
            shift_m = z[:, None, :] - ub[:, :, None] * ax
            if has_u:
                shift_p = shift_p + fld.U(t, x, ub[..., None] * ek)
                shift_m = shift_m + fld.U(t, x, -ub[..., None] * ek)
            g = pf(shift_p) + pf(shift_m) - 2.0 * p_z[:, None]
            out_III[sl] += np.einsum("pn,pn->p", g, wb) - 2.0 * rem * p_z
    return Q0Terms(out_I.reshape(shape), out_II.reshape(shape), out_III.reshape(shape))


def q0(ke, t: float, s: float, x, y, check: bool = True, rtol: float = 1e-6):
    """q0_{t,s}(x, y); with ``check`` the result is compared with a coarser rule.

    Raises ConvergenceError tagged with the offending term when the two rules
    disagree by more than ``rtol`` relative to the size of the terms.
    """
    fine = q0_terms(ke, t, s, x, y, 16)
    if check:
        coarse = q0_terms(ke, t, s, x, y, 10)
        scale = np.abs(fine.I) + np.abs(fine.II) + np.abs(fine.III) + 1e-300
        for name in ("I", "II", "III"):
            err = np.abs(getattr(fine, name) - getattr(coarse, name)) / scale
            if np.any(err > rtol):
                raise ConvergenceError(f"quadrature for term {name} not converged "
                                       f"(relative change {float(err.max()):.2e})", stage=f"parametrix.q0[{name}]")
    total = fine.total
    return float(total) if total.ndim == 0 else total


# ---------------------------------------------------------------------------
# L1 norm of q0
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormReport:
    """int |q0_{t,s}(x, y)| dy with the part added for jumps beyond the grid."""

    value: float
    grid_part: float
    tail_part: float
    n_points: int


def q0_l1_norm(ke, t: float, s: float, x, n_nodes: int = 121, reach: float = 1e4) -> NormReport:
    """int |q0_{t,s}(x, y)| dy over y = x + A_t(x) zeta on a sinh grid in zeta.

    In zeta the big-jump ridges of q0 lie on the coordinate axes, so a
    per-axis sinh grid resolves their width near the axis and their slow decay
    along it.  Ridges beyond ``reach`` kernel scales add their jump mass.
    """
    if not s > t:
        raise ValueError(f"need s > t, got t={t}, s={s}")
    model = ke.model
    d, u = model.d, float(s - t)
    x = np.asarray(x, dtype=float).reshape(d)
    sigma = np.array([levy1d.h_inverse(c, 1.0 / u) for c in model.components])
    T = math.asinh(reach)
    tau = np.linspace(-T, T, n_nodes)
    dtau = tau[1] - tau[0]
    axes = [sigma[j] * np.sinh(tau) for j in range(d)]
    jac = [sigma[j] * np.cosh(tau) * dtau for j in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    wts = np.ones((n_nodes,) * d)
    for j in range(d):
        sh = [1] * d
        sh[j] = n_nodes
        wts = wts * jac[j].reshape(sh)
    Ax = ke.field.A(t, x)
    y = x + mesh @ Ax.T
    vals = q0_terms(ke, t, s, x, y).total
    grid_part = float(np.sum(np.abs(vals) * wts) * abs(np.linalg.det(Ax)))
    tail_part = float(sum(c.measure.tail(sigma[j] * reach) for j, c in enumerate(model.components)))
    return NormReport(grid_part + tail_part, grid_part, tail_part, int(vals.size))


# ---------------------------------------------------------------------------
# grids and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid of n points per axis on centre + [-L, L)^d."""

    center: tuple
    half_width: float
    n: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if not self.half_width > 0:
            raise ConfigError("y_grid.half_width must be positive", stage="parametrix.SpatialGrid")
        if self.n < 8 or self.n % 2:
            raise ConfigError("y_grid.n must be an even integer >= 8", stage="parametrix.SpatialGrid")

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def dx(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def vol(self) -> float:
        return self.dx ** self.d

    @property
    def offsets(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dx

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*([self.offsets] * self.d), indexing="ij")
        return np.asarray(self.center) + np.stack(mesh, -1)

    def contains(self, lo, hi) -> bool:
        c = np.asarray(self.center)
        return bool(np.all(np.asarray(lo) >= c - self.half_width) and np.all(np.asarray(hi) <= c + self.half_width))


def _to_fft_order(a: np.ndarray, d: int) -> np.ndarray:
    return np.fft.ifftshift(a, axes=tuple(range(d)))


def _to_natural(a: np.ndarray, d: int) -> np.ndarray:
    return np.fft.fftshift(a, axes=tuple(range(d)))


def _rfreqs(grid: SpatialGrid) -> np.ndarray:
    full = 2.0 * np.pi * np.fft.fftfreq(grid.n, d=grid.dx)
    half = 2.0 * np.pi * np.fft.rfftfreq(grid.n, d=grid.dx)
    mesh = np.meshgrid(*([full] * (grid.d - 1) + [half]), indexing="ij")
    return np.stack(mesh, -1)


def _irfft_natural(grid: SpatialGrid, F: np.ndarray) -> np.ndarray:
    """Inverse of F(xi) = int f(w) exp(-i xi w) dw, returned in natural order."""
    f = np.fft.irfftn(F, s=(grid.n,) * grid.d, axes=tuple(range(-grid.d, 0))) / grid.vol
    return _to_natural(f, grid.d)


def coverage_radius(ke, u: float, factor: float = 20.0) -> float:
    """factor |M_u| ||A||, the radius the spatial grid has to cover."""
    M, _ = ke.M_norms(u)
    norm_A = ke.operator_norm().parts["sup|A^T|"]
    return factor * M * norm_A


_METHODS = ("resolvent", "series")


@dataclass(frozen=True)
class VolterraConfig:
    """Discretisation of one heat-kernel solve p_{t,s}(x, .)."""

    t: float
    s: float
    x: tuple
    y_grid: SpatialGrid | None = None
    n_time: int = 16
    n_space: int = 512
    k_max: int = 8
    tol: float = 1e-6
    method: str = "resolvent"
    n_colors: int = 3
    coverage: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        if not (np.isfinite(self.t) and np.isfinite(self.s)):
            raise ConfigError("t and s must be finite", stage="parametrix.VolterraConfig")
        if self.t < 0:
            raise ConfigError(f"field 't' must be >= 0, got {self.t}", stage="parametrix.VolterraConfig")
        if not self.s > self.t:
            raise ConfigError(f"field 's' must exceed t (got t={self.t}, s={self.s})",
                              stage="parametrix.VolterraConfig")
        if self.n_time < 4:
            raise ConfigError("field 'n_time' must be >= 4", stage="parametrix.VolterraConfig")
        if self.n_space < 8 or self.n_space % 2:
            raise ConfigError("field 'n_space' must be an even integer >= 8", stage="parametrix.VolterraConfig")
        if self.k_max < 1:
            raise ConfigError("field 'k_max' must be >= 1", stage="parametrix.VolterraConfig")
        if not self.tol > 0:
            raise ConfigError("field 'tol' must be positive", stage="parametrix.VolterraConfig")
        if self.method not in _METHODS:
            raise ConfigError(f"field 'method' must be one of {_METHODS}", stage="parametrix.VolterraConfig")
        if not self.coverage > 0:
            raise ConfigError("field 'coverage' must be positive", stage="parametrix.VolterraConfig")
        if self.n_colors < 1:
            raise ConfigError("field 'n_colors' must be >= 1", stage="parametrix.VolterraConfig")
        if self.y_grid is not None and self.y_grid.d != len(self.x):
            raise ConfigError("field 'y_grid' has the wrong dimension", stage="parametrix.VolterraConfig")

    @property
    def u(self) -> float:
        return float(self.s - self.t)

    def grid_for(self, ke) -> SpatialGrid:
        need = coverage_radius(ke, self.u, self.coverage)
        if self.y_grid is None:
            return SpatialGrid(self.x, need, self.n_space)
        if self.y_grid.half_width < need * (1.0 - 1e-9):
            raise ConfigError(f"field 'y_grid' covers radius {self.y_grid.half_width:.4g} < "
                              f"{self.coverage:g}|M|·||A|| = {need:.4g}", stage="parametrix.VolterraConfig")
        if not np.allclose(self.y_grid.center, self.x):
            raise ConfigError("field 'y_grid' must be centred at x", stage="parametrix.VolterraConfig")
        return self.y_grid


# ---------------------------------------------------------------------------
# iterated kernels q^(k) for x-independent coefficients
# ---------------------------------------------------------------------------


class KernelSeries:
    """Normalised spectra Q_k(delta) = q_hat^(k)(delta) exp(delta psi).

    Each Q_k is tabulated on a geometric delta-table and interpolated by a
    cubic spline of log|Q_k| in log delta (its sign is (-1)^(k+1)); Q_0 is
    evaluated exactly.  The time convolution

        Q_{k+1}(delta) = int_0^delta Q_k(r) Q_0(delta - r) dr

    is split at delta / 2 and each half uses r = (delta / 2) sigma^(1/e) with
    e the exponent of the endpoint singularity.
    """

    def __init__(self, solver: SpectralSolver, eta: np.ndarray, u: float, eps: float,
                 ratio: float = 2.0 ** -0.5, depth: float = 1e-6, nodes: int = 16):
        self.solver, self.u, self.eps = solver, float(u), float(eps)
        self.coords = solver._coords(eta)
        n = int(math.ceil(math.log(depth) / math.log(ratio))) + 1
        self.deltas = self.u * ratio ** np.arange(n)[::-1]
        self.log_d = np.log(self.deltas)
        self._gl = gauss_legendre(nodes)
        self._splines: dict = {}
        self._q0_cache: dict[float, np.ndarray] = {}
        self.tables = [np.stack([self.q0(dl) for dl in self.deltas])]

    def q0(self, delta: float) -> np.ndarray:
        key = float(delta)
        if key not in self._q0_cache:
            self._q0_cache[key] = self.solver._q_norm(self.coords, key)
        return self._q0_cache[key]

    def _spline(self, table: np.ndarray, k: int):
        key = (id(table), k)
        if key not in self._splines:
            logs = np.log(np.maximum(np.abs(table), 1e-300))
            live = np.any(table != 0.0, axis=0)
            self._splines[key] = (table, CubicSpline(self.log_d, logs, axis=0), live, logs[:2])
        return self._splines[key][1:]

    def interp(self, table: np.ndarray, k: int, r: float) -> np.ndarray:
        """Q_k(r): exact for k = 0, otherwise a cubic spline of log|Q_k| in log r."""
        if k == 0:
            return self.q0(r)
        sign = -1.0 if k % 2 == 0 else 1.0
        spline, live, head = self._spline(table, k)
        lr = math.log(r)
        if lr <= self.log_d[0]:
            slope = (head[1] - head[0]) / (self.log_d[1] - self.log_d[0])
            vals = np.exp(head[0] + slope * (lr - self.log_d[0]))
        else:
            vals = np.exp(spline(lr))
        return np.where(live, sign * vals, 0.0)

    def convolve(self, table: np.ndarray, k: int) -> np.ndarray:
        """Q_{k+1} on the delta-table from Q_k (``table``)."""
        xs, ws = self._gl
        e_left = (k + 1) * self.eps
        out = np.zeros_like(table)
        for j, dl in enumerate(self.deltas):
            half = 0.5 * dl
            acc = 0.0
            for x, w in zip(xs, ws):
                r = half * x ** (1.0 / e_left)
                jac = half / e_left * x ** (1.0 / e_left - 1.0) * w
                acc = acc + jac * self.interp(table, k, r) * self.q0(dl - r)
                r = half * x ** (1.0 / self.eps)
                jac = half / self.eps * x ** (1.0 / self.eps - 1.0) * w
                acc = acc + jac * self.interp(table, k, dl - r) * self.q0(r)
            out[j] = acc
        return out

    def extend(self, k_max: int) -> None:
        while len(self.tables) <= k_max:
            k = len(self.tables) - 1
            self.tables.append(self.convolve(self.tables[k], k))

    def at_horizon(self, k: int) -> np.ndarray:
        self.extend(k)
        return self.tables[k][-1]


# ---------------------------------------------------------------------------
# solution
# ---------------------------------------------------------------------------


class VolterraSolution:
    """Tabulated heat kernel p_{t,s}(x, .) and its companions on a spatial grid.

    Kernel tables are in natural grid order (axis j runs over
    ``grid.offsets`` around x).  ``q_tables``, ``q_sum`` and ``norm_log`` are
    computed on first access.
    """

    def __init__(self, ke, cfg: VolterraConfig, grid: SpatialGrid, path: str, p0, p, euler, diagnostics: dict,
                 spectral=None):
        self.ke, self.config, self.grid, self.path = ke, cfg, grid, path
        self.p0_table, self.p_table, self.euler_table = p0, p, euler
        self.residual_table = {"r": p - p0, "rtilde": p - euler}
        self.diagnostics = dict(diagnostics)
        self._spectral = spectral
        self._series: KernelSeries | None = None
        self._q_grid: SpatialGrid | None = None
        self._q_tables: list[np.ndarray] = []
        self._norm_log: list[dict] | None = None

    # -- basic quantities ---------------------------------------------------
    @property
    def t(self) -> float:
        return self.config.t

    @property
    def s(self) -> float:
        return self.config.s

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.config.x)

    @property
    def y(self) -> np.ndarray:
        return self.grid.points()

    @property
    def mass(self) -> float:
        return float(self.p_table.sum() * self.grid.vol)

    def at_source(self) -> float:
        """p_{t,s}(x, x)."""
        idx = (self.grid.n // 2,) * self.grid.d
        return float(self.p_table[idx])

    # -- iterated kernels ----------------------------------------------------
    def _ensure_series(self) -> KernelSeries:
        if self.path != "spectral":
            raise LevyParamError("iterated kernels q^(k), k >= 1, need x-independent coefficients",
                                 stage="parametrix.convolve_step")
        if self._series is None:
            ke, u = self.ke, self.config.u
            sigma = max(levy1d.h_inverse(c, 1.0 / u) for c in ke.model.components)
            self._q_grid = SpatialGrid(self.config.x, 32.0 * sigma, 128)
            eta = _rfreqs(self._q_grid) @ self._spectral["A"]
            solver = SpectralSolver(ke.model.components, ke.model.eps, u, self.config.n_time)
            self._series = KernelSeries(solver, eta, u, ke.model.eps)
            self._psi_q = solver.psi(eta)
        return self._series

    def _q_spatial(self, Qk: np.ndarray) -> np.ndarray:
        decay = np.exp(-np.minimum(self.config.u * self._psi_q, EXP_CAP))
        return _irfft_natural(self._q_grid, Qk * decay)

    @property
    def q_grid(self) -> SpatialGrid:
        if self.path == "spectral":
            self._ensure_series()
            return self._q_grid
        return self.grid

    @property
    def q_tables(self) -> list[np.ndarray]:
        if not self._q_tables:
            if self.path == "spectral":
                for k in range(self.config.k_max + 1):
                    self._q_tables.append(self._q_spatial(self._ensure_series().at_horizon(k)))
            else:
                self._q_tables.append(q0_terms(self.ke, self.t, self.s, self.x, self.y).total)
        return self._q_tables

    @property
    def q_sum(self) -> np.ndarray:
        return np.sum(self.q_tables, axis=0)

    @property
    def norm_log(self) -> list[dict]:
        """Per-k estimates of ||q^(k)||_{inf,1} with the Gamma-factor envelope.

        The envelope for q^(k) (k + 1 factors of q0) is
        u^(-1+(k+1)eps) (c Gamma(eps))^(k+1) / Gamma((k+1) eps), with c the
        largest value of ||q0_r|| r^(1-eps) over dyadic r <= u.
        """
        if self._norm_log is None:
            eps, u = self.ke.model.eps, self.config.u
            c_fit = max(q0_l1_norm(self.ke, self.t, self.t + r, self.x).value * r ** (1.0 - eps)
                        for r in u * 2.0 ** -np.arange(5))
            log = []
            grid = self.q_grid
            for k, table in enumerate(self.q_tables):
                if k == 0:
                    norm = q0_l1_norm(self.ke, self.t, self.s, self.x).value
                else:
                    norm = float(np.abs(table).sum() * grid.vol)
                m = k + 1
                env = u ** (-1.0 + m * eps) * (c_fit * gamma_fn(eps)) ** m / gamma_fn(m * eps)
                log.append({"k": k, "norm": norm, "envelope": float(env), "c_fit": float(c_fit)})
            self._norm_log = log
        return self._norm_log

    def series_tail_bound(self) -> float:
        """Geometric tail estimate of sum_{k > k_max} ||q^(k)|| from the last two terms."""
        log = self.norm_log
        if len(log) < 2:
            return math.inf
        ratio = log[-1]["norm"] / max(log[-2]["norm"], 1e-300)
        return log[-1]["norm"] * ratio / (1.0 - ratio) if ratio < 1.0 else math.inf

    # -- export -------------------------------------------------------------
    def rows(self):
        d = self.grid.d
        Y = self.y.reshape(-1, d)
        cols = [self.p0_table.ravel(), self.p_table.ravel(), self.euler_table.ravel(),
                self.residual_table["r"].ravel(), self.residual_table["rtilde"].ravel()]
        for i in range(Y.shape[0]):
            yield [self.t, self.s, *self.x.tolist(), *Y[i].tolist(), *(c[i] for c in cols)]

    def header(self) -> list[str]:
        d = self.grid.d
        return (["t", "s"] + [f"x_{i + 1}" for i in range(d)] + [f"y_{i + 1}" for i in range(d)]
                + ["p0", "p", "ptilde", "r", "rtilde"])

    def report(self) -> dict:
        return {"path": self.path, "t": self.t, "s": self.s, "x": self.x.tolist(),
                "grid": {"half_width": self.grid.half_width, "n": self.grid.n},
                "mass": self.mass, "p_at_source": self.at_source(), **self.diagnostics}


def write_csv(sol: VolterraSolution, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(sol.header())
        for row in sol.rows():
            w.writerow([repr(float(v)) for v in row])
    return path


def _spectral_supported(fld) -> bool:
    return bool(fld.is_constant and fld.u_is_zero and not fld.time_dependent)


GRID_COVERAGE = 2.5


def default_coverage(model) -> float:
    """Coverage factor that keeps the periodic-grid solver out of its frozen layer."""
    return 20.0 if _spectral_supported(model.coefficients) else GRID_COVERAGE


def build_solution(ke, cfg: VolterraConfig) -> VolterraSolution:
    """Solve the Volterra equation for p_{t,s}(x, .) on the configured grid.

    x-independent coefficients use exact spectra in the coordinates A^T xi;
    x-dependent ones (time-independent, U = 0) use the periodic-grid solver.
    The tables are assembled as p = ptilde + (p - ptilde), with the Euler
    kernel ptilde evaluated pointwise and the difference from the solver.
    """
    fld, model = ke.field, ke.model
    if len(cfg.x) != model.d:
        raise ConfigError(f"field 'x' must have {model.d} coordinates", stage="parametrix.build_solution")
    grid = cfg.grid_for(ke)
    u, x = cfg.u, np.asarray(cfg.x)
    Y = grid.points()
    euler = ke.euler_kernel(cfg.t, cfg.s, x, Y)
    p0 = ke.zero_order_kernel(cfg.t, cfg.s, x, Y)
    xi = _rfreqs(grid)
    diag = {"method": cfg.method, "n_time": cfg.n_time, "coverage": cfg.coverage}
    if _spectral_supported(fld):
        A = fld.A(cfg.t, x)
        solver = SpectralSolver(model.components, model.eps, u, cfg.n_time)
        eta = xi @ A
        decay = np.exp(-np.minimum(u * solver.psi(eta), EXP_CAP))
        if cfg.method == "resolvent":
            m = solver.march(eta)[-1]
        else:
            terms, ok = solver.series(eta, cfg.k_max, cfg.tol)
            diag["series_terms"] = len(terms)
            diag["series_last_term"] = float(np.max(np.abs(terms[-1]) * decay))
            if not ok:
                raise ConvergenceError(f"Neumann series not converged after k_max={cfg.k_max} terms "
                                       f"(last term {diag['series_last_term']:.3e} > tol={cfg.tol:.1e})",
                                       stage="parametrix.build_solution")
            m = np.sum(terms, axis=0)
        diff = _irfft_natural(grid, decay * (m - 1.0))
        return VolterraSolution(ke, cfg, grid, "spectral", p0, euler + diff, euler, diag, {"A": A})
    if cfg.method != "resolvent":
        raise ConfigError("method 'series' needs x-independent coefficients", stage="parametrix.build_solution")
    if not fld.u_is_zero or fld.time_dependent:
        raise LevyParamError("x-dependent coefficients are supported for U = 0 and time-independent A only",
                             stage="parametrix.build_solution")
    gs = GridSolver(ke, cfg.t, cfg.s, x, cfg.n_time, grid.n, grid.half_width, n_colors=cfg.n_colors)
    p_fft = gs.solve()
    Ax = fld.A(cfg.t, x)
    eta = xi @ Ax
    psi_x = sum(symbols_for(c, model.eps).psi(eta[..., k]) for k, c in enumerate(model.components))
    euler_per = _irfft_natural(grid, np.exp(-np.minimum(u * psi_x, EXP_CAP)))
    diff = _to_natural(p_fft, grid.d) - euler_per
    diag["n_colors"] = cfg.n_colors
    diag["tau_frozen"] = gs.tau_res
    return VolterraSolution(ke, cfg, grid, "grid", p0, euler + diff, euler, diag)


def convolve_step(sol: VolterraSolution, k: int) -> np.ndarray:
    """q^(k+1)_{t,s}(x, .) on ``sol.q_grid`` from the tabulated q^(k)."""
    series = sol._ensure_series()
    if k < 0 or k > len(series.tables) - 1:
        raise ValueError(f"q^({k}) is not tabulated (have k <= {len(series.tables) - 1})")
    if k + 1 >= len(series.tables):
        series.tables.append(series.convolve(series.tables[k], k))
    out = sol._q_spatial(series.tables[k + 1][-1])
    total = float(np.abs(out).sum())
    n = sol.q_grid.n
    inner = np.abs(out)[(slice(n // 8, n - n // 8),) * sol.q_grid.d].sum()
    if total > 0 and (total - inner) / total > 0.25:
        raise LevyParamError(f"q^({k + 1}) has {(total - inner) / total:.0%} of its mass at the grid edge",
                             stage="parametrix.convolve_step")
    return out


# ---------------------------------------------------------------------------
# semigroup, box probabilities, residuals
# ---------------------------------------------------------------------------


class SemigroupAction:
    """x' -> int p_{t,s}(x', y) f(y) dy by quadrature on the solution grid.

    Spectral solutions are translation invariant, so the kernel at x' is the
    tabulated kernel shifted to x'.  Grid solutions hold p(x, .) for the
    source x only.
    """

    def __init__(self, sol: VolterraSolution, f):
        self.sol, self.f = sol, f

    def __call__(self, points) -> np.ndarray:
        sol = self.sol
        d = sol.grid.d
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, d)
        if sol.path != "spectral" and not np.allclose(flat, sol.x):
            raise LevyParamError("grid solutions act at their source point only", stage="parametrix.apply_semigroup")
        offs = sol.grid.points().reshape(-1, d) - sol.x
        kern = sol.p_table.ravel() * sol.grid.vol
        out = np.empty(flat.shape[0])
        step = max(1, _CHUNK // offs.shape[0])
        for a in range(0, flat.shape[0], step):
            blk = flat[a:a + step]
            vals = np.asarray(self.f(blk[:, None, :] + offs[None, :, :]), dtype=float)
            out[a:a + step] = vals @ kern
        return out.reshape(pts.shape[:-1])

    def on_grid(self) -> np.ndarray:
        """Pf at every point of the solution grid (spectral solutions), by FFT correlation."""
        sol = self.sol
        if sol.path != "spectral":
            raise LevyParamError("grid solutions act at their source point only", stage="parametrix.apply_semigroup")
        g, d = sol.grid, sol.grid.d
        big = (np.arange(2 * g.n) - g.n) * g.dx
        mesh = np.stack(np.meshgrid(*([big] * d), indexing="ij"), -1) + sol.x
        F = np.asarray(self.f(mesh), dtype=float)
        K = np.zeros((2 * g.n,) * d)
        K[(slice(0, g.n),) * d] = sol.p_table * g.vol
        corr = np.fft.irfftn(np.conj(np.fft.rfftn(K)) * np.fft.rfftn(F), s=(2 * g.n,) * d, axes=tuple(range(d)))
        return corr[(slice(0, g.n),) * d]


def apply_semigroup(sol: VolterraSolution, f) -> SemigroupAction:
    """P_{t,s} f as a callable; ``f`` maps points (..., d) to values."""
    return SemigroupAction(sol, f)


def box_probability(sol: VolterraSolution, lo, hi) -> float:
    """int_box p_{t,s}(x, y) dy, exact for the trigonometric interpolant of the table."""
    g = sol.grid
    lo = np.asarray(lo, dtype=float).reshape(g.d)
    hi = np.asarray(hi, dtype=float).reshape(g.d)
    if np.any(hi <= lo):
        raise ValueError("box needs lo < hi in every coordinate")
    if not g.contains(lo, hi):
        raise ConfigError("box must lie inside the solution grid", stage="parametrix.box_probability")
    F = np.fft.fftn(_to_fft_order(sol.p_table, g.d)) / g.n ** g.d
    k = 2.0 * np.pi * np.fft.fftfreq(g.n, d=g.dx)
    out = F
    for j in range(g.d):
        a, b = lo[j] - sol.x[j], hi[j] - sol.x[j]
        fac = np.full(k.shape, b - a, dtype=complex)
        nz = k != 0
        fac[nz] = (np.exp(1j * k[nz] * b) - np.exp(1j * k[nz] * a)) / (1j * k[nz])
        sh = [1] * g.d
        sh[j] = g.n
        out = out * fac.reshape(sh)
    return float(np.real(out.sum()))


def density_at(sol: VolterraSolution, y, table: str = "p") -> np.ndarray:
    """Multilinear interpolation of a kernel table at points y (..., d); zero off the grid."""
    tables = {"p": sol.p_table, "p0": sol.p0_table, "ptilde": sol.euler_table}
    if table not in tables:
        raise ConfigError(f"field 'table' must be one of {sorted(tables)}", stage="parametrix.density_at")
    g = sol.grid
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != g.d:
        raise ConfigError(f"points need {g.d} coordinates", stage="parametrix.density_at")
    axes = [c + g.offsets for c in g.center]
    interp = RegularGridInterpolator(axes, tables[table], method="linear", bounds_error=False, fill_value=0.0)
    return interp(y.reshape(-1, g.d)).reshape(y.shape[:-1])


@dataclass(frozen=True)
class ResidualReport:
    """Norms of r = p - p0 and rtilde = p - ptilde for one solve."""

    u: float
    sup_r: float
    l1_r: float
    sup_rtilde: float
    l1_rtilde: float
    G0: float
    Gtilde0: float
    diagonal_ratio: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def residual_report(sol: VolterraSolution) -> ResidualReport:
    ke, vol = sol.ke, sol.grid.vol
    r, rt = sol.residual_table["r"], sol.residual_table["rtilde"]
    u = sol.config.u
    Gt = ke.G0(u, truncated=False)
    det = abs(float(np.linalg.det(ke.field.A(sol.t, sol.x))))
    return ResidualReport(u, float(np.abs(r).max()), float(np.abs(r).sum() * vol), float(np.abs(rt).max()),
                          float(np.abs(rt).sum() * vol), ke.G0(u), Gt, sol.at_source() * det / Gt)


@dataclass
class ResidualStudy:
    reports: list
    fits: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"reports": [r.as_dict() for r in self.reports],
                "fits": {k: (v.as_dict() if v is not None else None) for k, v in self.fits.items()}}


def residual_study(ke, t: float, x, horizons, **cfg_kw) -> ResidualStudy:
    """Residual reports over several horizons s - t with log-log slope fits.

    Fits: L1 and sup/G(0) of r (bound c u^eps), L1 and sup/Gtilde(0) of rtilde
    (bound c u^eps0).  A fit is None when some value is not positive.
    """
    reports = []
    for u in horizons:
        cfg = VolterraConfig(t, t + float(u), tuple(np.atleast_1d(x)), **cfg_kw)
        reports.append(residual_report(build_solution(ke, cfg)))
    us = [r.u for r in reports]
    series = {
        "l1_r": [r.l1_r for r in reports],
        "sup_r_over_G0": [r.sup_r / r.G0 for r in reports],
        "l1_rtilde": [r.l1_rtilde for r in reports],
        "sup_rtilde_over_Gtilde0": [r.sup_rtilde / r.Gtilde0 for r in reports],
    }
    fits = {}
    for name, vals in series.items():
        try:
            fits[name] = fit_loglog(us, vals) if len(us) >= 4 else None
        except ValueError:
            fits[name] = None
    return ResidualStudy(reports, fits)
