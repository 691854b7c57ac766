"""Time discretisation and solvers for the parametrix Volterra equation.

Both solvers march the forward form

    p_{t,r} = p0_{t,r} + int_t^r  p_{t,b} (*) q0_{b,r}  db

over a uniform time mesh.  Sources inside a panel are reconstructed by
Lagrange interpolation of node values that are first divided by the
characteristic function of the frozen (Euler) law, which makes them smooth in
the time variable at every frequency.  The last panel carries the
(r - b)^(eps - 1) singularity of q0 and uses the substitution
r - b = h sigma^(1/eps).

``SpectralSolver`` handles x-independent coefficients in the coordinates
eta = A^T xi, where every symbol factorises over coordinates.
``GridSolver`` handles x-dependent coefficients on a periodic grid, with the
x-dependence of A reduced to a few "colour" parameters that are interpolated
by tensor Chebyshev-Lagrange polynomials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._special import gauss_legendre
from ._symbols import symbols_for
from .exceptions import ConvergenceError, LevyParamError

REGULAR_NODES = 4
SINGULAR_NODES = 16
STENCIL = 4
EXP_CAP = 600.0


def _lagrange(nodes: np.ndarray, x: float) -> np.ndarray:
    out = np.ones(nodes.size)
    for i in range(nodes.size):
        for j in range(nodes.size):
            if j != i:
                out[i] *= (x - nodes[j]) / (nodes[i] - nodes[j])
    return out


@dataclass(frozen=True)
class Source:
    """One quadrature source of the time integral for a given output node."""

    key: int
    delta: float
    offset: float
    weight: float
    nodes: np.ndarray
    lagrange: np.ndarray


class TimePlan:
    """Uniform mesh a_i = i h on [0, u] with product-integration sources.

    ``implicit`` lets the stencils of the last two panels use the output node
    itself (the scalar spectral solver can solve for it); otherwise they
    extrapolate from earlier nodes.
    """

    def __init__(self, u: float, n_time: int, eps: float, implicit: bool,
                 regular: int = REGULAR_NODES, singular: int = SINGULAR_NODES):
        if n_time < 4:
            raise ValueError("n_time must be >= 4")
        self.u, self.M, self.eps = float(u), int(n_time), float(eps)
        self.h = self.u / self.M
        self.nodes = self.h * np.arange(self.M + 1)
        self.implicit = bool(implicit)
        xg, wg = gauss_legendre(regular)
        xs, ws = gauss_legendre(singular)
        p = 1.0 / self.eps
        self.deltas = np.concatenate([
            np.array([(m - g) * self.h for m in range(2, self.M + 1) for g in xg]),
            self.h * xs ** p,
        ])
        self._regular = (xg, wg)
        self._singular = (xs, self.h * p * xs ** (p - 1.0) * ws)
        self.sources = [self._sources(n) for n in range(self.M + 1)]

    @property
    def n_keys(self) -> int:
        return self.deltas.size

    def _stencil(self, centre_lo: int, top: int) -> np.ndarray:
        size = min(STENCIL, top + 1)
        lo = int(np.clip(centre_lo, 0, top + 1 - size))
        return np.arange(lo, lo + size)

    def _sources(self, n: int) -> list[Source]:
        if n == 0:
            return []
        h, top = self.h, (n if self.implicit else n - 1)
        out = []
        xg, wg = self._regular
        G = xg.size
        for j in range(n - 1):
            idx = self._stencil(j - 1, top)
            for g in range(G):
                b = (j + xg[g]) * h
                key = (n - j - 2) * G + g
                out.append(Source(key, self.deltas[key], b, h * wg[g], idx, _lagrange(self.nodes[idx], b)))
        idx = self._stencil(n - 3 if self.implicit else n - 4, top)
        xs, ws = self._singular
        base = (self.M - 1) * G
        for g in range(xs.size):
            key = base + g
            delta = self.deltas[key]
            b = self.nodes[n] - delta
            out.append(Source(key, delta, b, ws[g], idx, _lagrange(self.nodes[idx], b)))
        return out

    def coefficient_matrix(self, n: int) -> np.ndarray:
        """C[key, i]: weight of node i through kernel key in output n."""
        C = np.zeros((self.n_keys, n + 1))
        for s in self.sources[n]:
            C[s.key, s.nodes] += s.weight * s.lagrange
        return C


# ---------------------------------------------------------------------------
# x-independent coefficients
# ---------------------------------------------------------------------------


class _Coordinate:
    """Symbols of one coordinate evaluated on the distinct |eta_j| values."""

    def __init__(self, sym, eta_j: np.ndarray):
        vals, inv = np.unique(np.abs(eta_j).ravel(), return_inverse=True)
        self.sym, self.vals, self.inv, self.shape = sym, vals, inv, eta_j.shape
        self.psi = sym.psi(vals)

    def expand(self, v: np.ndarray) -> np.ndarray:
        return v[self.inv].reshape(self.shape)

    def log_ratio(self, a: float) -> np.ndarray:
        """a psi - Phi_a >= 0 on the distinct values."""
        return np.minimum(a * self.psi - self.sym.exponent(a, self.vals), EXP_CAP)


class SpectralSolver:
    """Volterra solve at frequencies eta = A^T xi for constant coefficients.

    Values are returned normalised by the exact factor exp(-u psi(eta)),
    psi(eta) = sum_j psi_j(eta_j); the product p_hat = exp(-u psi) m is the
    characteristic function of p_{t,s}(x, x + A zeta) in zeta.
    """

    def __init__(self, components, eps: float, u: float, n_time: int):
        self.syms = [symbols_for(c, eps) for c in components]
        self.d = len(components)
        self.u = float(u)
        self.plan = TimePlan(u, n_time, eps, implicit=True)
        self._coef = [self.plan.coefficient_matrix(n) for n in range(self.plan.M + 1)]

    def _coords(self, eta: np.ndarray) -> list[_Coordinate]:
        eta = np.asarray(eta, dtype=float)
        if eta.shape[-1] != self.d:
            raise ValueError(f"frequencies must have trailing dimension {self.d}")
        return [_Coordinate(self.syms[j], eta[..., j]) for j in range(self.d)]

    def psi(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        return sum(self.syms[j].psi(eta[..., j]) for j in range(self.d))

    def _kernels(self, coords: list[_Coordinate]):
        """Normalised q0 for every delta key and normalised p0 at every node."""
        plan = self.plan
        shape = coords[0].shape
        Q = np.empty((plan.n_keys,) + shape)
        for k, delta in enumerate(plan.deltas):
            Q[k] = self._q_norm(coords, delta)
        P0 = np.empty((plan.M + 1,) + shape)
        P0[0] = 1.0
        for n in range(1, plan.M + 1):
            P0[n] = self._p0_norm(coords, plan.nodes[n])
        return Q, P0

    def _p0_norm(self, coords, a: float) -> np.ndarray:
        acc = 0.0
        for c in coords:
            acc = acc + c.expand(c.log_ratio(a))
        return np.exp(np.minimum(acc, EXP_CAP))

    def _q_norm(self, coords, a: float) -> np.ndarray:
        D = 0.0
        for c in coords:
            D = D + c.expand(c.sym.big_jump(a, c.vals))
        return -D * self._p0_norm(coords, a)

    def march(self, eta) -> np.ndarray:
        """Normalised solution m_n(eta) at every node, shape (M+1,) + eta.shape[:-1]."""
        coords = self._coords(eta)
        Q, P0 = self._kernels(coords)
        shape = coords[0].shape
        m = np.empty((self.plan.M + 1,) + shape)
        m[0] = 1.0
        flatQ = Q.reshape(Q.shape[0], -1)
        for n in range(1, self.plan.M + 1):
            C = (self._coef[n].T @ flatQ).reshape((n + 1,) + shape)
            rhs = P0[n] + np.einsum("i...,i...->...", C[:n], m[:n])
            m[n] = rhs / (1.0 - C[n])
        return m

    def series(self, eta, k_max: int, tol: float):
        """Neumann terms of the same discrete equation.

        Returns (terms, converged): terms[k] is the normalised contribution
        p0 (*) q^(k-1) at the final node (terms[0] is p0).  The sum stops when
        two consecutive term estimates fall below ``tol`` (k >= 2).
        """
        coords = self._coords(eta)
        Q, P0 = self._kernels(coords)
        shape = coords[0].shape
        flatQ = Q.reshape(Q.shape[0], -1)
        Cs = [None] + [(self._coef[n].T @ flatQ).reshape((n + 1,) + shape) for n in range(1, self.plan.M + 1)]
        decay = np.exp(-np.minimum(self.u * self.psi(eta), EXP_CAP))
        mu = P0.copy()
        terms = [mu[-1].copy()]
        small = 0
        for _ in range(k_max):
            new = np.zeros_like(mu)
            for n in range(1, self.plan.M + 1):
                new[n] = np.einsum("i...,i...->...", Cs[n], mu[: n + 1])
            mu = new
            terms.append(mu[-1].copy())
            size = float(np.max(np.abs(mu[-1]) * decay))
            small = small + 1 if size < tol else 0
            if small >= 2 and len(terms) > 2:
                return terms, True
        return terms, False


# ---------------------------------------------------------------------------
# x-dependent coefficients
# ---------------------------------------------------------------------------


def _chebyshev_nodes(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1 or hi - lo < 1e-14:
        return np.array([0.5 * (lo + hi)])
    k = np.arange(n)
    return 0.5 * (lo + hi) - 0.5 * (hi - lo) * np.cos((2 * k + 1) * np.pi / (2 * n))


def _basis_1d(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Lagrange basis values, shape (len(nodes),) + x.shape."""
    out = np.ones((nodes.size,) + x.shape)
    for i in range(nodes.size):
        for j in range(nodes.size):
            if j != i:
                out[i] *= (x - nodes[j]) / (nodes[i] - nodes[j])
    return out


class ColorBasis:
    """Tensor Chebyshev-Lagrange interpolation over colour parameters."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, n_colors: int):
        self.axes = [_chebyshev_nodes(a, b, n_colors) for a, b in zip(lo, hi)]
        grids = np.meshgrid(*self.axes, indexing="ij") if self.axes else []
        self.points = (np.stack([g.ravel() for g in grids], -1) if self.axes else np.zeros((1, 0)))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def weights(self, P: np.ndarray) -> np.ndarray:
        """Basis values at parameters P (..., m), shape (size,) + P.shape[:-1]."""
        P = np.asarray(P, dtype=float)
        out = np.ones((1,) + P.shape[:-1])
        for k, ax in enumerate(self.axes):
            b = _basis_1d(ax, P[..., k])
            out = (out[:, None] * b[None]).reshape((-1,) + P.shape[:-1])
        return out


class GridSolver:
    """Volterra solve on a periodic grid around x for x-dependent coefficients.

    Transfer of a source density zeta through q0_{b,r} (U = 0):

        g(y) = IFT[ P_y(xi) (Lzeta(xi) + S_{R,y}(xi) zeta_hat(xi)) ](y),

    with P_y the transform of the frozen kernel p^y_{b,r}, S_{R,y} the
    truncated exponent through A_r(y), and Lzeta the transform of
    -sum_k psi_k(xi . a_k(v)) zeta(v).  Both v- and y-dependence go through
    colours.  Nodes closer to t than ``tau_res`` are not resolvable on the grid
    and use the frozen law at (t, x).
    """

    def __init__(self, ke, t: float, s: float, x, n_time: int, n_space: int, half_width: float,
                 n_colors: int = 3, tau_res: float | None = None):
        model = ke.model
        self.ke, self.model, self.field = ke, model, model.coefficients
        if not self.field.u_is_zero:
            raise LevyParamError("the grid solver supports U = 0 only", stage="parametrix.build_solution")
        self.d = model.d
        self.t, self.s = float(t), float(s)
        self.x = np.asarray(x, dtype=float)
        self.N, self.L = int(n_space), float(half_width)
        self.dx = 2.0 * self.L / self.N
        self.syms = [symbols_for(c, model.eps) for c in model.components]
        self.plan = TimePlan(self.s - self.t, n_time, model.eps, implicit=True)
        # grid offsets in FFT order and real-FFT frequencies
        off = np.fft.fftfreq(self.N) * self.N * self.dx
        self.offsets = off
        mesh = np.meshgrid(*([off] * self.d), indexing="ij")
        self.w = np.stack(mesh, -1)
        self.y = self.x + self.w
        k_full = 2.0 * np.pi * np.fft.fftfreq(self.N, d=self.dx)
        k_half = 2.0 * np.pi * np.fft.rfftfreq(self.N, d=self.dx)
        fmesh = np.meshgrid(*([k_full] * (self.d - 1) + [k_half]), indexing="ij")
        self.xi = np.stack(fmesh, -1)
        alpha = min(c.alpha_idx for c in model.components)
        self.tau_res = float(tau_res) if tau_res is not None else (2.0 * self.dx) ** alpha
        self.n_colors = int(n_colors)
        self.vol = self.dx ** self.d

    # -- transforms -------------------------------------------------------
    def fwd(self, f: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(f) * self.vol

    def inv(self, F: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(F, s=(self.N,) * self.d, axes=tuple(range(-self.d, 0))) / self.vol

    # -- symbols ----------------------------------------------------------
    def _psi_dir(self, A: np.ndarray) -> np.ndarray:
        """sum_k psi_k((A^T xi)_k) for one matrix A."""
        eta = self.xi @ A
        return sum(self.syms[k].psi(eta[..., k]) for k in range(self.d))

    def _frozen_symbols(self, A: np.ndarray, delta: float):
        """(P_hat, S_R * P_hat) for the frozen kernel through A over horizon delta."""
        eta = self.xi @ A
        Phi = 0.0
        S = 0.0
        for k in range(self.d):
            sym = self.syms[k]
            e = np.abs(eta[..., k])
            Phi = Phi + sym.exponent(delta, e)
            S = S + sym.psi_trunc(e, sym.radius(delta))
        P = np.exp(-Phi)
        return P.astype(np.float32), (S * P).astype(np.float32)

    def _colour_box(self, r: float) -> tuple[np.ndarray, np.ndarray]:
        P = self.field.color_params(r, self.y)
        m = P.shape[-1]
        if m == 0:
            return np.zeros(0), np.zeros(0)
        flat = P.reshape(-1, m)
        return flat.min(0), flat.max(0)

    def _q_frozen(self, psi_n: np.ndarray, Ax: np.ndarray, delta: float) -> np.ndarray:
        """q0 symbol of the kernel frozen at x, scaled by exp(delta psi_n)."""
        eta = self.xi @ Ax
        D = 0.0
        lr = 0.0
        for k in range(self.d):
            sym = self.syms[k]
            e = np.abs(eta[..., k])
            D = D + sym.big_jump(delta, e)
            lr = lr + sym.exponent(delta, e)
        return -D * np.exp(np.minimum(delta * psi_n - lr, EXP_CAP))

    # -- solve ------------------------------------------------------------
    def solve(self, max_iter: int = 12, tol: float = 1e-6) -> np.ndarray:
        """p_{t,s}(x, y) on the grid ``self.y``.

        The contribution of the output node to its own time integral is
        implicit: the part frozen at x is inverted exactly in Fourier space
        and the x-dependent remainder is removed by fixed-point iteration.
        Symbols are cached in single precision, so ``tol`` (relative to max p)
        should stay above about 1e-7.
        """
        plan, fld, d = self.plan, self.field, self.d
        t = self.t
        if fld.time_dependent:
            raise LevyParamError("the grid solver needs time-independent coefficients; "
                                 "time-dependent x-independent fields use the spectral path",
                                 stage="parametrix.build_solution")
        lo, hi = self._colour_box(t)
        basis = ColorBasis(lo, hi, self.n_colors)
        mats = fld.from_params(t, basis.points)
        Ax = fld.A(t, self.x)
        psi_x = self._psi_dir(Ax)
        eta_c = [self.xi @ mats[c] for c in range(basis.size)]
        psi_v = [sum(self.syms[k].psi(eta_c[c][..., k]) for k in range(d)) for c in range(basis.size)]
        wv = basis.weights(fld.color_params(t, self.y))
        wx = basis.weights(fld.color_params(t, self.x))
        # node spectra are normalised by exp(a psi_n) with psi_n the smallest
        # symbol in play, so every transfer factor stays bounded
        psi_n = psi_x
        for c in range(basis.size):
            psi_n = np.minimum(psi_n, psi_v[c])
        L_frozen = -sum(float(wx[c]) * psi_v[c] for c in range(basis.size))
        shape = self.xi.shape[:-1]
        nodes_Z = np.empty((plan.M + 1,) + shape, dtype=complex)
        nodes_L = np.empty((plan.M + 1,) + shape, dtype=complex)
        resolved = plan.nodes >= self.tau_res
        symbols: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        q_x: dict[int, np.ndarray] = {}
        exact_frozen = basis.size == 1

        def sym(key, c, delta):
            if (key, c) not in symbols:
                symbols[(key, c)] = self._frozen_symbols(mats[c], delta)
            return symbols[(key, c)]

        def spectra(p):
            Z = self.fwd(p)
            Lz = np.zeros(shape, dtype=complex)
            for c in range(basis.size):
                Lz -= psi_v[c] * self.fwd(wv[c] * p)
            return Z, Lz

        def transfer(acc):
            g = np.zeros((self.N,) * d)
            for c in range(basis.size):
                g += wv[c] * self.inv(acc[c])
            return g

        p_last = None
        for n in range(plan.M + 1):
            a = plan.nodes[n]
            if n == 0 or not resolved[n]:
                z = np.exp(-a * (psi_x - psi_n))
                nodes_Z[n] = z
                nodes_L[n] = L_frozen * z
                continue
            acc = [np.zeros(shape, dtype=complex) for _ in range(basis.size)]
            own = []
            for src in plan.sources[n]:
                lw = src.lagrange.copy()
                hit = src.nodes == n
                if hit.any():
                    own.append((src, float(lw[hit][0])))
                    lw[hit] = 0.0
                Zs = np.tensordot(lw, nodes_Z[src.nodes], axes=1)
                Ls = np.tensordot(lw, nodes_L[src.nodes], axes=1)
                scale = np.exp(-np.minimum(src.offset * psi_n, EXP_CAP))
                Zs *= scale
                Ls *= scale
                for c in range(basis.size):
                    P, SP = sym(src.key, c, src.delta)
                    acc[c] += src.weight * (P * Ls + SP * Zs)
            rhs = self.ke.zero_order_kernel(t, t + a, self.x, self.y) + transfer(acc)
            Cx = np.zeros(shape)
            for src, lam in own:
                if src.key not in q_x:
                    q_x[src.key] = self._q_frozen(psi_n, Ax, src.delta)
                Cx += src.weight * lam * q_x[src.key]
            denom = 1.0 - Cx
            rhs_hat = self.fwd(rhs)
            p = self.inv(rhs_hat / denom)
            if not exact_frozen:
                for _ in range(max_iter):
                    Z, Lz = spectra(p)
                    acc = [np.zeros(shape, dtype=complex) for _ in range(basis.size)]
                    for src, lam in own:
                        f = src.weight * lam * np.exp(np.minimum(src.delta * psi_n, EXP_CAP))
                        for c in range(basis.size):
                            P, SP = sym(src.key, c, src.delta)
                            acc[c] += f * (P * Lz + SP * Z)
                    resid_hat = self.fwd(transfer(acc)) - Cx * Z
                    p_new = self.inv((rhs_hat + resid_hat) / denom)
                    change = float(np.max(np.abs(p_new - p)))
                    p = p_new
                    if change <= tol * max(1.0, float(np.max(np.abs(p)))):
                        break
                else:
                    raise ConvergenceError("implicit grid step did not converge",
                                           stage="parametrix.build_solution")
            Z, Lz = spectra(p)
            norm = np.exp(np.minimum(a * psi_n, EXP_CAP))
            nodes_Z[n] = Z * norm
            nodes_L[n] = Lz * norm
            p_last = p
        if p_last is None:
            raise LevyParamError("grid too coarse: every time node lies in the frozen layer",
                                 stage="parametrix.build_solution")
        return p_last
