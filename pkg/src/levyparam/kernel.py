"""d-dimensional product densities, coefficient fields and frozen kernels.

The noise is cylindrical: Z = (Z^1, ..., Z^d) with independent coordinates.
For a horizon u the truncated product density is

    G_u(x) = g_u^(1)(x_1) ... g_u^(d)(x_d),

and G~_u is the same product built from the untruncated laws.  A jump of
the SDE is V_t(x, z) = A_t(x) z + U_t(x, z).  Freezing the coefficients at
(s, y) gives

    p^y_{t,s}(w) = G_{s-t}(A_s(y)^{-1} w) / |det A_s(y)|,

and the Euler kernel freezes them at the start point with G~ instead of G.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn

from . import levy1d
from .exceptions import AdmissibilityError, ConfigError, LevyParamError

__all__ = [
    "CoefficientField",
    "ConstantField",
    "RotationField",
    "HolderTimeField",
    "ShearField",
    "CallableField",
    "make_field",
    "FIELD_REGISTRY",
    "ModelSpec",
    "build_model",
    "load_model",
    "model_from_dict",
    "ConditionReport",
    "compute_eps0",
    "condition_D_report",
    "check_condition_D",
    "lipschitz_C8_bound",
    "OperatorNormReport",
    "A_operator_norm",
    "KernelEvaluator",
    "product_density",
    "truncation_matrix",
    "frozen_kernel",
    "zero_order_kernel",
    "euler_kernel",
]

EPS_CAP = 1.0 / 8.0
_DET_SLACK = 1e-12


# ---------------------------------------------------------------------------
# coefficient fields
# ---------------------------------------------------------------------------


class CoefficientField:
    """Jump coefficient V_t(x, z) = A_t(x) z + U_t(x, z) with declared (C) data.

    Subclasses implement ``color_params`` (the x-dependence reduced to a few
    scalars) and ``from_params`` (matrix from those scalars); this lets the
    solvers interpolate A over a small parameter set.
    """

    name = "field"
    n_params = 0
    is_constant = False
    time_dependent = False

    def __init__(self, d: int, *, gamma1: float, gamma2: float, gamma3: float,
                 C3: float, C4: float, C5: float, C6: float, C7: float):
        if d < 1:
            raise AdmissibilityError("dimension must be >= 1", stage="kernel.CoefficientField")
        self.d = int(d)
        self.gamma1, self.gamma2, self.gamma3 = float(gamma1), float(gamma2), float(gamma3)
        self.C3, self.C4, self.C5, self.C6, self.C7 = map(float, (C3, C4, C5, C6, C7))
        if not (0.0 < self.gamma1 <= 1.0 and 0.0 < self.gamma2 <= 1.0):
            raise AdmissibilityError("gamma1, gamma2 must lie in (0, 1]", stage="kernel.CoefficientField")
        if not self.C4 > 0.0:
            raise AdmissibilityError("C4 must be positive", stage="kernel.CoefficientField")

    # -- overridable pieces -------------------------------------------------
    def color_params(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (0,))

    def from_params(self, t: float, P) -> np.ndarray:
        raise NotImplementedError

    @property
    def u_is_zero(self) -> bool:
        return True

    def U(self, t: float, x, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.zeros(np.broadcast_shapes(np.shape(x), z.shape))

    def params(self) -> dict:
        return {}

    # -- derived ------------------------------------------------------------
    def A_raw(self, t: float, x) -> np.ndarray:
        return self.from_params(t, self.color_params(t, x))

    def A(self, t: float, x) -> np.ndarray:
        """A_t(x) for x of shape (..., d), validated against C3 and C4."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.d,):
            raise ValueError(f"expected points of dimension {self.d}, got shape {x.shape}")
        M = self.A_raw(t, x)
        self._validate(M)
        return M

    def _validate(self, M: np.ndarray) -> None:
        if np.any(np.abs(M) > self.C3 * (1.0 + _DET_SLACK)):
            raise AdmissibilityError(f"entry of A exceeds C3={self.C3}", stage="kernel.CoefficientField.A")
        det = np.abs(np.linalg.det(M))
        if np.any(det < self.C4 * (1.0 - _DET_SLACK)):
            raise AdmissibilityError(
                f"|det A| = {float(np.min(det)):.6g} below C4={self.C4}", stage="kernel.CoefficientField.A"
            )

    def V(self, t: float, x, z) -> np.ndarray:
        """Jump map V_t(x, z) = A_t(x) z + U_t(x, z)."""
        z = np.asarray(z, dtype=float)
        out = np.einsum("...ij,...j->...i", self.A(t, x), z)
        if not self.u_is_zero:
            out = out + self.U(t, x, z)
        return out

    def describe(self) -> dict:
        return {"name": self.name, "params": self.params()}


class ConstantField(CoefficientField):
    """A_t(x) = matrix."""

    name = "constant"
    is_constant = True

    def __init__(self, matrix, gamma3: float = 3.0):
        M = np.array(matrix, dtype=float, ndmin=2)
        if M.shape[0] != M.shape[1]:
            raise AdmissibilityError("coefficient matrix must be square", stage="kernel.ConstantField")
        det = abs(float(np.linalg.det(M)))
        if det == 0.0:
            raise AdmissibilityError("coefficient matrix is singular", stage="kernel.ConstantField")
        self.matrix = M
        super().__init__(M.shape[0], gamma1=1.0, gamma2=1.0, gamma3=gamma3,
                         C3=float(np.max(np.abs(M))), C4=det, C5=0.0, C6=0.0, C7=0.0)

    def from_params(self, t, P):
        P = np.asarray(P, dtype=float)
        return np.broadcast_to(self.matrix, P.shape[:-1] + self.matrix.shape).copy()

    def params(self):
        return {"matrix": self.matrix.tolist()}


def rotation_matrix(theta) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    c, s = np.cos(th), np.sin(th)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


class RotationField(CoefficientField):
    """Rotation by theta(x) = base + theta0 (sin x_1 + sin x_2)/sqrt(2), d = 2."""

    name = "rotation"
    n_params = 1

    def __init__(self, theta0: float, base: float = 0.0, gamma3: float = 3.0):
        self.theta0, self.base = float(theta0), float(base)
        # each entry is 1-Lipschitz in theta and theta is theta0-Lipschitz in x
        super().__init__(2, gamma1=1.0, gamma2=1.0, gamma3=gamma3,
                         C3=1.0, C4=1.0, C5=abs(self.theta0), C6=0.0, C7=0.0)
        self.is_constant = self.theta0 == 0.0

    def color_params(self, t, x):
        x = np.asarray(x, dtype=float)
        th = self.base + self.theta0 * (np.sin(x[..., 0]) + np.sin(x[..., 1])) / math.sqrt(2.0)
        return th[..., None]

    def from_params(self, t, P):
        return rotation_matrix(np.asarray(P, dtype=float)[..., 0])

    def params(self):
        return {"theta0": self.theta0, "base": self.base}


class HolderTimeField(CoefficientField):
    """A_t = [[1, t^gamma], [t^gamma, 1]] on [0, horizon], horizon < 1."""

    name = "holder_time"
    is_constant = False
    time_dependent = True

    def __init__(self, gamma: float, horizon: float = 0.5, gamma3: float = 3.0):
        if not 0.0 < horizon < 1.0:
            raise AdmissibilityError("horizon must lie in (0, 1)", stage="kernel.HolderTimeField")
        if not 0.0 < gamma <= 1.0:
            raise AdmissibilityError("gamma must lie in (0, 1]", stage="kernel.HolderTimeField")
        self.gamma, self.horizon = float(gamma), float(horizon)
        super().__init__(2, gamma1=1.0, gamma2=self.gamma, gamma3=gamma3,
                         C3=1.0, C4=1.0 - horizon ** (2.0 * gamma), C5=0.0, C6=1.0, C7=0.0)

    def from_params(self, t, P):
        if not 0.0 <= t <= self.horizon:
            raise AdmissibilityError(f"time {t} outside [0, {self.horizon}]", stage="kernel.HolderTimeField")
        P = np.asarray(P, dtype=float)
        a = t ** self.gamma
        return np.broadcast_to(np.array([[1.0, a], [a, 1.0]]), P.shape[:-1] + (2, 2)).copy()

    def params(self):
        return {"gamma": self.gamma, "horizon": self.horizon}


class ShearField(CoefficientField):
    """A(x) = [[1, rho sin x_2], [rho sin x_1, 1]], d = 2, 0 <= rho < 1."""

    name = "shear"
    n_params = 2

    def __init__(self, rho: float, gamma3: float = 3.0):
        if not 0.0 <= rho < 1.0:
            raise AdmissibilityError("shear strength rho must lie in [0, 1)", stage="kernel.ShearField")
        self.rho = float(rho)
        super().__init__(2, gamma1=1.0, gamma2=1.0, gamma3=gamma3,
                         C3=1.0, C4=1.0 - self.rho ** 2, C5=self.rho, C6=0.0, C7=0.0)
        self.is_constant = self.rho == 0.0

    def color_params(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.stack([np.sin(x[..., 0]), np.sin(x[..., 1])], -1)

    def from_params(self, t, P):
        P = np.asarray(P, dtype=float)
        one = np.ones(P.shape[:-1])
        r = self.rho
        return np.stack([np.stack([one, r * P[..., 1]], -1), np.stack([r * P[..., 0], one], -1)], -2)

    def params(self):
        return {"rho": self.rho}


class CallableField(CoefficientField):
    """User-supplied A (and optionally U) with declared (C) constants."""

    name = "callable"

    def __init__(self, d: int, A_fn: Callable, *, U_fn: Callable | None = None, gamma1: float = 1.0,
                 gamma2: float = 1.0, gamma3: float = 3.0, C3: float, C4: float, C5: float = 0.0,
                 C6: float = 0.0, C7: float = 0.0, constant: bool = False):
        super().__init__(d, gamma1=gamma1, gamma2=gamma2, gamma3=gamma3, C3=C3, C4=C4, C5=C5, C6=C6, C7=C7)
        self._A_fn, self._U_fn = A_fn, U_fn
        self.is_constant = bool(constant)
        self.n_params = d

    def color_params(self, t, x):
        return np.asarray(x, dtype=float)

    def from_params(self, t, P):
        P = np.asarray(P, dtype=float)
        flat = P.reshape(-1, self.d)
        out = np.array([np.asarray(self._A_fn(t, p), dtype=float) for p in flat])
        return out.reshape(P.shape[:-1] + (self.d, self.d))

    @property
    def u_is_zero(self) -> bool:
        return self._U_fn is None

    def U(self, t, x, z):
        if self._U_fn is None:
            return super().U(t, x, z)
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(x.shape, z.shape)
        xb = np.broadcast_to(x, shape).reshape(-1, self.d)
        zb = np.broadcast_to(z, shape).reshape(-1, self.d)
        out = np.array([np.asarray(self._U_fn(t, a, b), dtype=float) for a, b in zip(xb, zb)])
        bound = self.C7 * np.linalg.norm(zb, axis=-1) ** self.gamma3
        if np.any(np.linalg.norm(out, axis=-1) > bound * (1.0 + 1e-12) + 1e-300):
            raise AdmissibilityError(f"|U| exceeds C7|z|^gamma3 with C7={self.C7}", stage="kernel.CallableField.U")
        return out.reshape(shape)


def _identity_field(d: int = 2, gamma3: float = 3.0) -> ConstantField:
    return ConstantField(np.eye(int(d)), gamma3=gamma3)


def _constant_field(matrix, gamma3: float = 3.0) -> ConstantField:
    return ConstantField(matrix, gamma3=gamma3)


FIELD_REGISTRY: dict[str, Callable[..., CoefficientField]] = {
    "identity": _identity_field,
    "constant": _constant_field,
    "rotation": RotationField,
    "holder_time": HolderTimeField,
    "shear": ShearField,
}


def make_field(name: str, **params) -> CoefficientField:
    if name not in FIELD_REGISTRY:
        raise ConfigError(f"unknown coefficient field {name!r}; known: {sorted(FIELD_REGISTRY)}",
                          stage="kernel.make_field")
    try:
        return FIELD_REGISTRY[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for field {name!r}: {exc}", stage="kernel.make_field") from exc


# ---------------------------------------------------------------------------
# index conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    """Per-inequality outcome: (label, lhs, rhs, margin = rhs - lhs, passed)."""

    entries: tuple

    @property
    def passed(self) -> bool:
        return all(e[4] for e in self.entries)

    def failures(self) -> list[str]:
        return [e[0] for e in self.entries if not e[4]]

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [{"inequality": a, "lhs": b, "rhs": c, "margin": m, "passed": p} for a, b, c, m, p in self.entries],
        }


def condition_D_report(alpha: float, beta: float, gamma1: float, gamma2: float, gamma3: float) -> ConditionReport:
    """Strict index inequalities for unequal coordinate scalings."""
    rows = [
        ("beta/alpha < 1 + gamma1", beta / alpha, 1.0 + gamma1),
        ("1/alpha - 1/beta < gamma2", 1.0 / alpha - 1.0 / beta, gamma2),
        ("beta/alpha < gamma3", beta / alpha, gamma3),
    ]
    return ConditionReport(tuple((lab, float(l), float(r), float(r - l), bool(l < r)) for lab, l, r in rows))


def check_condition_D(model=None, **indices) -> ConditionReport:
    """Report for a ModelSpec, or for explicit alpha/beta/gamma1/gamma2/gamma3."""
    if model is not None:
        f = model.coefficients
        return condition_D_report(model.alpha, model.beta, f.gamma1, f.gamma2, f.gamma3)
    return condition_D_report(**indices)


def compute_eps0(case: str, alpha: float, beta: float, gamma1: float, gamma2: float, gamma3: float, d: int) -> float:
    """Largest admissible truncation exponent for the parametrix estimates."""
    if case not in ("A", "B"):
        raise ValueError(f"case must be 'A' or 'B', got {case!r}")
    if not 0.0 < alpha <= beta < 2.0 or d < 1:
        raise AdmissibilityError("need 0 < alpha <= beta < 2 and d >= 1", stage="kernel.compute_eps0")
    if not gamma3 > max(1.0, beta):
        raise AdmissibilityError(f"gamma3 > max(1, beta) violated: gamma3={gamma3}, beta={beta}",
                                 stage="kernel.compute_eps0")
    if not (0.0 < gamma1 <= 1.0 and 0.0 < gamma2 <= 1.0):
        raise AdmissibilityError("gamma1, gamma2 must lie in (0, 1]", stage="kernel.compute_eps0")
    a, b, g1, g2, g3 = map(float, (alpha, beta, gamma1, gamma2, gamma3))
    if case == "A":
        q = g1 / (b * (1.0 + g1))
        terms = (
            g1 * a / (2.0 * (d + 3) * b),
            g2 * a / (2.0 * (d + 3)),
            q / (2.0 + 2.0 / a + q),
            (g3 - 1.0) / (g3 - 1.0 + b * (1.0 + (d + 1) / a)),
        )
    else:
        rep = condition_D_report(a, b, g1, g2, g3)
        if not rep.passed:
            raise AdmissibilityError("condition (D) violated: " + "; ".join(rep.failures()),
                                     stage="kernel.compute_eps0")
        q = 1.0 / b - 1.0 / ((1.0 + g1) * a)
        scale = 2.0 * (d + 3) / a
        terms = (
            ((1.0 + g1) / b - 1.0 / a) / scale,
            (g2 - (1.0 / a - 1.0 / b)) / scale,
            q / (2.0 + 2.0 / a + q),
            (g3 - b / a) / (g3 + b * (1.0 + d / a)),
        )
    eps0 = min(terms)
    if not eps0 > 0.0:
        raise AdmissibilityError(f"non-positive eps0 terms {terms}", stage="kernel.compute_eps0")
    return float(eps0)


def lipschitz_C8_bound(rho: float, d: int) -> float:
    """d!/(1 - rho)^d, an admissible constant when the jump maps are rho-Lipschitz perturbations."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"Lipschitz constant rho={rho} must lie in [0, 1)")
    if d < 1:
        raise ValueError("d must be >= 1")
    return math.factorial(int(d)) / (1.0 - rho) ** d


@dataclass(frozen=True)
class OperatorNormReport:
    value: float
    bound: float
    parts: dict

    def as_dict(self) -> dict:
        return {"value": self.value, "bound": self.bound, "parts": dict(self.parts)}


def _op_norm(M: np.ndarray) -> np.ndarray:
    return np.linalg.norm(M, ord=2, axis=(-2, -1))


def A_operator_norm(fld: CoefficientField, x_grid, t_grid=(0.0,)) -> OperatorNormReport:
    """Empirical ||A|| over a grid (five suprema) and its closed-form upper bound."""
    X = np.asarray(x_grid, dtype=float).reshape(-1, fld.d)
    T = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if X.shape[0] == 0 or T.size == 0:
        raise ValueError("grid must be nonempty")
    At = np.stack([fld.A(float(t), X) for t in T])  # (nt, nx, d, d)
    AT = np.swapaxes(At, -1, -2)
    ATinv = np.linalg.inv(AT)
    parts = {"sup|A^T|": float(np.max(_op_norm(AT))), "sup|A^-1|": float(np.max(_op_norm(np.linalg.inv(At))))}
    hx, hxi = 0.0, 0.0
    if X.shape[0] > 1:
        i, j = np.triu_indices(X.shape[0], 1)
        dist = np.linalg.norm(X[i] - X[j], axis=-1) ** fld.gamma1
        ok = dist > 0
        if np.any(ok):
            hx = float(np.max(_op_norm(AT[:, i] - AT[:, j])[:, ok] / dist[ok]))
            hxi = float(np.max(_op_norm(ATinv[:, i] - ATinv[:, j])[:, ok] / dist[ok]))
    parts["holder_x(A^T)"] = hx
    parts["holder_x(A^-T)"] = hxi
    ht = 0.0
    if T.size > 1:
        a, b = np.triu_indices(T.size, 1)
        dt = np.abs(T[a] - T[b]) ** fld.gamma2
        ok = dt > 0
        if np.any(ok):
            ht = float(np.max(_op_norm(ATinv[a] - ATinv[b])[ok] / dt[ok, None]))
    parts["holder_t(A^-T)"] = ht
    d = fld.d
    C3, C4, C5, C6 = fld.C3, fld.C4, fld.C5, fld.C6
    inv = C3 ** (d - 1) / C4
    bound = (C3 + C5 + C6) * d + inv * d + (C5 + C6) * inv * d * d
    return OperatorNormReport(max(parts.values()), float(bound), parts)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def kappa(components: Sequence[levy1d.LevyComponent], u: float) -> dict:
    """kappa(u) = (u, h_i(1), h_i^-1(1), h_i^-1(1/u))."""
    return {
        "u": float(u),
        "h(1)": [float(c.h_at_1) for c in components],
        "h^-1(1)": [float(levy1d.h_inverse(c, 1.0)) for c in components],
        "h^-1(1/u)": [float(levy1d.h_inverse(c, 1.0 / u)) for c in components],
    }


@dataclass(frozen=True)
class ModelSpec:
    d: int
    components: tuple
    coefficients: CoefficientField
    case: str
    eps: float
    eps0: float
    alpha: float
    beta: float
    kappa_tau: dict = field(default_factory=dict, compare=False)
    source: dict = field(default_factory=dict, compare=False, repr=False)


def build_model(components, coefficients: CoefficientField, case: str | None = None, eps: float | None = None,
                tau: float = 1.0, source: dict | None = None) -> ModelSpec:
    comps = tuple(components)
    d = len(comps)
    if d != coefficients.d:
        raise AdmissibilityError(f"{d} noise components but coefficient field has dimension {coefficients.d}",
                                 stage="kernel.build_model")
    identical = all(c == comps[0] for c in comps)
    if case is None:
        case = "A" if identical else "B"
    if case == "A" and not identical:
        raise AdmissibilityError("case A requires identical components", stage="kernel.build_model")
    alpha = min(c.alpha_idx for c in comps)
    beta = max(c.beta_idx for c in comps)
    f = coefficients
    if case == "B":
        rep = condition_D_report(alpha, beta, f.gamma1, f.gamma2, f.gamma3)
        if not rep.passed:
            raise AdmissibilityError("condition (D) violated: " + "; ".join(rep.failures()), stage="kernel.build_model")
    eps0 = compute_eps0(case, alpha, beta, f.gamma1, f.gamma2, f.gamma3, d)
    if eps is None:
        eps = min(eps0, EPS_CAP)
    if not 0.0 < eps <= eps0:
        raise AdmissibilityError(f"eps={eps} must lie in (0, eps0={eps0:.6g}]", stage="kernel.build_model")
    return ModelSpec(d, comps, coefficients, case, float(eps), eps0, float(alpha), float(beta),
                     kappa(comps, tau), dict(source or {}))


# -- JSON configuration -------------------------------------------------------

_TOP_KEYS = {"d", "case", "eps", "tau", "components", "coefficients"}
_COMPONENT_KEYS = {"stable": {"type", "alpha", "c", "declared_alpha"},
                   "discretized_stable": {"type", "alpha", "c", "decay", "declared_alpha"}}
_COEF_KEYS = {"name", "params"}


def _key_line(text: str | None, key: str) -> str:
    if not text:
        return ""
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return f" (line {text.count(chr(10), 0, m.start()) + 1})" if m else ""


def _need(obj: Mapping, key: str, path: str, text: str | None):
    if key not in obj:
        raise ConfigError(f"{path}: missing required key {key!r}", stage="kernel.load_model")
    return obj[key]


def _reject_unknown(obj: Mapping, allowed: set, path: str, text: str | None) -> None:
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}: unknown key{_key_line(text, k)}; allowed: {sorted(allowed)}",
                              stage="kernel.load_model")


def _number(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}", stage="kernel.load_model")
    return float(v)


def model_from_dict(cfg: Mapping, text: str | None = None) -> ModelSpec:
    """Validate a configuration mapping and build the model."""
    if not isinstance(cfg, Mapping):
        raise ConfigError("configuration must be a JSON object", stage="kernel.load_model")
    _reject_unknown(cfg, _TOP_KEYS, "$", text)
    d = _need(cfg, "d", "$", text)
    if isinstance(d, bool) or not isinstance(d, int) or d < 1:
        raise ConfigError(f"$.d: expected a positive integer, got {d!r}", stage="kernel.load_model")
    comps_cfg = _need(cfg, "components", "$", text)
    if not isinstance(comps_cfg, list) or len(comps_cfg) != d:
        raise ConfigError(f"$.components: expected a list of {d} components", stage="kernel.load_model")
    comps = []
    for i, cc in enumerate(comps_cfg):
        path = f"$.components[{i}]"
        if not isinstance(cc, Mapping):
            raise ConfigError(f"{path}: expected an object", stage="kernel.load_model")
        kind = _need(cc, "type", path, text)
        if kind not in _COMPONENT_KEYS:
            raise ConfigError(f"{path}.type: unknown component type {kind!r}; known: {sorted(_COMPONENT_KEYS)}",
                              stage="kernel.load_model")
        _reject_unknown(cc, _COMPONENT_KEYS[kind], path, text)
        alpha = _number(_need(cc, "alpha", path, text), path + ".alpha")
        try:
            if kind == "stable":
                c = cc.get("c")
                comps.append(levy1d.stable_component(alpha, None if c is None else _number(c, path + ".c")))
            else:
                comps.append(levy1d.discretized_stable_component(
                    alpha, _number(_need(cc, "c", path, text), path + ".c"),
                    _number(_need(cc, "decay", path, text), path + ".decay")))
            if "declared_alpha" in cc:
                # scaling index asserted independently of the measure; checked by validation suites
                a = _number(cc["declared_alpha"], path + ".declared_alpha")
                comps[-1] = dataclasses.replace(comps[-1], alpha_idx=a, beta_idx=a)
        except AdmissibilityError as exc:
            raise ConfigError(f"{path}: {exc}", stage="kernel.load_model") from exc
    coef = _need(cfg, "coefficients", "$", text)
    if not isinstance(coef, Mapping):
        raise ConfigError("$.coefficients: expected an object", stage="kernel.load_model")
    _reject_unknown(coef, _COEF_KEYS, "$.coefficients", text)
    name = _need(coef, "name", "$.coefficients", text)
    params = dict(coef.get("params", {}))
    if name == "identity":
        params.setdefault("d", d)
    try:
        fld = make_field(name, **params)
    except AdmissibilityError as exc:
        raise ConfigError(f"$.coefficients: {exc}", stage="kernel.load_model") from exc
    case = cfg.get("case")
    if case is not None and case not in ("A", "B"):
        raise ConfigError(f"$.case: expected 'A' or 'B', got {case!r}", stage="kernel.load_model")
    eps = cfg.get("eps")
    eps = None if eps is None else _number(eps, "$.eps")
    tau = _number(cfg.get("tau", 1.0), "$.tau")
    try:
        return build_model(comps, fld, case, eps, tau, source=dict(cfg))
    except AdmissibilityError as exc:
        raise ConfigError(str(exc), stage="kernel.load_model") from exc


def load_model(path) -> ModelSpec:
    """Read a JSON model file (strict: unknown keys are rejected)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}", stage="kernel.load_model") from exc
    return model_from_dict(cfg, text)


# ---------------------------------------------------------------------------
# one-dimensional density tables
# ---------------------------------------------------------------------------

TABLE_NODES = 401
TABLE_REACH = 40.0
STABLE_TABLE_REACH = 50.0
PROBE_RTOL = 1e-6
_TAIL_TERMS = 12


class _RadialTable:
    """Even density g on nodes w = scale sinh(tau), cubic Hermite in tau.

    Holds g, g', g''.  Beyond the last node ``tail`` (if given) supplies
    (g, g', g'') as functions of |w|; otherwise zero.
    """

    def __init__(self, scale: float, reach: float, fn: Callable[[np.ndarray, int], np.ndarray],
                 tail: Callable[[np.ndarray, int], np.ndarray] | None = None, n: int = TABLE_NODES):
        self.scale = float(scale)
        self.w_max = float(reach)
        self.tau_max = math.asinh(self.w_max / self.scale)
        self.h = self.tau_max / (n - 1)
        tau = self.h * np.arange(n)
        w = self.scale * np.sinh(tau)
        self.jac = self.scale * np.cosh(tau)
        self.g = [np.asarray(fn(w, k), dtype=float) for k in (0, 1, 2)]
        self.tail = tail
        self._fn = fn
        self.nodes = w

    def probe(self) -> float:
        """Max relative deviation of g at cell midpoints (relative to g(0))."""
        idx = np.linspace(1, self.nodes.size - 3, 7).astype(int)
        mid = self.scale * np.sinh(self.h * (idx + 0.5))
        direct = np.asarray(self._fn(mid, 0), dtype=float)
        return float(np.max(np.abs(self(mid, 0) - direct)) / abs(self.g[0][0]))

    def _hermite(self, tau: np.ndarray, v: np.ndarray, dv: np.ndarray, deriv: bool):
        s = tau / self.h
        i = np.clip(s.astype(np.int64), 0, v.size - 2)
        t = s - i
        h = self.h
        m0 = dv[i] * self.jac[i] * h
        m1 = dv[i + 1] * self.jac[i + 1] * h
        p0, p1 = v[i], v[i + 1]
        if not deriv:
            t2, t3 = t * t, t * t * t
            return (2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * m1
        t2 = t * t
        dt = (6 * t2 - 6 * t) * p0 + (3 * t2 - 4 * t + 1) * m0 + (-6 * t2 + 6 * t) * p1 + (3 * t2 - 2 * t) * m1
        return dt / h

    def __call__(self, w, order: int = 0) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        aw = np.abs(w)
        out = np.zeros_like(aw)
        inside = aw < self.w_max
        a = aw[inside]
        tau = np.arcsinh(a / self.scale)
        if order == 0:
            out[inside] = self._hermite(tau, self.g[0], self.g[1], False)
        elif order == 1:
            out[inside] = self._hermite(tau, self.g[1], self.g[2], False)
        else:
            out[inside] = self._hermite(tau, self.g[1], self.g[2], True) / (self.scale * np.cosh(tau))
        if self.tail is not None and not np.all(inside):
            out[~inside] = self.tail(aw[~inside], order)
        if order == 1:
            out = out * np.sign(w)
        return out


def _stable_tail_series(alpha: float, sigma_a: float) -> Callable[[np.ndarray, int], np.ndarray]:
    """Large-|w| expansion of the symmetric stable density with exponent sigma_a |xi|^alpha."""
    n = np.arange(1, _TAIL_TERMS + 1, dtype=float)
    coef = ((-1.0) ** (n + 1) * gamma_fn(n * alpha + 1.0) / gamma_fn(n + 1.0)
            * np.sin(n * math.pi * alpha / 2.0) * sigma_a ** n / math.pi)
    powers = -n * alpha - 1.0

    def tail(aw: np.ndarray, order: int) -> np.ndarray:
        x = aw[:, None]
        c, p = coef, powers
        if order >= 1:
            c = c * p
            p = p - 1.0
        if order == 2:
            c = c * p
            p = p - 1.0
        return (c * x ** p).sum(axis=1)

    return tail


@lru_cache(maxsize=256)
def _truncated_table(comp: levy1d.LevyComponent, eps: float, u: float) -> _RadialTable:
    d1 = levy1d.Density1D(comp, u, eps)
    scale = float(levy1d.h_inverse(comp, 1.0 / u))
    reach = TABLE_REACH * max(d1.R_u, scale)
    table = _RadialTable(scale, reach, lambda w, k: levy1d.truncated_density(d1, w, k))
    _check_probe(table, "truncated", u)
    return table


@lru_cache(maxsize=64)
def _stable_unit_table(comp: levy1d.LevyComponent) -> _RadialTable:
    m = comp.measure
    sigma_a = float(m.psi(1.0))
    sigma = sigma_a ** (1.0 / m.alpha)
    tail = _stable_tail_series(m.alpha, sigma_a)
    table = _RadialTable(sigma, STABLE_TABLE_REACH * sigma, lambda w, k: levy1d.full_density(comp, 1.0, w, k), tail)
    _check_probe(table, "full", 1.0)
    return table


@lru_cache(maxsize=256)
def _full_table(comp: levy1d.LevyComponent, u: float) -> _RadialTable:
    scale = float(levy1d.h_inverse(comp, 1.0 / u))
    reach = TABLE_REACH * max(scale, 1.0)
    fn = lambda w, k: levy1d.full_density(comp, u, w, k)  # noqa: E731
    edge = np.asarray([fn(np.array([reach]), k)[0] for k in (0, 1, 2)])
    power = 1.0 + comp.alpha_idx

    def tail(aw, order):
        # power-law continuation matched to the edge value
        base = edge[0] * (reach / aw) ** power
        if order == 0:
            return base
        if order == 1:
            return -power * base / aw
        return power * (power + 1.0) * base / aw ** 2

    table = _RadialTable(scale, reach, fn, tail)
    _check_probe(table, "full", u)
    return table


def _check_probe(table: _RadialTable, what: str, u: float) -> None:
    err = table.probe()
    if err > PROBE_RTOL:
        raise LevyParamError(f"{what} density table at u={u:g} deviates {err:.2e} from direct evaluation",
                             stage="kernel.KernelEvaluator")


def density_1d(comp: levy1d.LevyComponent, eps: float, u: float, w, order: int = 0, truncated: bool = True):
    """Cached g_u (truncated) or g~_u (full) for one component, with derivatives."""
    if not u > 0:
        raise ValueError("horizon u must be positive")
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    u = float(u)
    w = np.asarray(w, dtype=float)
    if truncated:
        return _truncated_table(comp, float(eps), u)(w, order)
    if isinstance(comp.measure, levy1d.Stable):
        a = comp.measure.alpha
        lam = u ** (-1.0 / a)
        return lam ** (1 + order) * _stable_unit_table(comp)(w * lam, order)
    return _full_table(comp, u)(w, order)


# ---------------------------------------------------------------------------
# evaluator
# ---------------------------------------------------------------------------


class KernelEvaluator:
    """Product densities and frozen kernels of a model.

    Per-component tables are built lazily for each requested horizon and
    shared between identical components; everything else is pure.
    """

    def __init__(self, model: ModelSpec):
        self.model = model
        self.d = model.d
        self.eps = model.eps
        self.field = model.coefficients

    # -- one-dimensional pieces -------------------------------------------
    def g(self, i: int, u: float, w, order: int = 0, truncated: bool = True) -> np.ndarray:
        return density_1d(self.model.components[i], self.eps, u, w, order, truncated)

    def radii(self, u: float) -> np.ndarray:
        return np.array([float(levy1d.truncation_radius(c, self.eps, u)) for c in self.model.components])

    # -- products ----------------------------------------------------------
    def product_density(self, u: float, x, truncated: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_dim(x)
        out = np.ones(x.shape[:-1])
        for i in range(self.d):
            out = out * self.g(i, u, x[..., i], 0, truncated)
        return out

    def product_derivatives(self, u: float, x, truncated: bool = True):
        """(G, grad G, Hessian G) at x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        self._check_dim(x)
        d = self.d
        vals = [[self.g(i, u, x[..., i], k, truncated) for k in (0, 1, 2)] for i in range(d)]
        G = np.ones(x.shape[:-1])
        for i in range(d):
            G = G * vals[i][0]
        grad = np.empty(x.shape)
        hess = np.empty(x.shape + (d,))
        for i in range(d):
            gi = np.ones(x.shape[:-1])
            for j in range(d):
                gi = gi * (vals[j][1] if j == i else vals[j][0])
            grad[..., i] = gi
            for j in range(d):
                hij = np.ones(x.shape[:-1])
                for k in range(d):
                    if k == i == j:
                        hij = hij * vals[k][2]
                    elif k == i or k == j:
                        hij = hij * vals[k][1]
                    else:
                        hij = hij * vals[k][0]
                hess[..., i, j] = hij
        return G, grad, hess

    def truncation_matrix(self, u: float) -> np.ndarray:
        return np.diag(8.0 * self.radii(u))

    def M_norms(self, u: float) -> tuple[float, float]:
        """(|M_u|, |M_u^-1|)."""
        R = self.radii(u)
        return 8.0 * float(R.max()), 0.125 / float(R.min())

    # -- kernels -----------------------------------------------------------
    def frozen_kernel(self, t: float, s: float, y, w) -> np.ndarray:
        """p^y_{t,s}(w) = G_{s-t}(A_s(y)^-1 w) / |det A_s(y)|."""
        self._check_times(t, s)
        A = self.field.A(s, np.asarray(y, dtype=float))
        w = np.asarray(w, dtype=float)
        z = np.linalg.solve(A, w[..., None])[..., 0] if A.ndim == w.ndim + 1 else _apply_inverse(A, w)
        return self.product_density(s - t, z, True) / np.abs(np.linalg.det(A))

    def frozen_kernel_derivatives(self, t: float, s: float, A: np.ndarray, w):
        """(p, grad p, Hessian p) of w -> G_{s-t}(A^-1 w)/|det A| for a fixed matrix A."""
        self._check_times(t, s)
        Ainv = np.linalg.inv(A)
        z = np.asarray(w, dtype=float) @ Ainv.T
        G, dG, HG = self.product_derivatives(s - t, z, True)
        det = abs(float(np.linalg.det(A)))
        grad = dG @ Ainv / det
        hess = np.einsum("ai,...ab,bj->...ij", Ainv, HG, Ainv) / det
        return G / det, grad, hess

    def zero_order_kernel(self, t: float, s: float, x, y) -> np.ndarray:
        """p^(0)_{t,s}(x, y) = p^y_{t,s}(x - y)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.frozen_kernel(t, s, y, x - y)

    def euler_kernel(self, t: float, s: float, x, y) -> np.ndarray:
        """Density of x + A_t(x)(Z_s - Z_t) at y (untruncated noise)."""
        self._check_times(t, s)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        A = self.field.A(t, x)
        w = y - x
        z = np.linalg.solve(A, w[..., None])[..., 0] if A.ndim == w.ndim + 1 else _apply_inverse(A, w)
        return self.product_density(s - t, z, False) / np.abs(np.linalg.det(A))

    def G0(self, u: float, truncated: bool = True) -> float:
        # direct inversion at the origin; avoids tabulating whole densities
        return _G0(self.model.components, self.model.eps, float(u), bool(truncated))

    def operator_norm(self, x_grid=None, t_grid=(0.0,)) -> OperatorNormReport:
        if x_grid is None:
            g = np.linspace(-math.pi, math.pi, 9)
            x_grid = np.stack(np.meshgrid(*([g] * self.d), indexing="ij"), -1).reshape(-1, self.d)
        return A_operator_norm(self.field, x_grid, t_grid)

    # -- checks ------------------------------------------------------------
    def _check_dim(self, x: np.ndarray) -> None:
        if x.shape[-1:] != (self.d,):
            raise ValueError(f"expected points of dimension {self.d}, got shape {x.shape}")

    @staticmethod
    def _check_times(t: float, s: float) -> None:
        if not s > t:
            raise ValueError(f"need s > t, got t={t}, s={s}")


@lru_cache(maxsize=256)
def _G0(components: tuple, eps: float, u: float, truncated: bool) -> float:
    out = 1.0
    for comp in components:
        if truncated:
            out *= float(levy1d.truncated_density(levy1d.Density1D(comp, u, eps), 0.0))
        else:
            out *= float(levy1d.full_density(comp, u, 0.0))
    return out


def _apply_inverse(A: np.ndarray, w: np.ndarray) -> np.ndarray:
    """A^-1 w for a single matrix A and w of shape (..., d)."""
    return w @ np.linalg.inv(A).T


# -- functional forms ----------------------------------------------------------


def product_density(ke: KernelEvaluator, u: float, x, truncated: bool = True):
    return ke.product_density(u, x, truncated)


def truncation_matrix(ke: KernelEvaluator, u: float) -> np.ndarray:
    return ke.truncation_matrix(u)


def frozen_kernel(ke: KernelEvaluator, t: float, s: float, y, w):
    return ke.frozen_kernel(t, s, y, w)


def zero_order_kernel(ke: KernelEvaluator, t: float, s: float, x, y):
    return ke.zero_order_kernel(t, s, x, y)


def euler_kernel(ke: KernelEvaluator, t: float, s: float, x, y):
    return ke.euler_kernel(t, s, x, y)


def model_hash(model: ModelSpec) -> str:
    import hashlib

    payload = json.dumps(model.source, sort_keys=True, default=str) if model.source else repr(model)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
