"""Invariant suites run by ``levyparam validate``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel, levy1d, parametrix
from .exceptions import ConfigError

SUITES = ("levy1d", "kernel", "parametrix")
SCALING_GRID = np.logspace(-3, 0, 13)
SANDWICH_HORIZONS = (2.0 ** -6, 2.0 ** -2)


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""

    def as_dict(self) -> dict:
        return {"suite": self.suite, "name": self.name, "passed": self.passed, "value": self.value,
                "bound": self.bound, "detail": self.detail}


def levy1d_checks(model) -> list[Check]:
    out = []
    for i, comp in enumerate(model.components):
        tag = f"component[{i}]"
        rep = levy1d.check_wsc(comp, SCALING_GRID, SCALING_GRID)
        out.append(Check("levy1d", f"{tag}.scaling_lower", rep.lower_ratio_min >= comp.C1 * (1 - 1e-10),
                         rep.lower_ratio_min, comp.C1, f"declared alpha={comp.alpha_idx}"))
        out.append(Check("levy1d", f"{tag}.scaling_upper", rep.upper_ratio_max <= comp.C2 * (1 + 1e-10),
                         rep.upper_ratio_max, comp.C2, f"declared beta={comp.beta_idx}"))
        xi = np.logspace(0, 3, 13)
        lo, hi = levy1d.psi_sandwich(comp, xi)
        ps = np.asarray(levy1d.psi(comp, xi))
        gap = float(min(np.min(ps / lo), np.min(hi / ps)))
        out.append(Check("levy1d", f"{tag}.psi_sandwich", gap >= 1.0 - 1e-10, gap, 1.0))
        for u in SANDWICH_HORIZONS:
            d1 = levy1d.Density1D(comp, u, model.eps)
            g = float(levy1d.truncated_density(d1, 0.0))
            gt = float(levy1d.full_density(comp, u, 0.0))
            cap = gt * np.exp(u ** model.eps / model.eps)
            ok = gt * (1 - 1e-6) <= g <= cap * (1 + 1e-6)
            out.append(Check("levy1d", f"{tag}.density_sandwich[u={u:g}]", ok, g, cap,
                             f"lower {gt:.6g}"))
    return out


def kernel_checks(model) -> list[Check]:
    out = []
    f = model.coefficients
    if model.case == "B":
        rep = kernel.check_condition_D(model)
        out.append(Check("kernel", "condition_D", rep.passed, 0.0, 0.0, "; ".join(rep.failures())))
    out.append(Check("kernel", "eps_range", 0.0 < model.eps <= model.eps0, model.eps, model.eps0))
    axes = [np.linspace(-2.0, 2.0, 5)] * model.d
    X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, model.d)
    rep = kernel.A_operator_norm(f, X, (0.0, 0.5, 1.0))
    out.append(Check("kernel", "A_operator_norm", rep.value <= rep.bound * (1 + 1e-9), rep.value, rep.bound))
    ke = kernel.KernelEvaluator(model)
    for u in SANDWICH_HORIZONS:
        g0, gt0 = ke.G0(u), ke.G0(u, truncated=False)
        out.append(Check("kernel", f"G0_order[u={u:g}]", gt0 * (1 - 1e-6) <= g0, g0, gt0))
    return out


def parametrix_checks(model, u: float = 0.25, n_space: int = 256, n_time: int = 8) -> list[Check]:
    ke = kernel.KernelEvaluator(model)
    x = (0.0,) * model.d
    cfg = parametrix.VolterraConfig(0.0, u, x, n_space=n_space, n_time=n_time,
                                    coverage=parametrix.default_coverage(model))
    sol = parametrix.build_solution(ke, cfg)
    rep = parametrix.residual_report(sol)
    p = sol.p_table
    neg = float(-min(p.min(), 0.0) / p.max())
    out = [
        Check("parametrix", "mass", abs(sol.mass - 1.0) <= 5e-2, sol.mass, 1.0, f"path {sol.path}"),
        Check("parametrix", "positivity", neg <= 1e-2, neg, 1e-2),
        Check("parametrix", "finite_residuals", bool(np.isfinite(rep.l1_r) and np.isfinite(rep.l1_rtilde)),
              rep.l1_rtilde, float("inf")),
        Check("parametrix", "diagonal_ratio", 0.0 < rep.diagonal_ratio < 10.0, rep.diagonal_ratio, 10.0),
    ]
    return out


def run_suite(model, suite: str) -> list[Check]:
    if suite == "all":
        return [c for s in SUITES for c in run_suite(model, s)]
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; known: {SUITES + ('all',)}", stage="validation.run_suite")
    return {"levy1d": levy1d_checks, "kernel": kernel_checks, "parametrix": parametrix_checks}[suite](model)
