import csv
import math

import numpy as np
import pytest
from scipy import integrate, special

from levyparam import kernel as K
from levyparam import levy1d, studies
from levyparam.exceptions import ConfigError, LevyParamError


R_GRID = np.logspace(-3, 0, 31)


def stable_density_at_zero(alpha, s):
    return special.gamma(1.0 + 1.0 / alpha) / (math.pi * s ** (1.0 / alpha))


def _F(x, a):
    return math.copysign(abs(x) ** (a + 1.0), x) / (a + 1.0)


def linear_exponent(c, d, s, a):
    """int_0^s |c + r d|^a dr in closed form."""
    if d == 0.0:
        return s * abs(c) ** a
    return (_F(c + s * d, a) - _F(c, a)) / d


def density_gamma_one(s, a1, a2):
    """p_s(0) for gamma = 1 by adaptive 2-d quadrature with the closed-form exponent."""
    def f(rho, th):
        ct, st = math.cos(th), math.sin(th)
        e = linear_exponent(ct, st, s, a1) * rho ** a1 + linear_exponent(st, ct, s, a2) * rho ** a2
        return rho * math.exp(-e)

    val = integrate.dblquad(f, 0.0, math.pi, 0.0, np.inf, epsabs=0.0, epsrel=1e-9)[0]
    return 2.0 * val / (2.0 * math.pi) ** 2


# ---------------------------------------------------------------------------
# discretized stable band
# ---------------------------------------------------------------------------


def test_ex1_band_holds():
    rep = studies.ex1_discretized_bound(1.2, 1.0, 0.5, R_GRID)
    assert rep["passed"]
    h = np.array(rep["h_r_alpha"])
    assert np.all(h >= rep["B1"])
    assert np.all(h <= rep["B2"])
    assert rep["min_margin"] > 0


def test_ex1_band_at_atoms():
    atoms = 0.5 ** np.arange(1, 10)
    rep = studies.ex1_discretized_bound(1.2, 1.0, 0.5, atoms)
    assert rep["passed"]
    m = levy1d.discretized_stable_component(1.2, 1.0, 0.5).measure
    for rho in atoms:
        assert m.h(rho) == pytest.approx(m.h(rho * (1 + 1e-12)), rel=1e-9)
        assert m.h(rho) == pytest.approx(m.h(rho * (1 - 1e-12)), rel=1e-9)


def test_ex1_lower_band_matches_closed_form():
    rep = studies.ex1_discretized_bound(1.2, 1.0, 0.5, R_GRID)
    assert rep["B1"] == pytest.approx(rep["B1_closed_form"], rel=1e-9)
    assert rep["B2"] == pytest.approx(0.5 ** -2 * 4.0 / (1.2 * 0.8), rel=1e-14)


def test_ex1_tightens_as_decay_goes_to_one():
    # atoms stop at the first radius, so the comparison is made at small r
    r = np.logspace(-3, -1.5, 31)
    spreads = [studies.ex1_discretized_bound(1.2, 1.0, q, r)["spread"] for q in (0.5, 0.8, 0.95, 0.99)]
    assert all(a > b for a, b in zip(spreads, spreads[1:]))
    assert spreads[-1] < 1e-2
    stable = 2.0 / 1.2 + 2.0 / 0.8
    assert studies.ex1_discretized_bound(1.2, 1.0, 0.5, r)["stable_constant"] == pytest.approx(stable)


@pytest.mark.parametrize("decay", [0.0, 1.0, -0.5])
def test_ex1_rejects_decay(decay):
    with pytest.raises(ConfigError, match="decay"):
        studies.ex1_discretized_bound(1.2, 1.0, decay, R_GRID)


@pytest.mark.parametrize("grid", [[], [0.0, 0.5], [0.5, 1.5]])
def test_ex1_rejects_grid(grid):
    with pytest.raises(ConfigError, match="r_grid"):
        studies.ex1_discretized_bound(1.2, 1.0, 0.5, grid)


# ---------------------------------------------------------------------------
# diagonal density of the shear example
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("s", [2.0 ** -6, 0.25, 1.0])
@pytest.mark.parametrize("alphas", [(0.8, 1.6), (1.0, 1.5)])
def test_ex2_uncoupled_is_product(s, alphas):
    a1, a2 = alphas
    got = studies.ex2_diagonal_density(s, 0.5, a1, a2, coupling=0.0)
    want = stable_density_at_zero(a1, s) * stable_density_at_zero(a2, s)
    assert got == pytest.approx(want, rel=1e-8)


def test_ex2_gamma_zero_is_identity():
    s = 2.0 ** -5
    want = stable_density_at_zero(0.8, s) * stable_density_at_zero(1.6, s)
    assert studies.ex2_diagonal_density(s, 0.0, 0.8, 1.6) == pytest.approx(want, rel=1e-8)
    rep = studies.ex2_slope_study(0.0)
    assert rep["target"] == pytest.approx(-1.875)
    assert rep["slope"] == pytest.approx(-1.875, abs=1e-6)
    assert rep["passed"]


@pytest.mark.parametrize("s", [2.0 ** -4, 0.25])
def test_ex2_linear_shear_oracle(s):
    got = studies.ex2_diagonal_density(s, 1.0, 0.8, 1.6)
    assert got == pytest.approx(density_gamma_one(s, 0.8, 1.6), rel=1e-8)


@pytest.mark.parametrize("gamma", [0.3, 0.8])
def test_ex2_swap_symmetry(gamma):
    a = studies.ex2_diagonal_density(0.1, gamma, 0.8, 1.6)
    b = studies.ex2_diagonal_density(0.1, gamma, 1.6, 0.8)
    assert a == pytest.approx(b, rel=1e-10)


@pytest.mark.parametrize("c,d", [(1.0, 0.0), (0.3, 1.0), (-0.2, 1.0), (-1.0, 0.4), (0.7, -0.7), (-0.05, 0.99)])
@pytest.mark.parametrize("gamma,alpha", [(0.3, 0.8), (0.8, 1.6), (1.5, 1.2)])
def test_inner_exponent_against_quad(c, d, gamma, alpha):
    s, coupling = 0.7, 1.3
    e = studies._HolderTimeExponent(s, gamma, alpha, coupling)
    f = lambda r: abs(c + coupling * r ** gamma * d) ** alpha
    pts = []
    if d != 0.0:
        v = -c / (coupling * d)
        if v > 0:
            rk = v ** (1.0 / gamma)
            pts = [rk] if 0 < rk < s else []
    want = integrate.quad(f, 0.0, s, points=pts or None, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    assert e(c, d) == pytest.approx(want, rel=1e-10)


def test_ex2_slope_fast_regime():
    rep = studies.ex2_slope_study(0.8)
    assert rep["target"] == pytest.approx(-1.0 / 0.8 - 1.0 / 1.6)
    assert abs(rep["slope"] - rep["target"]) <= 0.08
    assert rep["max_residual"] <= 0.1
    assert rep["passed"]


def test_ex2_target_slopes():
    assert studies.ex2_target_slope(0.3, 0.8, 1.6) == pytest.approx(-1.55)
    assert studies.ex2_target_slope(0.8, 0.8, 1.6) == pytest.approx(-1.875)
    assert studies.ex2_target_slope(0.3, 1.6, 0.8) == pytest.approx(-1.55)


def test_ex2_slow_regime_reaches_target_at_small_s():
    deep = [2.0 ** -k for k in range(40, 29, -2)]
    rep = studies.ex2_slope_study(0.3, s_grid=deep)
    assert abs(rep["slope"] - (-1.55)) <= 0.02
    assert rep["max_residual"] <= 0.1


def test_ex2_slow_regime_window_is_reported():
    rep = studies.ex2_slope_study(0.3)
    assert rep["slope"] < rep["target"]
    assert not rep["passed_upper"]
    assert rep["passed_lower"]
    assert len(rep["fit"].grid) == 6


def test_ex2_rejects_bad_inputs():
    with pytest.raises(ConfigError, match="'s'"):
        studies.ex2_diagonal_density(0.0, 0.5, 0.8, 1.6)
    with pytest.raises(ConfigError, match="gamma"):
        studies.ex2_diagonal_density(0.1, -0.5, 0.8, 1.6)
    with pytest.raises(ConfigError, match="indices"):
        studies.ex2_diagonal_density(0.1, 0.5, 0.8, 2.0)
    with pytest.raises(ConfigError, match="indices"):
        studies.ex2_diagonal_density(0.1, 0.5, 0.0, 1.6)


# ---------------------------------------------------------------------------
# fits and csv
# ---------------------------------------------------------------------------


def test_slope_fit_exact_power_law():
    x = [2.0 ** -k for k in range(2, 8)]
    fit = studies.fit_loglog(x, [3.0 * v ** -1.25 for v in x])
    assert fit.slope == pytest.approx(-1.25, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert fit.max_residual < 1e-12


def test_slope_fit_needs_four_points():
    with pytest.raises(ValueError, match="at least 4"):
        studies.fit_loglog([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])


def test_write_fit_csv(tmp_path):
    x = [2.0 ** -k for k in range(2, 6)]
    fits = {"a": studies.fit_loglog(x, [v ** -1.5 for v in x]), "b": studies.fit_loglog(x, [v ** 0.5 for v in x])}
    path = studies.write_fit_csv(fits, tmp_path / "fits.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["series", "abscissa", "value", "slope", "intercept", "max_residual"]
    assert len(rows) == 9
    assert [r[0] for r in rows[1:]] == ["a"] * 4 + ["b"] * 4
    assert float(rows[1][3]) == pytest.approx(-1.5)
    again = studies.write_fit_csv(fits, tmp_path / "again.csv")
    assert path.read_bytes() == again.read_bytes()


# ---------------------------------------------------------------------------
# theorem suites
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def rotated_cauchy_model():
    c = levy1d.stable_component(1.0)
    return K.build_model([c, c], K.ConstantField(K.rotation_matrix(np.pi / 6)))


def test_theorem_suites_constant_model(rotated_cauchy_model):
    rep = studies.theorem_suites(rotated_cauchy_model)
    assert rep["passed"]
    res, diag, hol = (rep["suites"][k] for k in ("residual", "diagonal", "hoelder"))
    assert res["exact"] and max(res["l1_rtilde"]) <= res["floor"]
    assert diag["exact"] and max(diag["deviation"]) <= diag["floor"]
    assert hol["C"] > 0
    assert all(q <= hol["C"] for q in hol["max_quotient"])


def test_theorem_suites_refuses_condition_d():
    cfg = {"d": 2, "components": [{"type": "stable", "alpha": 0.8}, {"type": "stable", "alpha": 1.6}],
           "coefficients": {"name": "holder_time", "params": {"gamma": 0.3}}}
    with pytest.raises(LevyParamError, match="condition \\(D\\) violated"):
        studies.theorem_suites(cfg)


def test_theorem_suites_gamma_prime_must_stay_below_alpha(rotated_cauchy_model):
    with pytest.raises(ConfigError, match="gamma_prime"):
        studies.theorem_suites(rotated_cauchy_model, {"gamma_prime": 1.0})


def test_theorem_suites_unknown_keys(rotated_cauchy_model):
    with pytest.raises(ConfigError, match="unknown schedule keys"):
        studies.theorem_suites(rotated_cauchy_model, {"horizon": [0.1]})


def test_theorem_suites_short_schedule(rotated_cauchy_model):
    with pytest.raises(ConfigError, match="horizons"):
        studies.theorem_suites(rotated_cauchy_model, {"horizons": [0.25, 0.125, 0.0625]})


def test_diagonal_suite_fits_constant_at_largest_horizon(monkeypatch):
    from types import SimpleNamespace

    from levyparam import parametrix

    ke = SimpleNamespace(model=SimpleNamespace(eps0=0.5))
    us = [2.0 ** -k for k in range(2, 7)]

    def run(devs):
        table = dict(zip(us, devs))
        monkeypatch.setattr(parametrix, "residual_report",
                            lambda sol: SimpleNamespace(diagonal_ratio=1.0 + table[sol]))
        return studies.diagonal_suite(ke, {"rel_floor": 1e-9}, {u: u for u in us})

    good = run([0.1 * u ** 0.6 for u in us])
    assert good["passed"] and not good["exact"]
    assert good["C"] == pytest.approx(0.1 * 0.25 ** 0.2)
    bad = run([0.1 * u ** 0.2 for u in us])
    assert not bad["passed"]
