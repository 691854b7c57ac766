import csv
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from levyparam import kernel as K
from levyparam import levy1d
from levyparam import montecarlo as MC
from levyparam import parametrix as PM
from levyparam.exceptions import ConfigError, LevyParamError


CAUCHY = levy1d.stable_component(1.0)


def cauchy_cdf(scale, x):
    return 0.5 + np.arctan(np.asarray(x) / scale) / math.pi


def cauchy_model(fld=None, d=2):
    fld = fld if fld is not None else K.ConstantField(np.eye(d))
    return K.build_model([CAUCHY] * d, fld)


# -- increments ---------------------------------------------------------------


def test_stable_scale_matches_cauchy_normalisation():
    assert MC.stable_scale(CAUCHY) == pytest.approx(1.0, rel=1e-9)


def test_cauchy_increment_median_and_cdf():
    n = 200_000
    z = MC.sample_increment(CAUCHY, 1.0, np.random.default_rng(1), n)
    assert abs(np.median(z)) <= 3 * math.pi / (2 * math.sqrt(n))
    assert abs((z <= 1.0).mean() - 0.75) <= 3 / math.sqrt(n)


def test_scalar_increment_without_size():
    z = MC.sample_increment(CAUCHY, 0.5, np.random.default_rng(0))
    assert isinstance(z, float)


def test_stable_increment_matches_reference_law():
    comp = levy1d.stable_component(1.2)
    n, dt = 20_000, 0.3
    z = MC.sample_increment(comp, dt, np.random.default_rng(2), n)
    law = stats.levy_stable(1.2, 0.0, scale=MC.stable_scale(comp) * dt ** (1 / 1.2))
    assert stats.kstest(z, law.cdf).pvalue > 0.01


@pytest.mark.parametrize("comp", [CAUCHY, levy1d.discretized_stable_component(1.2, 1.0, 0.5)])
def test_increments_are_additive_in_law(comp):
    n, dt = 100_000, 0.2
    rng = np.random.default_rng(3)
    one = MC.sample_increment(comp, dt, rng, n, jump_floor=1e-3, substitution="gaussian")
    two = (MC.sample_increment(comp, dt / 2, rng, n, jump_floor=1e-3, substitution="gaussian")
           + MC.sample_increment(comp, dt / 2, rng, n, jump_floor=1e-3, substitution="gaussian"))
    assert stats.ks_2samp(one, two).pvalue > 0.01


def test_discretized_jumps_land_on_atoms():
    comp = levy1d.discretized_stable_component(1.2, 1.0, 0.5)
    z = MC.sample_increment(comp, 0.01, np.random.default_rng(4), 50_000, jump_floor=0.1, substitution="drop")
    # atoms above the floor are 0.5, 0.25, 0.125; every sum of them is a multiple of 0.125
    assert np.any(z != 0)
    assert_array_equal(z / 0.125, np.round(z / 0.125))
    single = np.unique(np.abs(z[(z != 0) & (np.abs(z) <= 0.5)]))
    assert set(single) <= {0.125, 0.25, 0.375, 0.5}


def test_custom_measure_compound_poisson_matches_tail():
    alpha = 1.5
    comp = levy1d.custom_component(lambda x: x ** (-1 - alpha), lambda r: r ** (-alpha) / alpha, alpha, alpha)
    n, dt, floor = 100_000, 1e-3, 0.05
    z = MC.sample_increment(comp, dt, np.random.default_rng(5), n, jump_floor=floor, substitution="drop")
    rate = 2 * floor ** (-alpha) / alpha * dt
    assert (z != 0).mean() == pytest.approx(1 - math.exp(-rate), abs=4 * math.sqrt(rate / n))
    sizes = MC._TailSampler(comp.measure, floor)(np.random.default_rng(6), n)
    assert sizes.min() >= floor
    assert (sizes > 2 * floor).mean() == pytest.approx(2 ** -alpha, abs=4 / math.sqrt(n))


def test_default_jump_floor_targets_jump_count():
    for comp in (CAUCHY, levy1d.discretized_stable_component(1.2, 1.0, 0.5)):
        dt = 1e-3
        floor = MC.default_jump_floor(comp, dt)
        assert float(comp.measure.tail(floor)) * dt == pytest.approx(MC.TARGET_JUMPS, rel=1.0)
        assert MC.default_substitution(comp, dt, floor) in ("gaussian", "drop")


def test_increment_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        MC.sample_increment(CAUCHY, 0.0, np.random.default_rng(0))


# -- Euler scheme -------------------------------------------------------------


def test_identity_model_endpoints_follow_cauchy_law():
    n, u = 100_000, 0.5
    ens = MC.simulate_sde(cauchy_model(), 0.0, u, np.array([0.3, -1.0]), MC.McConfig(n, 0.1, seed=11))
    assert ens.endpoints.shape == (n, 2)
    for i, x0 in enumerate((0.3, -1.0)):
        assert stats.kstest(ens.endpoints[:, i] - x0, lambda v: cauchy_cdf(u, v)).pvalue > 0.01


def test_one_step_scheme_is_frozen_euler_law():
    fld = K.ShearField(0.4)
    x = np.array([0.7, -0.3])
    u = 0.25
    ens = MC.simulate_sde(cauchy_model(fld), 0.0, u, x, MC.McConfig(100_000, u, seed=12))
    assert ens.meta["n_steps"] == 1
    A = fld.A(0.0, x)
    for i in range(2):
        scale = u * np.abs(A[i]).sum()
        assert stats.kstest(ens.endpoints[:, i] - x[i], lambda v: cauchy_cdf(scale, v)).pvalue > 0.01


def test_fixed_seed_reproducible_and_thread_independent():
    model = cauchy_model(K.ShearField(0.2))
    cfg = dict(n_paths=3 * MC.BLOCK + 17, dt=0.05, seed=2024)
    a = MC.simulate_sde(model, 0.0, 0.2, np.zeros(2), MC.McConfig(**cfg, threads=1))
    b = MC.simulate_sde(model, 0.0, 0.2, np.zeros(2), MC.McConfig(**cfg, threads=1))
    c = MC.simulate_sde(model, 0.0, 0.2, np.zeros(2), MC.McConfig(**cfg, threads=3))
    assert_array_equal(a.endpoints, b.endpoints)
    assert_array_equal(a.endpoints, c.endpoints)
    d = MC.simulate_sde(model, 0.0, 0.2, np.zeros(2), MC.McConfig(**{**cfg, "seed": 2025}))
    assert not np.array_equal(a.endpoints, d.endpoints)


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("LEVYPARAM_THREADS", "2")
    assert MC._resolve_threads(None) == 2
    assert MC._resolve_threads(5) == 5
    monkeypatch.delenv("LEVYPARAM_THREADS")
    assert MC._resolve_threads(None) == 1


def test_coordinates_independent_for_identity():
    n = 100_000
    ens = MC.simulate_sde(cauchy_model(), 0.0, 0.3, np.zeros(2), MC.McConfig(n, 0.1, seed=13))
    rho = stats.spearmanr(ens.endpoints[:, 0], ens.endpoints[:, 1]).statistic
    assert abs(rho) <= 3 / math.sqrt(n)


def test_compound_poisson_path_records_compensator_variance():
    comp = levy1d.discretized_stable_component(1.2, 1.0, 0.5)
    model = K.build_model([comp, comp], K.ConstantField(np.eye(2)))
    ens = MC.simulate_sde(model, 0.0, 0.1, np.zeros(2), MC.McConfig(2000, 0.01, substitution="gaussian"))
    assert ens.meta["sampler"] == "compound-poisson"
    floors = ens.meta["jump_floor"]
    expected = [float(comp.measure.inner_moment(f)) * ens.meta["dt"] for f in floors]
    assert_allclose(ens.meta["compensator_variance"], expected)


def test_small_jump_substitution_insensitive_to_floor():
    comp = levy1d.discretized_stable_component(1.2, 1.0, 0.5)
    model = K.build_model([comp], K.ConstantField(np.eye(1)))
    box = ((-0.2,), (0.2,))
    res = []
    for floor, seed in ((0.02, 1), (0.01, 2)):
        cfg = MC.McConfig(100_000, 0.05, jump_floor=floor, substitution="gaussian", seed=seed)
        res.append(MC.estimate_box_probability(MC.simulate_sde(model, 0.0, 0.2, np.zeros(1), cfg), box))
    (p1, e1), (p2, e2) = res
    assert abs(p1 - p2) <= 3 * math.hypot(e1, e2)


def test_nonzero_U_uses_full_jump_map():
    U = lambda t, x, z: 0.05 * np.tanh(z) * np.linalg.norm(z) ** 2
    fld = K.CallableField(2, lambda t, x: np.eye(2), U_fn=U, C3=1.0, C4=1.0, C7=0.05)
    model = K.build_model([CAUCHY, CAUCHY], fld)
    ens = MC.simulate_sde(model, 0.0, 0.05, np.zeros(2), MC.McConfig(500, 0.05, seed=1))
    ref = MC.simulate_sde(cauchy_model(), 0.0, 0.05, np.zeros(2), MC.McConfig(500, 0.05, seed=1))
    dz = ref.endpoints
    expected = dz + 0.05 * np.tanh(dz) * np.abs(dz) ** 2
    assert_allclose(ens.endpoints, expected, rtol=1e-12, atol=1e-12)


def test_simulate_requires_s_after_t():
    with pytest.raises(ValueError):
        MC.simulate_sde(cauchy_model(), 0.5, 0.5, np.zeros(2), MC.McConfig(10, 0.1))


@pytest.mark.parametrize("kw", [dict(n_paths=0), dict(dt=0.0), dict(jump_floor=-1.0),
                                dict(substitution="poisson"), dict(seed=-1), dict(threads=0)])
def test_config_validation(kw):
    base = dict(n_paths=10, dt=0.1)
    base.update(kw)
    with pytest.raises(ConfigError):
        MC.McConfig(**base)


# -- estimators -----------------------------------------------------------------


@pytest.fixture(scope="module")
def rotation_ensemble():
    model = cauchy_model(K.ConstantField(K.rotation_matrix(np.pi / 6)))
    return model, MC.simulate_sde(model, 0.0, 0.25, np.zeros(2), MC.McConfig(200_000, 0.25, seed=21))


def test_whole_space_box(rotation_ensemble):
    _, ens = rotation_ensemble
    assert MC.estimate_box_probability(ens, ((-np.inf, -np.inf), (np.inf, np.inf))) == (1.0, 0.0)


def test_symmetric_boxes_agree(rotation_ensemble):
    _, ens = rotation_ensemble
    p, e = MC.estimate_box_probability(ens, ((0.1, 0.2), (0.9, 1.5)))
    q, f = MC.estimate_box_probability(ens, ((-0.9, -1.5), (-0.1, -0.2)))
    assert abs(p - q) <= 3 * math.hypot(e, f)


def test_box_probability_matches_parametrix(rotation_ensemble):
    model, ens = rotation_ensemble
    sol = PM.build_solution(K.KernelEvaluator(model), PM.VolterraConfig(0.0, 0.25, (0.0, 0.0), n_space=1024))
    for lo, hi in [((-0.5, -0.5), (0.5, 0.5)), ((0.0, 0.0), (1.0, 1.0)), ((-1.0, 0.2), (0.3, 2.0))]:
        p, e = MC.estimate_box_probability(ens, (lo, hi))
        assert abs(p - PM.box_probability(sol, lo, hi)) <= 3 * e + 1e-3


def test_empty_ensemble_is_error():
    with pytest.raises(LevyParamError):
        MC.estimate_box_probability(MC.McEnsemble(np.zeros((0, 2))), ((0, 0), (1, 1)))


def test_kde_single_path_peaks_at_point():
    ens = MC.McEnsemble(np.array([[0.4, -0.2]]))
    ys = np.array([[0.4, -0.2], [0.45, -0.2], [0.4, -0.1]])
    vals = MC.kde_density(ens, ys, 0.05)
    assert vals[0] == pytest.approx(1 / (2 * math.pi * 0.05 ** 2))
    assert np.argmax(vals) == 0


def test_kde_cauchy_at_origin():
    ens = MC.simulate_sde(cauchy_model(d=1), 0.0, 1.0, np.zeros(1), MC.McConfig(1_000_000, 1.0, seed=31))
    bw = MC.silverman_bandwidth(ens)
    assert MC.kde_density(ens, np.zeros(1), bw) == pytest.approx(1 / math.pi, rel=0.05)


def test_kde_integrates_to_one():
    rng = np.random.default_rng(8)
    ens = MC.McEnsemble(rng.standard_normal((2000, 1)))
    grid = np.linspace(-10, 10, 2001)[:, None]
    vals = MC.kde_density(ens, grid, 0.3)
    assert np.trapezoid(vals, grid[:, 0]) == pytest.approx(1.0, abs=1e-6)


def test_kde_rejects_bad_bandwidth():
    with pytest.raises(ValueError):
        MC.kde_density(MC.McEnsemble(np.zeros((3, 1))), np.zeros(1), 0.0)


def test_endpoint_dump_formats(tmp_path):
    ens = MC.McEnsemble(np.array([[0.1, 0.2], [0.3, -0.4]]))
    path = MC.write_endpoints(ens, tmp_path / "e.csv")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["path", "x_1", "x_2"]
    assert [float(v) for v in rows[2][1:]] == [0.3, -0.4]
    npy = MC.write_endpoints(ens, tmp_path / "e.npy")
    assert_array_equal(np.load(npy), ens.endpoints)
