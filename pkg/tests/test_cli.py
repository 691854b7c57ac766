import csv
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from levyparam.cli import default_boxes, main
from levyparam import kernel as K


CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def run_dirs(base, command):
    return sorted(p for p in Path(base).iterdir() if p.name.startswith(command))


def manifest(run_dir):
    return json.loads((run_dir / "manifest.json").read_text())


def csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def test_density_writes_csv_and_manifest(tmp_path):
    res = invoke("density", "--config", CONFIGS / "cauchy_rotation.json", "--s", 0.25, "--n-space", 64,
                 "--out", tmp_path)
    assert res.exit_code == 0, res.output
    (run,) = run_dirs(tmp_path, "density")
    rows = csv_rows(run / "density.csv")
    assert rows[0] == ["t", "s", "x_1", "x_2", "y_1", "y_2", "p0", "p", "ptilde", "r", "rtilde"]
    assert len(rows) == 1 + 64 * 64
    m = manifest(run)
    assert m["command"] == "density"
    assert m["exit_code"] == 0
    assert m["model_hash"] == K.model_hash(K.load_model(CONFIGS / "cauchy_rotation.json"))
    assert m["seed"] == 0 and m["version"]
    assert m["wall_clock"] > 0
    assert {Path(p).name for p in m["outputs"]} == {"density.csv", "report.json"}


def test_density_rerun_is_byte_identical(tmp_path):
    args = ("density", "--config", CONFIGS / "shear.json", "--s", 0.25, "--n-space", 256, "--n-time", 8,
            "--x", "0.3,-0.2", "--out", tmp_path)
    assert invoke(*args).exit_code == 0
    assert invoke(*args).exit_code == 0
    a, b = run_dirs(tmp_path, "density")
    assert a != b
    assert (a / "density.csv").read_bytes() == (b / "density.csv").read_bytes()


def test_density_s_not_after_t(tmp_path):
    res = invoke("density", "--config", CONFIGS / "cauchy_rotation.json", "--t", 0.5, "--s", 0.25,
                 "--out", tmp_path)
    assert res.exit_code == 2
    assert "field 's'" in res.output
    assert "[parametrix.VolterraConfig]" in res.output
    (run,) = run_dirs(tmp_path, "density")
    assert manifest(run)["exit_code"] == 2


def test_density_condition_d_violation(tmp_path):
    res = invoke("density", "--config", CONFIGS / "holder_time_small_gamma.json", "--s", 0.25, "--out", tmp_path)
    assert res.exit_code == 2
    assert "condition (D) violated" in res.output
    assert "beta/alpha < 1 + gamma1" in res.output


def test_density_missing_config(tmp_path):
    res = invoke("density", "--config", tmp_path / "missing.json", "--s", 0.25, "--out", tmp_path)
    assert res.exit_code == 2
    assert "[kernel.load_model]" in res.output


def test_density_unknown_key(tmp_path):
    cfg = json.loads((CONFIGS / "shear.json").read_text())
    cfg["alhpa"] = 1.0
    path = tmp_path / "typo.json"
    path.write_text(json.dumps(cfg))
    res = invoke("density", "--config", path, "--s", 0.25, "--out", tmp_path)
    assert res.exit_code == 2
    assert "alhpa" in res.output


def test_density_bad_source(tmp_path):
    res = invoke("density", "--config", CONFIGS / "shear.json", "--s", 0.25, "--x", "1,2,3", "--out", tmp_path)
    assert res.exit_code == 2
    assert "field 'x'" in res.output


def test_density_numerical_failure(tmp_path):
    # every time node inside the frozen layer of the grid solver
    res = invoke("density", "--config", CONFIGS / "shear.json", "--s", 0.25, "--n-space", 16,
                 "--coverage", 20, "--out", tmp_path)
    assert res.exit_code == 3
    assert "[parametrix." in res.output


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def test_validate_levy1d_cauchy(tmp_path):
    res = invoke("validate", "--config", CONFIGS / "cauchy_rotation.json", "--suite", "levy1d", "--out", tmp_path)
    assert res.exit_code == 0, res.output
    (run,) = run_dirs(tmp_path, "validate")
    rows = csv_rows(run / "checks.csv")
    assert rows[0] == ["suite", "name", "passed", "value", "bound", "detail"]
    assert all(r[2] == "1" for r in rows[1:])


def test_validate_wrong_declared_alpha(tmp_path):
    res = invoke("validate", "--config", CONFIGS / "wrong_alpha.json", "--suite", "levy1d", "--out", tmp_path)
    assert res.exit_code == 1
    assert "scaling_lower" in res.output
    (run,) = run_dirs(tmp_path, "validate")
    rep = json.loads((run / "report.json").read_text())
    assert not rep["passed"]
    assert rep["failures"][0]["name"].endswith("scaling_lower")


def test_validate_all_shear(tmp_path):
    res = invoke("validate", "--config", CONFIGS / "shear.json", "--suite", "all", "--out", tmp_path)
    assert res.exit_code == 0, res.output


def test_validate_rejects_suite(tmp_path):
    res = invoke("validate", "--config", CONFIGS / "shear.json", "--suite", "nope", "--out", tmp_path)
    assert res.exit_code == 2


# ---------------------------------------------------------------------------
# mc-compare
# ---------------------------------------------------------------------------


def test_default_boxes_tile_around_source():
    model = K.load_model(CONFIGS / "cauchy_rotation.json")
    boxes = default_boxes(model, 0.25, (1.0, -1.0))
    assert len(boxes) == 9
    centres = sorted(tuple((lo + hi) / 2) for lo, hi in boxes)
    assert centres[4] == pytest.approx((1.0, -1.0))


def test_mc_compare_agrees(tmp_path):
    res = invoke("mc-compare", "--config", CONFIGS / "cauchy_rotation.json", "--s", 0.25, "--paths", 50_000,
                 "--seed", 11, "--out", tmp_path)
    assert res.exit_code == 0, res.output
    (run,) = run_dirs(tmp_path, "mc-compare")
    rows = csv_rows(run / "boxes.csv")
    assert rows[0][-4:] == ["parametrix", "mc", "stderr", "z"]
    assert len(rows) == 10
    assert max(abs(float(r[-1])) for r in rows[1:]) <= 4.0
    assert manifest(run)["seed"] == 11


def test_mc_compare_flags_large_z(tmp_path):
    # a coarse grid biases the parametrix box probabilities well past 4 standard errors
    res = invoke("mc-compare", "--config", CONFIGS / "cauchy_rotation.json", "--s", 0.25, "--paths", 50_000,
                 "--n-space", 128, "--out", tmp_path)
    assert res.exit_code == 3


def test_mc_compare_reruns_identical(tmp_path):
    args = ("mc-compare", "--config", CONFIGS / "cauchy_rotation.json", "--s", 0.25, "--paths", 5_000,
            "--n-space", 256, "--tol", 0.05, "--out", tmp_path)
    assert invoke(*args, "--threads", 1).exit_code == 0
    assert invoke(*args, "--threads", 2).exit_code == 0
    a, b = run_dirs(tmp_path, "mc-compare")
    assert (a / "boxes.csv").read_bytes() == (b / "boxes.csv").read_bytes()


def test_threads_validation(tmp_path):
    res = invoke("mc-compare", "--config", CONFIGS / "cauchy_rotation.json", "--s", 0.25, "--threads", 0,
                 "--out", tmp_path)
    assert res.exit_code == 2
    assert "threads" in res.output


# ---------------------------------------------------------------------------
# study
# ---------------------------------------------------------------------------


def test_study_ex1(tmp_path):
    res = invoke("study", "ex1", "--out", tmp_path)
    assert res.exit_code == 0, res.output
    (run,) = run_dirs(tmp_path, "study")
    rows = csv_rows(run / "ex1_band.csv")
    assert rows[0] == ["r", "h_r_alpha", "B1", "B2"]
    assert len(rows) == 32


def test_study_ex2_fast_regime_and_product(tmp_path):
    res = invoke("study", "ex2", "--gamma", 0.8, "--gamma", 0.0, "--out", tmp_path)
    assert res.exit_code == 0, res.output
    (run,) = run_dirs(tmp_path, "study")
    rows = csv_rows(run / "ex2_fits.csv")
    assert rows[0] == ["series", "abscissa", "value", "slope", "intercept", "max_residual"]
    assert {r[0] for r in rows[1:]} == {"gamma=0.8", "gamma=0"}


def test_study_ex2_slow_regime_misses_window(tmp_path):
    res = invoke("study", "ex2", "--gamma", 0.3, "--out", tmp_path)
    assert res.exit_code == 1
    assert "FAIL" in res.output


def test_study_rerun_identical(tmp_path):
    assert invoke("study", "ex2", "--gamma", 0.8, "--out", tmp_path).exit_code == 0
    assert invoke("study", "ex2", "--gamma", 0.8, "--out", tmp_path).exit_code == 0
    a, b = run_dirs(tmp_path, "study")
    assert (a / "ex2_fits.csv").read_bytes() == (b / "ex2_fits.csv").read_bytes()


def test_study_bad_decay(tmp_path):
    res = invoke("study", "ex1", "--decay", 1.5, "--out", tmp_path)
    assert res.exit_code == 2
    assert "[studies.ex1_discretized_bound]" in res.output


def test_version():
    res = invoke("--version")
    assert res.exit_code == 0
    assert "levyparam" in res.output
