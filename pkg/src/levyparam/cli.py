"""Command-line entry point ``levyparam``.

Exit codes: 0 success, 1 a check or tolerance failed, 2 configuration
error, 3 numerical failure (or a Monte Carlo z-score above 4).
"""

from __future__ import annotations

import csv
import datetime as _dt
import itertools
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__, kernel, levy1d, montecarlo, parametrix, studies, validation
from .exceptions import ConfigError, LevyParamError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
Z_LIMIT = 4.0


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    model_hash: str | None
    seed: int | None
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0
    version: str = __version__
    arguments: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK
    started: str = ""

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=str) + "\n")
        return path


class _Run:
    """One output directory plus its manifest."""

    def __init__(self, command: str, out: str, config: str | None, seed: int | None, arguments: dict):
        self.t0 = time.perf_counter()
        stamp = _dt.datetime.now(_dt.timezone.utc)
        base = Path(out)
        base.mkdir(parents=True, exist_ok=True)
        name = f"{command}-{stamp.strftime('%Y%m%dT%H%M%S')}"
        for k in itertools.count():
            run_dir = base / (name if k == 0 else f"{name}-{k}")
            try:
                run_dir.mkdir()
                break
            except FileExistsError:
                continue
        self.dir = run_dir
        self.manifest = RunManifest(command, config, None, seed, arguments=arguments, started=stamp.isoformat())

    def output(self, name: str) -> Path:
        path = self.dir / name
        self.manifest.outputs.append(str(path))
        return path

    def write_json(self, name: str, payload) -> Path:
        path = self.output(name)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
        return path

    def finish(self, code: int) -> int:
        self.manifest.exit_code = code
        self.manifest.wall_clock = time.perf_counter() - self.t0
        self.manifest.write(self.dir)
        click.echo(f"run directory: {self.dir}")
        return code


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "as_dict"):
        return obj.as_dict()
    return str(obj)


def _fail(exc: Exception, where: str) -> int:
    """Print the failing module.operation and map the error to an exit code."""
    if isinstance(exc, LevyParamError):
        msg = str(exc) if exc.stage else f"[{where}] {exc}"
        code = EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_NUMERIC
    else:
        msg = f"[{where}] {type(exc).__name__}: {exc}"
        code = EXIT_CONFIG
    click.echo(f"error: {msg}", err=True)
    return code


def _parse_x(text: str | None, d: int) -> tuple:
    if text is None:
        return (0.0,) * d
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"field 'x' must be comma-separated numbers, got {text!r}", stage="cli.parse") from exc
    if len(vals) != d:
        raise ConfigError(f"field 'x' needs {d} coordinates, got {len(vals)}", stage="cli.parse")
    return vals


def _threads(threads: int | None) -> int | None:
    """Validated worker cap; None defers to LEVYPARAM_THREADS inside the simulators."""
    if threads is not None and threads < 1:
        raise ConfigError("field 'threads' must be >= 1", stage="cli.parse")
    return threads


def _load(config: str):
    try:
        model = kernel.load_model(config)
    except OSError as exc:
        raise ConfigError(f"cannot read config {config!r}: {exc.strerror}", stage="kernel.load_model") from exc
    return model, kernel.model_hash(model)


def _volterra_cfg(model, t, s, x, n_space, n_time, coverage, tol):
    return parametrix.VolterraConfig(t, s, x, n_space=n_space, n_time=n_time,
                                     coverage=parametrix.default_coverage(model) if coverage is None else coverage,
                                     tol=tol)


def _common(f):
    opts = [
        click.option("--out", default="runs", show_default=True, help="Base directory; one subdirectory per run."),
        click.option("--seed", default=0, show_default=True, type=int),
        click.option("--threads", default=None, type=int, help="Worker cap (falls back to LEVYPARAM_THREADS)."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _solver_opts(f=None, n_space: int = 512):
    if f is None:
        return lambda g: _solver_opts(g, n_space)
    opts = [
        click.option("--config", required=True, type=click.Path(dir_okay=False), help="JSON model file."),
        click.option("--t", "t", default=0.0, show_default=True, type=float),
        click.option("--s", "s", required=True, type=float),
        click.option("--x", "x", default=None, help="Source point, comma-separated (default: origin)."),
        click.option("--n-space", default=n_space, show_default=True, type=int),
        click.option("--n-time", default=16, show_default=True, type=int),
        click.option("--coverage", default=None, type=float, help="Grid coverage factor (default: automatic)."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


@click.group()
@click.version_option(__version__, prog_name="levyparam")
def main():
    """Parametrix heat kernels for SDEs driven by cylindrical Levy noise."""


@main.command("density")
@_solver_opts
@click.option("--tol", default=1e-6, show_default=True, type=float, help="Series tolerance.")
@_common
def cmd_density(config, t, s, x, n_space, n_time, coverage, tol, out, seed, threads):
    """Tabulate p0, p, ptilde and the residuals around x."""
    args = dict(t=t, s=s, x=x, n_space=n_space, n_time=n_time, coverage=coverage, tol=tol)
    run = _Run("density", out, config, seed, args)
    try:
        _threads(threads)
        model, run.manifest.model_hash = _load(config)
        cfg = _volterra_cfg(model, t, s, _parse_x(x, model.d), n_space, n_time, coverage, tol)
        sol = parametrix.build_solution(kernel.KernelEvaluator(model), cfg)
        parametrix.write_csv(sol, run.output("density.csv"))
        run.write_json("report.json", {**sol.report(), "residual": parametrix.residual_report(sol).as_dict()})
    except (LevyParamError, ValueError) as exc:
        sys.exit(run.finish(_fail(exc, "cli.density")))
    sys.exit(run.finish(EXIT_OK))


@main.command("validate")
@click.option("--config", required=True, type=click.Path(dir_okay=False), help="JSON model file.")
@click.option("--suite", type=click.Choice(["levy1d", "kernel", "parametrix", "all"]), default="all",
              show_default=True)
@_common
def cmd_validate(config, suite, out, seed, threads):
    """Run invariant suites; exit 0 iff every check passes."""
    run = _Run("validate", out, config, seed, {"suite": suite})
    try:
        _threads(threads)
        model, run.manifest.model_hash = _load(config)
        checks = validation.run_suite(model, suite)
    except (LevyParamError, ValueError) as exc:
        sys.exit(run.finish(_fail(exc, "cli.validate")))
    with run.output("checks.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["suite", "name", "passed", "value", "bound", "detail"])
        for c in checks:
            w.writerow([c.suite, c.name, int(c.passed), repr(float(c.value)), repr(float(c.bound)), c.detail])
    failed = [c for c in checks if not c.passed]
    run.write_json("report.json", {"passed": not failed, "failures": [c.as_dict() for c in failed]})
    for c in failed:
        click.echo(f"FAIL {c.suite}.{c.name}: value={c.value:.6g} bound={c.bound:.6g} {c.detail}".rstrip())
    click.echo(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    sys.exit(run.finish(EXIT_FAIL if failed else EXIT_OK))


def default_boxes(model, u: float, x) -> list[tuple]:
    """3^d unit cells (d <= 2) or 2d+1 axis cells around x, sized by the largest natural scale."""
    x = np.asarray(x, dtype=float)
    d = model.d
    w = max(float(levy1d.h_inverse(c, 1.0 / u)) for c in model.components)
    if d <= 2:
        offsets = [np.array(o, dtype=float) for o in itertools.product((-1, 0, 1), repeat=d)]
    else:
        offsets = [np.zeros(d)] + [s * e for e in np.eye(d) for s in (-1.0, 1.0)]
    return [(x + (o - 0.5) * w, x + (o + 0.5) * w) for o in offsets]


@main.command("mc-compare")
@_solver_opts(n_space=1024)
@click.option("--paths", default=100_000, show_default=True, type=int)
@click.option("--dt", default=1e-3, show_default=True, type=float)
@click.option("--tol", default=0.0, show_default=True, type=float,
              help="Allowance for solver error, added in quadrature to the MC standard error.")
@_common
def cmd_mc_compare(config, t, s, x, n_space, n_time, coverage, paths, dt, tol, out, seed, threads):
    """Compare parametrix box probabilities with an Euler Monte Carlo ensemble."""
    args = dict(t=t, s=s, x=x, n_space=n_space, n_time=n_time, coverage=coverage, paths=paths, dt=dt, tol=tol)
    run = _Run("mc-compare", out, config, seed, args)
    try:
        _threads(threads)
        if tol < 0:
            raise ConfigError("field 'tol' must be >= 0", stage="cli.mc-compare")
        model, run.manifest.model_hash = _load(config)
        x0 = _parse_x(x, model.d)
        cfg = _volterra_cfg(model, t, s, x0, n_space, n_time, coverage, 1e-6)
        mc = montecarlo.McConfig(paths, dt, seed=seed, threads=threads)
        sol = parametrix.build_solution(kernel.KernelEvaluator(model), cfg)
        ens = montecarlo.simulate_sde(model, t, s, x0, mc)
        rows = []
        for lo, hi in default_boxes(model, s - t, x0):
            pp = parametrix.box_probability(sol, lo, hi)
            pm, se = montecarlo.estimate_box_probability(ens, (lo, hi))
            scale = max(np.hypot(se, tol), 1.0 / ens.n_paths)
            rows.append((lo, hi, pp, pm, se, (pp - pm) / scale))
        bw = montecarlo.silverman_bandwidth(ens)
        kde = float(montecarlo.kde_density(ens, np.asarray(x0)[None, :], bw)[0])
    except (LevyParamError, ValueError) as exc:
        sys.exit(run.finish(_fail(exc, "cli.mc-compare")))
    d = model.d
    with run.output("boxes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"lo_{i + 1}" for i in range(d)] + [f"hi_{i + 1}" for i in range(d)]
                   + ["parametrix", "mc", "stderr", "z"])
        for lo, hi, pp, pm, se, z in rows:
            w.writerow([repr(float(v)) for v in (*lo, *hi, pp, pm, se, z)])
    zmax = max(abs(r[5]) for r in rows)
    run.write_json("report.json", {"max_abs_z": zmax, "z_limit": Z_LIMIT, "kde_at_source": kde,
                                   "parametrix_at_source": sol.at_source(), "bandwidth": bw,
                                   "mc": ens.meta, "parametrix": sol.report()})
    click.echo(f"max |z| = {zmax:.3f} over {len(rows)} boxes")
    sys.exit(run.finish(EXIT_NUMERIC if zmax > Z_LIMIT else EXIT_OK))


@main.command("study")
@click.argument("name", type=click.Choice(["ex1", "ex2"]))
@click.option("--alpha", default=1.2, show_default=True, type=float, help="ex1: stable index.")
@click.option("--c", "c", default=1.0, show_default=True, type=float, help="ex1: intensity.")
@click.option("--decay", default=0.5, show_default=True, type=float, help="ex1: atom ratio.")
@click.option("--gamma", "gammas", multiple=True, type=float, help="ex2: time exponents (default 0.3 and 0.8).")
@click.option("--alpha1", default=0.8, show_default=True, type=float)
@click.option("--alpha2", default=1.6, show_default=True, type=float)
@click.option("--tol", default=studies.SLOPE_TOL, show_default=True, type=float, help="ex2: slope tolerance.")
@_common
def cmd_study(name, alpha, c, decay, gammas, alpha1, alpha2, tol, out, seed, threads):
    """Reproduce a worked example; exit 1 if a tolerance is missed."""
    args = dict(alpha=alpha, c=c, decay=decay, gammas=list(gammas), alpha1=alpha1, alpha2=alpha2, tol=tol)
    run = _Run("study", out, None, seed, {"name": name, **args})
    try:
        _threads(threads)
        if name == "ex1":
            rep = studies.ex1_discretized_bound(alpha, c, decay, np.logspace(-3, 0, 31))
            with run.output("ex1_band.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["r", "h_r_alpha", "B1", "B2"])
                for r, h in zip(rep["r"], rep["h_r_alpha"]):
                    w.writerow([repr(r), repr(h), repr(rep["B1"]), repr(rep["B2"])])
            run.write_json("report.json", rep)
            passed = rep["passed"]
            click.echo(f"ex1 band [{rep['B1']:.6g}, {rep['B2']:.6g}]: {'pass' if passed else 'FAIL'}")
        else:
            reps = {g: studies.ex2_slope_study(g, alpha1, alpha2, tol=tol) for g in (gammas or (0.3, 0.8))}
            studies.write_fit_csv({f"gamma={g:g}": r["fit"] for g, r in reps.items()}, run.output("ex2_fits.csv"))
            run.write_json("report.json", {f"gamma={g:g}": r for g, r in reps.items()})
            for g, r in reps.items():
                click.echo(f"ex2 gamma={g:g}: slope {r['slope']:.4f} target {r['target']:.4f} +- {tol:g} "
                           f"max_residual {r['max_residual']:.3g}: {'pass' if r['passed'] else 'FAIL'}")
            passed = all(r["passed"] for r in reps.values())
    except (LevyParamError, ValueError) as exc:
        sys.exit(run.finish(_fail(exc, "cli.study")))
    sys.exit(run.finish(EXIT_OK if passed else EXIT_FAIL))


if __name__ == "__main__":  # pragma: no cover
    main()
