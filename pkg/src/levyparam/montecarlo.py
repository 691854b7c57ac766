"""Monte Carlo oracle: noise increments, the Euler scheme and density estimators.

Paths are processed in fixed blocks; block b draws from the stream
SeedSequence(seed, spawn_key=(b,)), so results do not depend on how blocks
are scheduled over threads.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from . import levy1d
from .exceptions import ConfigError, LevyParamError

BLOCK = 1 << 14
TARGET_JUMPS = 50.0
GAUSS_RATIO = 0.3
_SUBSTITUTIONS = ("gaussian", "drop")


@dataclass(frozen=True)
class McConfig:
    """Euler Monte Carlo settings.

    ``jump_floor`` and ``substitution`` default to the automatic rule;
    ``threads`` defaults to LEVYPARAM_THREADS, then 1.
    """

    n_paths: int
    dt: float
    jump_floor: float | None = None
    seed: int = 0
    substitution: str | None = None
    threads: int | None = None

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise ConfigError("field 'n_paths' must be >= 1", stage="montecarlo.McConfig")
        if not self.dt > 0:
            raise ConfigError("field 'dt' must be positive", stage="montecarlo.McConfig")
        if self.jump_floor is not None and not self.jump_floor > 0:
            raise ConfigError("field 'jump_floor' must be positive", stage="montecarlo.McConfig")
        if self.substitution is not None and self.substitution not in _SUBSTITUTIONS:
            raise ConfigError(f"field 'substitution' must be one of {_SUBSTITUTIONS}", stage="montecarlo.McConfig")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("field 'seed' must be a 64-bit unsigned integer", stage="montecarlo.McConfig")
        if self.threads is not None and int(self.threads) < 1:
            raise ConfigError("field 'threads' must be >= 1", stage="montecarlo.McConfig")


@dataclass
class McEnsemble:
    endpoints: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.endpoints = np.asarray(self.endpoints, dtype=float)
        if self.endpoints.ndim == 1:
            self.endpoints = self.endpoints[:, None]

    @property
    def n_paths(self) -> int:
        return self.endpoints.shape[0]

    @property
    def d(self) -> int:
        return self.endpoints.shape[1]


# ---------------------------------------------------------------------------
# increments
# ---------------------------------------------------------------------------


def stable_scale(comp: levy1d.LevyComponent) -> float:
    """sigma with psi(xi) = (sigma |xi|)^alpha."""
    m = comp.measure
    return float(m.psi(1.0)) ** (1.0 / m.alpha)


def standard_stable(alpha: float, rng: np.random.Generator, size) -> np.ndarray:
    """Symmetric stable variates with characteristic function exp(-|xi|^alpha)."""
    V = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, size)
    if alpha == 1.0:
        return np.tan(V)
    W = rng.standard_exponential(size)
    return (np.sin(alpha * V) / np.cos(V) ** (1.0 / alpha)
            * (np.cos((1.0 - alpha) * V) / W) ** ((1.0 - alpha) / alpha))


def default_jump_floor(comp: levy1d.LevyComponent, dt: float) -> float:
    """delta with nu(|z| > delta) dt = TARGET_JUMPS."""
    m = comp.measure
    target = TARGET_JUMPS / dt
    if isinstance(m, levy1d.Stable):
        return (2.0 * m.c / (m.alpha * target)) ** (1.0 / m.alpha)
    if isinstance(m, levy1d.DiscretizedStable):
        ks = np.arange(1, 400)
        cum = np.cumsum(m.mass(ks))
        k = int(np.searchsorted(cum, target))
        return float(m.rho(min(k + 1, ks[-1])))
    f = lambda lr: math.log(float(m.tail(math.exp(lr)))) - math.log(target)
    return math.exp(optimize.brentq(f, math.log(1e-12), math.log(1e6)))


def default_substitution(comp: levy1d.LevyComponent, dt: float, floor: float) -> str:
    sd = math.sqrt(float(comp.measure.inner_moment(floor)) * dt)
    return "gaussian" if sd / floor > GAUSS_RATIO else "drop"


class _TailSampler:
    """|J| for the one-sided measure restricted to (floor, inf), by tabulated inversion."""

    def __init__(self, measure, floor: float):
        self.m = measure
        self.floor = floor
        r = floor * np.logspace(0.0, 14.0, 2001)
        T = np.asarray(measure.tail(r), dtype=float) / float(measure.tail(floor))
        keep = np.concatenate([[True], np.diff(T) < 0])
        self.logT, self.logr = np.log(np.maximum(T[keep], 1e-300))[::-1], np.log(r[keep])[::-1]

    def __call__(self, rng, n: int) -> np.ndarray:
        q = np.log(rng.uniform(0.0, 1.0, n))
        return np.exp(np.interp(q, self.logT, self.logr))


def _compound_increment(comp, dt, rng, size, floor, substitution):
    m = comp.measure
    n = int(np.prod(size)) if size is not None else 1
    out = np.zeros(n)
    if isinstance(m, levy1d.DiscretizedStable):
        K = int(m.count_above(floor))
        for k in range(1, K + 1):
            lam = 0.5 * float(m.mass(k)) * dt
            out += float(m.rho(k)) * (rng.poisson(lam, n) - rng.poisson(lam, n))
    else:
        lam = float(m.tail(floor)) * dt
        counts = rng.poisson(lam, n)
        total = int(counts.sum())
        if total:
            sizes = _TailSampler(m, floor)(rng, total) * rng.choice([-1.0, 1.0], total)
            idx = np.repeat(np.arange(n), counts)
            np.add.at(out, idx, sizes)
    if substitution == "gaussian":
        out += math.sqrt(float(m.inner_moment(floor)) * dt) * rng.standard_normal(n)
    return out.reshape(size) if size is not None else float(out[0])


def sample_increment(comp: levy1d.LevyComponent, dt: float, rng: np.random.Generator, size=None,
                     jump_floor: float | None = None, substitution: str | None = None):
    """Increment(s) of the component over a time step dt.

    Stable components are sampled exactly; other measures use compound
    Poisson jumps above ``jump_floor`` and the chosen small-jump substitution.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    m = comp.measure
    if isinstance(m, levy1d.Stable) and jump_floor is None:
        z = stable_scale(comp) * dt ** (1.0 / m.alpha) * standard_stable(m.alpha, rng, size)
        return float(z) if size is None else z
    floor = default_jump_floor(comp, dt) if jump_floor is None else float(jump_floor)
    sub = default_substitution(comp, dt, floor) if substitution is None else substitution
    return _compound_increment(comp, dt, rng, size, floor, sub)


# ---------------------------------------------------------------------------
# Euler scheme
# ---------------------------------------------------------------------------


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(block),))))


def _resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("LEVYPARAM_THREADS")
    return max(1, int(env)) if env else 1


def simulate_sde(model, t: float, s: float, x, cfg: McConfig) -> McEnsemble:
    """Endpoints X_s of the Euler scheme started from X_t = x.

    Each step adds sum_k V_r(X, dZ_k e_k) with the coefficients frozen at the
    step start; dZ_k are the coordinate increments over the step.
    """
    if not s > t:
        raise ValueError(f"need s > t, got t={t}, s={s}")
    d = model.d
    x = np.asarray(x, dtype=float).reshape(d)
    fld = model.coefficients
    horizon = s - t
    n_steps = max(1, int(math.ceil(horizon / cfg.dt - 1e-9)))
    dt = horizon / n_steps
    exact = cfg.jump_floor is None and all(isinstance(c.measure, levy1d.Stable) for c in model.components)
    floors, subs, comp_var = [], [], []
    for c in model.components:
        if exact:
            floors.append(None)
            subs.append(None)
            comp_var.append(0.0)
            continue
        fl = default_jump_floor(c, dt) if cfg.jump_floor is None else float(cfg.jump_floor)
        sb = default_substitution(c, dt, fl) if cfg.substitution is None else cfg.substitution
        floors.append(fl)
        subs.append(sb)
        comp_var.append(float(c.measure.inner_moment(fl)) * dt if sb == "gaussian" else 0.0)
    eye = np.eye(d)

    def run_block(b: int) -> np.ndarray:
        rng = _block_rng(cfg.seed, b)
        n = min(BLOCK, cfg.n_paths - b * BLOCK)
        X = np.broadcast_to(x, (n, d)).copy()
        for i in range(n_steps):
            r = t + i * dt
            dZ = np.stack([sample_increment(c, dt, rng, n, floors[k], subs[k])
                           for k, c in enumerate(model.components)], -1)
            if fld.u_is_zero:
                X = X + np.einsum("pij,pj->pi", _as_batch(fld.A(r, X), n, d), dZ)
            else:
                X = X + sum(fld.V(r, X, dZ[:, k:k + 1] * eye[k]) for k in range(d))
        return X

    n_blocks = (cfg.n_paths + BLOCK - 1) // BLOCK
    threads = _resolve_threads(cfg.threads)
    if threads == 1:
        parts = [run_block(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_block, range(n_blocks)))
    meta = {"n_paths": cfg.n_paths, "dt": dt, "n_steps": n_steps, "seed": int(cfg.seed), "t": t, "s": s,
            "x": x.tolist(), "sampler": "exact-stable" if exact else "compound-poisson",
            "jump_floor": floors, "substitution": subs, "compensator_variance": comp_var}
    return McEnsemble(np.concatenate(parts), meta)


def _as_batch(A: np.ndarray, n: int, d: int) -> np.ndarray:
    return np.broadcast_to(A, (n, d, d)) if A.ndim == 2 else A


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def estimate_box_probability(ens: McEnsemble, box) -> tuple[float, float]:
    """(frequency, binomial standard error) of endpoints in box = (lo, hi)."""
    if ens.n_paths == 0:
        raise LevyParamError("empty ensemble", stage="montecarlo.estimate_box_probability")
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (ens.d,)) for b in box)
    inside = np.all((ens.endpoints >= lo) & (ens.endpoints <= hi), axis=1)
    p = float(inside.mean())
    return p, math.sqrt(p * (1.0 - p) / ens.n_paths)


def silverman_bandwidth(ens: McEnsemble) -> np.ndarray:
    """Per-coordinate rule-of-thumb bandwidth with the robust spread estimate."""
    X = ens.endpoints
    n, d = X.shape
    q75, q25 = np.percentile(X, [75, 25], axis=0)
    spread = np.minimum(X.std(axis=0, ddof=1), (q75 - q25) / 1.349) if n > 1 else np.ones(d)
    return 0.9 * spread * n ** (-1.0 / (d + 4.0))


def kde_density(ens: McEnsemble, y, bandwidth) -> np.ndarray:
    """Product-Gaussian kernel density estimate at y (..., d)."""
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (ens.d,))
    if np.any(bw <= 0):
        raise ValueError("bandwidth must be positive")
    y = np.asarray(y, dtype=float)
    flat = y.reshape(-1, ens.d)
    norm = np.prod(bw) * (2.0 * np.pi) ** (ens.d / 2.0) * ens.n_paths
    out = np.empty(flat.shape[0])
    step = max(1, (1 << 22) // max(ens.n_paths, 1))
    for a in range(0, flat.shape[0], step):
        blk = flat[a:a + step]
        z = (blk[:, None, :] - ens.endpoints[None, :, :]) / bw
        out[a:a + step] = np.exp(-0.5 * np.sum(z * z, axis=-1)).sum(axis=1) / norm
    return out.reshape(y.shape[:-1]) if y.ndim > 1 else float(out[0])


def write_endpoints(ens: McEnsemble, path) -> Path:
    """CSV (path, x_1..x_d) for .csv paths, otherwise NumPy binary."""
    path = Path(path)
    if path.suffix == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path"] + [f"x_{i + 1}" for i in range(ens.d)])
            for i, row in enumerate(ens.endpoints):
                w.writerow([i] + [repr(float(v)) for v in row])
    else:
        np.save(path, ens.endpoints)
    return path
