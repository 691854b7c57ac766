"""Estimator-style wrapper: fit on source points, predict heat-kernel densities."""

from __future__ import annotations

import inspect
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from . import kernel, parametrix
from .exceptions import ConfigError, LevyParamError


class NotFittedError(LevyParamError, AttributeError):
    """The estimator was used before ``fit``."""


def check_points(X, d: int | None = None, name: str = "X") -> np.ndarray:
    """2-d float array of finite points; a single point becomes one row."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :] if d is None or arr.size == d else arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ConfigError(f"{name} must be a nonempty 2-d array of points, got shape {arr.shape}",
                          stage="estimator.check_points")
    if d is not None and arr.shape[1] != d:
        raise ConfigError(f"{name} has {arr.shape[1]} coordinates, expected {d}", stage="estimator.check_points")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite values", stage="estimator.check_points")
    return arr


def check_is_fitted(est, attributes=("solutions_",)) -> None:
    if not all(hasattr(est, a) for a in attributes):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first", stage="estimator.check_is_fitted")


def resolve_model(model) -> kernel.ModelSpec:
    if isinstance(model, kernel.ModelSpec):
        return model
    if isinstance(model, Mapping):
        return kernel.model_from_dict(model)
    if isinstance(model, (str, Path)):
        return kernel.load_model(model)
    raise ConfigError("model must be a ModelSpec, a configuration mapping or a JSON path",
                      stage="estimator.resolve_model")


class HeatKernelEstimator:
    """p_{t,s}(x, .) for each fitted source x.

    ``fit(X)`` solves one kernel per row of X; ``predict(Y)`` returns
    densities at Y (one row per source); ``transform(X)`` returns per-source
    diagnostics; ``score(Y)`` is the mean log density of samples under the
    first source.
    """

    FEATURES = ("mass", "p_at_source", "l1_r", "l1_rtilde", "diagonal_ratio")

    def __init__(self, model=None, t: float = 0.0, s: float = 0.25, n_space: int = 512, n_time: int = 16,
                 coverage: float | None = None, tol: float = 1e-6, method: str = "resolvent"):
        self.model = model
        self.t = t
        self.s = s
        self.n_space = n_space
        self.n_time = n_time
        self.coverage = coverage
        self.tol = tol
        self.method = method

    # -- parameter protocol -----------------------------------------------
    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {k: getattr(self, k) for k in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for k, v in params.items():
            if k not in valid:
                raise ConfigError(f"invalid parameter {k!r} for {type(self).__name__}", stage="estimator.set_params")
            setattr(self, k, v)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items() if k != "model")
        return f"{type(self).__name__}({args})"

    # -- estimator protocol -------------------------------------------------
    def _config(self, model, x) -> parametrix.VolterraConfig:
        cov = parametrix.default_coverage(model) if self.coverage is None else self.coverage
        return parametrix.VolterraConfig(float(self.t), float(self.s), tuple(x), n_space=int(self.n_space),
                                         n_time=int(self.n_time), coverage=cov, tol=float(self.tol),
                                         method=self.method)

    def fit(self, X, y=None):
        if self.model is None:
            raise ConfigError("parameter 'model' is required", stage="estimator.fit")
        model = resolve_model(self.model)
        X = check_points(X, model.d)
        ke = kernel.KernelEvaluator(model)
        self.model_ = model
        self.sources_ = X
        self.n_features_in_ = model.d
        self.solutions_ = [parametrix.build_solution(ke, self._config(model, x)) for x in X]
        return self

    def predict(self, Y) -> np.ndarray:
        check_is_fitted(self)
        Y = check_points(Y, self.n_features_in_, "Y")
        return np.stack([parametrix.density_at(sol, Y) for sol in self.solutions_])

    def transform(self, X=None) -> np.ndarray:
        """Diagnostics per source; X, if given, must be the fitted sources."""
        check_is_fitted(self)
        if X is not None:
            X = check_points(X, self.n_features_in_)
            if X.shape != self.sources_.shape or not np.allclose(X, self.sources_):
                raise ConfigError("transform works on the fitted sources only", stage="estimator.transform")
        rows = []
        for sol in self.solutions_:
            rep = parametrix.residual_report(sol)
            rows.append([sol.mass, sol.at_source(), rep.l1_r, rep.l1_rtilde, rep.diagonal_ratio])
        return np.asarray(rows)

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).transform()

    def score(self, Y, y=None) -> float:
        """Mean log density of the samples Y under the first source's kernel."""
        dens = self.predict(Y)[0]
        return float(np.mean(np.log(np.maximum(dens, np.finfo(float).tiny))))
