"""Least-squares power-law fits in log-log coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SlopeFit:
    """log(value) ~ intercept + slope * log(abscissa)."""

    grid: list
    slope: float
    intercept: float
    max_residual: float

    def as_dict(self) -> dict:
        return {"grid": [list(map(float, g)) for g in self.grid], "slope": self.slope,
                "intercept": self.intercept, "max_residual": self.max_residual}


def fit_loglog(abscissa, values, min_points: int = 4) -> SlopeFit:
    a = np.asarray(abscissa, dtype=float)
    v = np.asarray(values, dtype=float)
    if a.shape != v.shape or a.ndim != 1:
        raise ValueError("abscissa and values must be 1-d arrays of equal length")
    if a.size < min_points:
        raise ValueError(f"a slope fit needs at least {min_points} points, got {a.size}")
    if np.any(a <= 0) or np.any(v <= 0):
        raise ValueError("log-log fit needs positive abscissae and values")
    X, Y = np.log(a), np.log(v)
    slope, intercept = np.polyfit(X, Y, 1)
    resid = Y - (intercept + slope * X)
    return SlopeFit([(float(p), float(q)) for p, q in zip(a, v)], float(slope), float(intercept),
                    float(np.max(np.abs(resid))))
