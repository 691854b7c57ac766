"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class LevyParamError(Exception):
    """Base class; ``stage`` names the module/operation that failed."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class QuadratureError(LevyParamError):
    """An adaptive quadrature did not reach its tolerance."""


class CutoffError(LevyParamError):
    """No frequency cutoff makes the inversion integrand negligible."""


class AdmissibilityError(LevyParamError, ValueError):
    """Model parameters violate a structural assumption."""


class ConvergenceError(LevyParamError):
    """An iterative scheme (series, bisection) failed to converge."""


class ConfigError(LevyParamError, ValueError):
    """Invalid run configuration."""
