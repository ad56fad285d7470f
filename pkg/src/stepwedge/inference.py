"""Linear contrasts of the fixed effects, standard errors and intervals."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .design import FixedEffects
from .errors import InvalidParameterError, NegativeVarianceError, NotEtiError

__all__ = [
    "EstimandRow",
    "contrast_tate",
    "contrast_lte",
    "contrast_exposure",
    "critical_value",
    "infer",
    "report",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("estimand", "estimator", "reference", "estimate", "se", "lo", "hi", "df", "covered")


def contrast_tate(fixed: FixedEffects, strict: bool = True) -> np.ndarray:
    """Equal weights ``1/(J-1)`` over the exposure columns.

    For an immediate-treatment model the time-averaged effect is the single
    treatment coefficient; that contrast is returned when ``strict`` is False.
    """
    c = np.zeros(fixed.p)
    if not fixed.is_eti:
        if strict:
            raise NotEtiError("the time-averaged contrast needs exposure-time columns")
        c[fixed.num_periods] = 1.0
        return c
    c[fixed.treatment_slice] = 1.0 / (fixed.num_periods - 1)
    return c


def contrast_lte(fixed: FixedEffects, strict: bool = True) -> np.ndarray:
    """Unit vector on the longest-exposure column."""
    c = np.zeros(fixed.p)
    if not fixed.is_eti:
        if strict:
            raise NotEtiError("the long-term contrast needs exposure-time columns")
        c[fixed.num_periods] = 1.0
        return c
    c[fixed.p - 1] = 1.0
    return c


def contrast_exposure(fixed: FixedEffects, exposure: int) -> np.ndarray:
    if not fixed.is_eti:
        raise NotEtiError("exposure-specific contrasts need exposure-time columns")
    if not 1 <= exposure <= fixed.num_periods - 1:
        raise InvalidParameterError(f"exposure must lie in 1..{fixed.num_periods - 1}")
    c = np.zeros(fixed.p)
    c[fixed.num_periods + exposure - 1] = 1.0
    return c


def critical_value(reference: str, level: float, num_clusters: int | None = None) -> tuple[float, float]:
    """Return ``(q, df)``; ``df`` is ``inf`` for the normal reference."""
    if not 0.0 < level < 1.0:
        raise InvalidParameterError("level must lie in (0, 1)")
    prob = 0.5 * (1.0 + level)
    if reference == "normal":
        return float(stats.norm.ppf(prob)), float("inf")
    if reference == "t_Iminus2":
        if num_clusters is None or num_clusters - 2 < 1:
            raise InvalidParameterError("t reference needs at least 3 clusters")
        df = num_clusters - 2
        return float(stats.t.ppf(prob, df)), float(df)
    raise InvalidParameterError(f"unknown reference {reference!r}")


@dataclass(frozen=True)
class EstimandRow:
    estimand: str
    estimator: str
    reference: str
    estimate: float
    se: float
    lo: float
    hi: float
    df: float
    covered: bool | None = None

    def as_tuple(self):
        return tuple(getattr(self, k) for k in REPORT_COLUMNS)


def infer(beta, variance, contrast, reference: str = "t_Iminus2", level: float = 0.95,
          truth: float | None = None, num_clusters: int | None = None,
          estimand: str = "custom", estimator: str | None = None) -> EstimandRow:
    """Point estimate, SE and interval for ``contrast @ beta``.

    ``variance`` is a :class:`~stepwedge.sandwich.VarianceEstimate` or a
    plain ``p x p`` array (then ``num_clusters`` is needed for the t reference).
    """
    beta = np.asarray(beta, dtype=float)
    c = np.asarray(contrast, dtype=float)
    mat = getattr(variance, "matrix", variance)
    mat = np.asarray(mat, dtype=float)
    if c.shape != beta.shape or mat.shape != (c.size, c.size):
        raise InvalidParameterError("contrast, coefficients and variance disagree in size")
    if num_clusters is None:
        num_clusters = getattr(variance, "num_clusters", None)
    if estimator is None:
        estimator = getattr(variance, "estimator", "custom")
    q, df = critical_value(reference, level, num_clusters)
    est = float(c @ beta)
    var = float(c @ mat @ c)
    if not np.any(c):
        warnings.warn("zero contrast gives a degenerate interval", RuntimeWarning, stacklevel=2)
    if var < 0:
        scale = float(np.abs(c) @ np.abs(mat) @ np.abs(c))
        if var < -1e-12 * max(scale, 1e-300):
            raise NegativeVarianceError(f"{estimator}: contrast variance {var:.3g} is negative")
        var = 0.0
    se = float(np.sqrt(var))
    lo, hi = est - q * se, est + q * se
    covered = None if truth is None else bool(lo <= truth <= hi)
    return EstimandRow(estimand, estimator, reference, est, se, lo, hi, df, covered)


def report(fitted, variances: dict, fixed: FixedEffects, references=("t_Iminus2", "normal"),
           level: float = 0.95, truths: dict | None = None, exposures: bool = True) -> list[EstimandRow]:
    """Rows for TATE, LTE and each exposure (or the single effect for IT)."""
    truths = truths or {}
    if fixed.is_eti:
        contrasts = {"TATE": contrast_tate(fixed), "LTE": contrast_lte(fixed)}
        if exposures:
            for e in range(1, fixed.num_periods):
                contrasts[f"delta{e}"] = contrast_exposure(fixed, e)
    else:
        c = contrast_tate(fixed, strict=False)
        contrasts = {"TATE": c, "LTE": c.copy(), "delta": c.copy()}
    rows = []
    for name, c in contrasts.items():
        for est_name, var in variances.items():
            for ref in references:
                rows.append(infer(fitted.beta, var, c, ref, level, truths.get(name),
                                  fitted.num_clusters, name, est_name))
    return rows
