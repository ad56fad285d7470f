"""Random-effects structures and intracluster-correlation summaries.

Five structures are supported as data-generating models: EXCH, NE, NE_RI, ED
and ED_RI.  Only the exchangeable family (EXCH, NE, NE_RI) can be used as a
working structure when fitting, because those keep every cluster-period's
observations exchangeable, which the fitters rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .design import Design
from .errors import InvalidParameterError, OutOfRangeError, UnsupportedError

__all__ = [
    "KINDS",
    "WORKING_KINDS",
    "RandomStructure",
    "IccSummary",
    "ar1_matrix",
    "normalize_kind",
    "random_effect_covariance",
    "marginal_covariance",
    "icc_summary",
    "working_parameters",
    "working_loading",
    "LOGISTIC_RESIDUAL_VAR",
]

KINDS = ("EXCH", "NE", "NE_RI", "ED", "ED_RI")
WORKING_KINDS = ("EXCH", "NE", "NE_RI")
LOGISTIC_RESIDUAL_VAR = math.pi**2 / 3

_PARAMS = {
    "EXCH": ("sigma_u",),
    "NE": ("sigma_u", "sigma_v"),
    "NE_RI": ("sigma_u", "sigma_v", "sigma_t"),
    "ED": ("sigma_gamma", "rho"),
    "ED_RI": ("sigma_gamma", "rho", "sigma_t"),
}


def normalize_kind(kind: str) -> str:
    k = str(kind).strip().upper().replace("-", "_")
    if k not in KINDS:
        raise InvalidParameterError(f"unknown random-effects structure {kind!r}")
    return k


def ar1_matrix(rho: float, size: int) -> np.ndarray:
    """AR(1) correlation matrix with entries ``rho**|j - j'|``."""
    if not 0.0 <= rho < 1.0:
        raise InvalidParameterError(f"decay must lie in [0, 1), got {rho}")
    if size < 1:
        raise InvalidParameterError("size must be positive")
    lag = np.abs(np.subtract.outer(np.arange(size), np.arange(size)))
    return np.power(rho, lag, dtype=float)


@dataclass(frozen=True)
class RandomStructure:
    kind: str
    sigma_u: float = 0.0
    sigma_v: float = 0.0
    sigma_gamma: float = 0.0
    rho: float = 0.0
    sigma_t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        for name in ("sigma_u", "sigma_v", "sigma_gamma", "sigma_t"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise InvalidParameterError(f"{name} must be a finite non-negative number")
        if self.kind.startswith("ED") and not 0.0 <= self.rho < 1.0:
            raise InvalidParameterError(f"decay must lie in [0, 1), got {self.rho}")

    @property
    def parameter_names(self) -> tuple[str, ...]:
        return _PARAMS[self.kind]

    @property
    def has_random_intervention(self) -> bool:
        return self.kind.endswith("_RI")

    def effect_names(self, num_periods: int) -> list[str]:
        if self.kind in ("ED", "ED_RI"):
            names = [f"gamma{j}" for j in range(1, num_periods + 1)]
        else:
            names = ["u"]
            if self.kind in ("NE", "NE_RI"):
                names += [f"v{j}" for j in range(1, num_periods + 1)]
        if self.has_random_intervention:
            names.append("t")
        return names

    def effect_covariance(self, num_periods: int) -> np.ndarray:
        """Covariance of the stacked random-effect vector of one cluster."""
        J = num_periods
        if self.kind in ("ED", "ED_RI"):
            blocks = [self.sigma_gamma**2 * ar1_matrix(self.rho, J)]
        else:
            blocks = [np.array([[self.sigma_u**2]])]
            if self.kind in ("NE", "NE_RI"):
                blocks.append(self.sigma_v**2 * np.eye(J))
        if self.has_random_intervention:
            blocks.append(np.array([[self.sigma_t**2]]))
        q = sum(b.shape[0] for b in blocks)
        cov = np.zeros((q, q))
        k = 0
        for b in blocks:
            m = b.shape[0]
            cov[k:k + m, k:k + m] = b
            k += m
        return cov

    def effect_factor(self, num_periods: int) -> np.ndarray:
        """Lower-triangular ``L`` with ``L @ L.T == effect_covariance``, valid at zero SDs."""
        J = num_periods
        if self.kind in ("ED", "ED_RI"):
            blocks = [self.sigma_gamma * np.linalg.cholesky(ar1_matrix(self.rho, J))]
        else:
            blocks = [np.array([[self.sigma_u]])]
            if self.kind in ("NE", "NE_RI"):
                blocks.append(self.sigma_v * np.eye(J))
        if self.has_random_intervention:
            blocks.append(np.array([[self.sigma_t]]))
        q = sum(b.shape[0] for b in blocks)
        L = np.zeros((q, q))
        k = 0
        for b in blocks:
            m = b.shape[0]
            L[k:k + m, k:k + m] = b
            k += m
        return L

    def loading(self, treat: np.ndarray) -> np.ndarray:
        """J x q map from the cluster's periods to its random effects."""
        treat = np.asarray(treat, dtype=float)
        J = treat.shape[0]
        parts = []
        if self.kind in ("ED", "ED_RI"):
            parts.append(np.eye(J))
        else:
            parts.append(np.ones((J, 1)))
            if self.kind in ("NE", "NE_RI"):
                parts.append(np.eye(J))
        if self.has_random_intervention:
            parts.append(treat[:, None])
        return np.hstack(parts)


def random_effect_covariance(structure: RandomStructure, design: Design, cluster: int):
    """Return ``(cov, loading)`` for one cluster.

    ``loading`` has one row per period; every individual in a cluster-period
    loads on the effects through that row.
    """
    if cluster not in design.crossover:
        raise OutOfRangeError(f"cluster {cluster} not in design")
    treat = (design.periods >= design.crossover[cluster]).astype(float)
    return structure.effect_covariance(design.num_periods), structure.loading(treat)


def marginal_covariance(
    structure: RandomStructure,
    design: Design,
    cluster: int,
    residual_var: float,
    size: int | None = None,
) -> np.ndarray:
    """Observation-level covariance for one cluster (period-major ordering)."""
    K = design.cluster_period_size if size is None else size
    cov, load = random_effect_covariance(structure, design, cluster)
    Z = np.repeat(load, K, axis=0)
    return Z @ cov @ Z.T + residual_var * np.eye(Z.shape[0])


@dataclass(frozen=True)
class IccSummary:
    wp_icc: float
    cac: float
    residual_var: float
    bp_icc: Callable[[int], float]
    arm: str | None = None


def icc_summary(structure: RandomStructure, residual_var: float, arm: str | None = None) -> IccSummary:
    """Within/between-period ICCs and cluster autocorrelation.

    For structures with a random intervention effect the correlations differ
    between arms, so ``arm`` must be ``"control"`` or ``"treatment"``.
    """
    if residual_var <= 0:
        raise InvalidParameterError("residual variance must be positive")
    s = structure
    if s.has_random_intervention:
        if arm not in ("control", "treatment"):
            raise UnsupportedError(
                f"{s.kind} implies different ICCs by arm; pass arm='control' or arm='treatment'"
            )
    elif arm not in (None, "control", "treatment"):
        raise InvalidParameterError(f"unknown arm {arm!r}")
    extra = s.sigma_t**2 if (s.has_random_intervention and arm == "treatment") else 0.0

    if s.kind in ("ED", "ED_RI"):
        total = s.sigma_gamma**2 + extra + residual_var
        wp = (s.sigma_gamma**2 + extra) / total
        rho, g2 = s.rho, s.sigma_gamma**2

        def bp(lag: int) -> float:
            return (g2 * rho ** abs(lag) + extra) / total

        cac = bp(1) / wp if wp > 0 else 1.0
    else:
        u2 = s.sigma_u**2
        v2 = s.sigma_v**2 if s.kind in ("NE", "NE_RI") else 0.0
        total = u2 + v2 + extra + residual_var
        wp = (u2 + v2 + extra) / total
        bp_val = (u2 + extra) / total

        def bp(lag: int) -> float:
            return wp if lag == 0 else bp_val

        cac = bp_val / wp if wp > 0 else 1.0
    return IccSummary(wp_icc=wp, cac=cac, residual_var=residual_var, bp_icc=bp, arm=arm)


def working_parameters(kind: str) -> tuple[str, ...]:
    k = normalize_kind(kind)
    if k not in WORKING_KINDS:
        raise UnsupportedError(f"{k} cannot be used as a working structure")
    return _PARAMS[k]


def working_loading(kind: str, period_index: np.ndarray, treat: np.ndarray, num_periods: int):
    """Cell-level random-effect loadings for a working structure.

    Returns ``(Z, owner)`` where ``Z`` is ``(n, q)`` and ``owner[k]`` gives the
    index into :func:`working_parameters` of the SD scaling effect ``k``.
    """
    k = normalize_kind(kind)
    working_parameters(k)
    period_index = np.asarray(period_index, dtype=int)
    treat = np.asarray(treat, dtype=float)
    n = period_index.shape[0]
    cols = [np.ones((n, 1))]
    owner = [0]
    if k in ("NE", "NE_RI"):
        V = np.zeros((n, num_periods))
        V[np.arange(n), period_index] = 1.0
        cols.append(V)
        owner += [1] * num_periods
    if k == "NE_RI":
        cols.append(treat[:, None])
        owner.append(2)
    return np.hstack(cols), np.array(owner)
