"""Stepped-wedge layouts, exposure bookkeeping and fixed-effects design rows.

Clusters and periods are labelled from 1.  Column layout of a design row is
``[intercept | period 2..J | treatment block]`` where the treatment block is a
single column for the immediate-treatment model and ``J - 1`` exposure
indicators for the exposure-time model.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InvalidDesignError, NonDivisibleAllocationError, OutOfRangeError

__all__ = [
    "Design",
    "FixedEffects",
    "build_standard_design",
    "exposure_time",
    "design_row",
]


@dataclass(frozen=True)
class Design:
    """Cross-sectional stepped-wedge layout.

    Parameters
    ----------
    num_clusters, num_periods, cluster_period_size : int
        I, J and K.
    crossover : mapping
        Cluster id -> first intervention period, each in ``2..J``.
    """

    num_clusters: int
    num_periods: int
    cluster_period_size: int
    crossover: Mapping[int, int] = field(repr=False)

    def __post_init__(self):
        if self.num_periods < 3:
            raise InvalidDesignError(f"need at least 3 periods, got {self.num_periods}")
        if self.num_clusters < 1 or self.cluster_period_size < 1:
            raise InvalidDesignError("cluster count and cluster-period size must be positive")
        if sorted(self.crossover) != list(range(1, self.num_clusters + 1)):
            raise InvalidDesignError("crossover map must cover clusters 1..I exactly")
        for cl, c in self.crossover.items():
            if not 2 <= c <= self.num_periods:
                raise InvalidDesignError(
                    f"cluster {cl}: crossover period {c} outside 2..{self.num_periods}"
                )
        object.__setattr__(self, "crossover", dict(self.crossover))

    @property
    def clusters(self) -> np.ndarray:
        return np.arange(1, self.num_clusters + 1)

    @property
    def periods(self) -> np.ndarray:
        return np.arange(1, self.num_periods + 1)

    @property
    def crossover_array(self) -> np.ndarray:
        """Crossover periods ordered by cluster id."""
        return np.array([self.crossover[c] for c in self.clusters])

    @property
    def max_exposure(self) -> int:
        return self.num_periods - 1

    def exposure_matrix(self) -> np.ndarray:
        """I x J array of exposure times."""
        c = self.crossover_array[:, None]
        j = self.periods[None, :]
        return np.maximum(0, j - c + 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("cluster,sequence,crossover_period\n")
        for cl in self.clusters:
            c = self.crossover[cl]
            buf.write(f"{cl},{c - 1},{c}\n")
        return buf.getvalue()


def build_standard_design(num_clusters: int, num_periods: int, cluster_period_size: int) -> Design:
    """Even allocation of clusters to the ``J - 1`` sequences, in ascending id order.

    >>> d = build_standard_design(8, 5, 10)
    >>> [d.crossover[c] for c in d.clusters]
    [2, 2, 3, 3, 4, 4, 5, 5]
    """
    if num_periods < 3:
        raise InvalidDesignError(f"need at least 3 periods, got {num_periods}")
    n_seq = num_periods - 1
    if num_clusters < n_seq or num_clusters % n_seq:
        raise NonDivisibleAllocationError(
            f"{num_clusters} clusters cannot be split evenly over {n_seq} sequences"
        )
    per_seq = num_clusters // n_seq
    crossover = {cl: (cl - 1) // per_seq + 2 for cl in range(1, num_clusters + 1)}
    return Design(num_clusters, num_periods, cluster_period_size, crossover)


def _check_ids(design: Design, cluster: int, period: int) -> None:
    if cluster not in design.crossover:
        raise OutOfRangeError(f"cluster {cluster} not in design")
    if not 1 <= period <= design.num_periods:
        raise OutOfRangeError(f"period {period} outside 1..{design.num_periods}")


def exposure_time(design: Design, cluster: int, period: int) -> int:
    _check_ids(design, cluster, period)
    return max(0, period - design.crossover[cluster] + 1)


@dataclass(frozen=True)
class FixedEffects:
    """Fixed-effect structure: ``treatment`` is ``"it"`` or ``"eti"``."""

    treatment: str
    num_periods: int

    def __post_init__(self):
        t = self.treatment.lower()
        if t not in ("it", "eti"):
            raise ValueError(f"unknown treatment structure {self.treatment!r}")
        if self.num_periods < 2:
            raise InvalidDesignError("need at least 2 periods")
        object.__setattr__(self, "treatment", t)

    @property
    def is_eti(self) -> bool:
        return self.treatment == "eti"

    @property
    def num_treatment_columns(self) -> int:
        return self.num_periods - 1 if self.is_eti else 1

    @property
    def p(self) -> int:
        return self.num_periods + self.num_treatment_columns

    @property
    def treatment_slice(self) -> slice:
        return slice(self.num_periods, self.p)

    @property
    def columns(self) -> list[str]:
        cols = ["intercept"] + [f"period{j}" for j in range(2, self.num_periods + 1)]
        if self.is_eti:
            cols += [f"delta{e}" for e in range(1, self.num_periods)]
        else:
            cols.append("delta")
        return cols

    def matrix(self, periods, exposures) -> np.ndarray:
        """Design rows for arrays of (period, exposure) pairs."""
        periods = np.asarray(periods, dtype=int)
        exposures = np.asarray(exposures, dtype=int)
        if np.any((periods < 1) | (periods > self.num_periods)):
            raise OutOfRangeError("period outside 1..J")
        if np.any((exposures < 0) | (exposures > self.num_periods - 1)):
            raise OutOfRangeError("exposure outside 0..J-1")
        n = periods.shape[0]
        X = np.zeros((n, self.p))
        X[:, 0] = 1.0
        rows = np.arange(n)
        later = periods >= 2
        X[rows[later], periods[later] - 1] = 1.0
        treated = exposures >= 1
        if self.is_eti:
            X[rows[treated], self.num_periods + exposures[treated] - 1] = 1.0
        else:
            X[rows[treated], self.num_periods] = 1.0
        return X


def design_row(design: Design, fixed: FixedEffects, cluster: int, period: int) -> np.ndarray:
    if fixed.num_periods != design.num_periods:
        raise OutOfRangeError("fixed effects and design disagree on the number of periods")
    e = exposure_time(design, cluster, period)
    return fixed.matrix([period], [e])[0]
