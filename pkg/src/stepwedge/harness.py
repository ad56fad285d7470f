"""Monte Carlo driver: generate, fit, estimate variances, summarise.

Each replication draws from its own counter-based stream, so results do not
depend on execution order or on the number of worker processes; records are
always folded in replication order.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .design import FixedEffects
from .errors import (
    DegenerateWeightError,
    EmptyInputError,
    InvalidParameterError,
    NegativeVarianceError,
    NonConvergenceError,
    SingularBreadError,
    SingularDesignError,
    ZeroTruthError,
)
from .fitting import fit, linearize
from .inference import contrast_lte, contrast_tate, critical_value
from .sandwich import estimate_all
from .simulate import ScenarioConfig, make_stream, simulate, true_estimands

__all__ = [
    "ESTIMANDS",
    "NOT_APPLICABLE",
    "ReplicationRecord",
    "ResultRow",
    "SummaryRow",
    "SimulationSummary",
    "SparsityRow",
    "bias_percent",
    "coverage_percent",
    "parse_model",
    "run_replication",
    "run_scenario",
    "sparsity_profile",
    "summarize",
]

ESTIMANDS = ("TATE", "LTE")
EVENT_BINS = ("0", "1-2", "3-5", "6+")
NOT_APPLICABLE = "not applicable"
_FIT_ERRORS = (SingularDesignError, NonConvergenceError, DegenerateWeightError,
               SingularBreadError, np.linalg.LinAlgError, FloatingPointError, ValueError)


def parse_model(model: str, num_periods: int) -> tuple[FixedEffects, str]:
    """``"eti/exch"`` -> (FixedEffects('eti', J), 'EXCH')."""
    try:
        treatment, kind = model.split("/")
    except ValueError:
        raise InvalidParameterError(f"model must look like 'eti/exch', got {model!r}") from None
    return FixedEffects(treatment.strip(), num_periods), kind.strip().upper().replace("-", "_")


@dataclass(frozen=True)
class ResultRow:
    estimand: str
    estimator: str
    reference: str
    estimate: float
    se: float
    lo: float
    hi: float
    covered: bool


@dataclass(frozen=True)
class ReplicationRecord:
    """Outcome of one replication under one working model."""

    scenario: str
    model: str
    replication: int
    converged: bool
    quasi_separation: bool
    fit_error: str | None
    boundary: tuple[str, ...]
    objective: float
    iterations: int
    events_longest: int | None
    failures: tuple[tuple[str, str], ...]
    results: tuple[ResultRow, ...]
    mbn_c: float = math.nan
    mbn_delta: float = math.nan
    mbn_phi: float = math.nan
    mbn_p_star: int = 0
    mbn_identity_error: float = math.nan
    non_psd: tuple[str, ...] = ()

    @property
    def usable(self) -> bool:
        return self.fit_error is None

    @property
    def clean(self) -> bool:
        """Converged without quasi-separation."""
        return self.fit_error is None and self.converged and not self.quasi_separation

    def failed(self, estimator: str) -> bool:
        return any(name == estimator for name, _ in self.failures)


def _events_longest(data, num_periods: int) -> int:
    return int(data.y[data.exposure == num_periods - 1].sum())


def run_replication(config: ScenarioConfig, replication: int) -> list[ReplicationRecord]:
    """Generate one dataset and analyse it under every working model."""
    rng = make_stream(config.seed, config.scenario_id, replication)
    data = simulate(config, rng)
    J = config.num_periods
    tate_true, lte_true = true_estimands(config)
    truths = {"TATE": tate_true, "LTE": lte_true}
    events = _events_longest(data, J) if config.family == "binary" else None
    crit = {ref: critical_value(ref, config.level, config.num_clusters)[0] for ref in config.references}
    out = []
    for model in config.models:
        fixed, kind = parse_model(model, J)
        base = dict(scenario=config.scenario_id, model=model, replication=replication,
                    events_longest=events)
        try:
            fitted = fit(data, fixed, kind)
            linearize(fitted)
        except _FIT_ERRORS as exc:
            out.append(ReplicationRecord(
                converged=False, quasi_separation=False, fit_error=f"{type(exc).__name__}: {exc}",
                boundary=(), objective=math.nan, iterations=0, failures=(), results=(), **base))
            continue
        variances, failures = estimate_all(fitted, config.estimators, config.r_mbn, config.d_mbn,
                                          config.singular)
        contrasts = {"TATE": contrast_tate(fixed, strict=False), "LTE": contrast_lte(fixed, strict=False)}
        results = []
        for estimand, c in contrasts.items():
            est = float(c @ fitted.beta)
            for name in config.estimators:
                if name not in variances:
                    continue
                mat = variances[name].matrix
                var = float(c @ mat @ c)
                if var < 0:
                    # same rule as infer(): roundoff-sized negatives are zero
                    if var < -1e-12 * max(float(np.abs(c) @ np.abs(mat) @ np.abs(c)), 1e-300):
                        failures[name] = f"{NegativeVarianceError.__name__}: contrast variance {var:.3g}"
                        continue
                    var = 0.0
                se = math.sqrt(var)
                for ref in config.references:
                    lo, hi = est - crit[ref] * se, est + crit[ref] * se
                    results.append(ResultRow(estimand, name, ref, est, se, lo, hi,
                                             bool(lo <= truths[estimand] <= hi)))
        results = [r for r in results if r.estimator not in failures]
        extra = {}
        if "mbn" in variances and "classic" in variances:
            m = variances["mbn"]
            meta = m.meta
            lhs = m.matrix - meta["c"] * variances["classic"].matrix
            rhs = meta["delta"] * meta["phi"] * np.linalg.inv(fitted.M)
            scale = max(np.max(np.abs(m.matrix)), 1e-300)
            extra = dict(mbn_c=meta["c"], mbn_delta=meta["delta"], mbn_phi=meta["phi"],
                         mbn_p_star=meta["p_star"],
                         mbn_identity_error=float(np.max(np.abs(lhs - rhs)) / scale))
        out.append(ReplicationRecord(
            converged=fitted.converged, quasi_separation=fitted.quasi_separation, fit_error=None,
            boundary=fitted.boundary, objective=fitted.objective, iterations=fitted.iterations,
            failures=tuple(sorted(failures.items())), results=tuple(results),
            non_psd=tuple(n for n, v in variances.items() if not v.psd), **extra, **base))
    return out


def _run_chunk(args):
    config, reps = args
    return [rec for r in reps for rec in run_replication(config, r)]


def bias_percent(estimates, truth: float) -> float:
    if truth == 0:
        raise ZeroTruthError("bias percent is undefined for a zero truth")
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise EmptyInputError("no estimates")
    return float(100.0 * (est.mean() - truth) / abs(truth))


def coverage_percent(indicators) -> tuple[float, float]:
    ind = np.asarray(indicators, dtype=float)
    if ind.size == 0:
        raise EmptyInputError("no coverage indicators")
    p = float(ind.mean())
    return 100.0 * p, 100.0 * math.sqrt(p * (1.0 - p) / ind.size)


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    estimand: str
    estimator: str
    reference: str
    n: int
    excluded: int
    mean_est: float
    bias_pct: float
    coverage_pct: float
    mc_se: float


SUMMARY_COLUMNS = ("scenario", "estimand", "estimator", "reference", "n", "excluded",
                   "mean_est", "bias_pct", "coverage_pct", "mc_se")


@dataclass
class SimulationSummary:
    """Summary rows with all replications and with clean replications only."""

    all: list[SummaryRow]
    converged: list[SummaryRow]

    def lookup(self, estimand, estimator, reference, mode="all", model=None):
        rows = self.all if mode == "all" else self.converged
        for r in rows:
            if (r.estimand, r.estimator, r.reference) == (estimand, estimator, reference) and (
                    model is None or r.scenario.endswith(f"[{model}]")):
                return r
        raise KeyError((estimand, estimator, reference, mode, model))


def summarize(config: ScenarioConfig, records: list[ReplicationRecord]) -> SimulationSummary:
    truths = dict(zip(ESTIMANDS, true_estimands(config)))
    modes = {"all": lambda r: r.usable, "converged": lambda r: r.clean}
    out = {}
    for mode, keep in modes.items():
        rows = []
        for model in config.models:
            recs = [r for r in records if r.model == model]
            total = len(recs)
            index = {}
            for r in recs:
                if not keep(r):
                    continue
                for res in r.results:
                    index.setdefault((res.estimand, res.estimator, res.reference), []).append(res)
            for estimand in ESTIMANDS:
                for est in config.estimators:
                    for ref in config.references:
                        got = index.get((estimand, est, ref), [])
                        n = len(got)
                        if n:
                            vals = [g.estimate for g in got]
                            cov, se = coverage_percent([g.covered for g in got])
                            mean, bias = float(np.mean(vals)), bias_percent(vals, truths[estimand])
                        else:
                            cov = se = mean = bias = math.nan
                        rows.append(SummaryRow(f"{config.scenario_id}[{model}]", estimand, est, ref,
                                               n, total - n, mean, bias, cov, se))
        out[mode] = rows
    return SimulationSummary(out["all"], out["converged"])


def run_scenario(config: ScenarioConfig, workers: int = 1, chunk_size: int = 25,
                 replications: range | None = None):
    """Run every replication and return ``(records, summary)``."""
    reps = list(range(config.replications)) if replications is None else list(replications)
    if workers <= 1:
        records = _run_chunk((config, reps))
    else:
        chunks = [reps[k:k + chunk_size] for k in range(0, len(reps), chunk_size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(config, c) for c in chunks]))
        records = [rec for part in parts for rec in part]
    records.sort(key=lambda r: (r.replication, config.models.index(r.model)))
    return records, summarize(config, records)


@dataclass(frozen=True)
class SparsityRow:
    model: str
    bin: str
    estimand: str
    estimator: str
    count: int
    median: float
    q1: float
    q3: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def _event_bin(events: int) -> str:
    if events == 0:
        return "0"
    if events <= 2:
        return "1-2"
    if events <= 5:
        return "3-5"
    return "6+"


def sparsity_profile(records: list[ReplicationRecord]):
    """SE distributions grouped by events in the longest-exposure cell.

    Returns :data:`NOT_APPLICABLE` for records without event counts
    (continuous outcomes).
    """
    if not records or any(r.events_longest is None for r in records):
        return NOT_APPLICABLE
    groups: dict = {}
    models, estimators = [], []
    for r in records:
        if r.model not in models:
            models.append(r.model)
        if not r.usable:
            continue
        b = _event_bin(r.events_longest)
        seen = set()
        for res in r.results:
            key = (res.estimand, res.estimator)
            if key in seen:
                continue
            seen.add(key)
            if res.estimator not in estimators:
                estimators.append(res.estimator)
            groups.setdefault((r.model, b, res.estimand, res.estimator), []).append(res.se)
    rows = []
    for model in models:
        for b in EVENT_BINS:
            for estimand in ESTIMANDS:
                for est in estimators:
                    se = np.asarray(groups.get((model, b, estimand, est), []))
                    if se.size:
                        q1, med, q3 = np.percentile(se, [25, 50, 75])
                    else:
                        q1 = med = q3 = math.nan
                    rows.append(SparsityRow(model, b, estimand, est, int(se.size),
                                            float(med), float(q1), float(q3)))
    return rows
