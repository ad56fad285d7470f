"""Scenario definitions, long-format datasets and outcome generators."""
from __future__ import annotations

import io
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from .design import Design, build_standard_design
from .errors import FamilyMismatchError, InvalidParameterError
from .structures import RandomStructure

__all__ = [
    "ESTIMATORS",
    "REFERENCES",
    "Dataset",
    "ScenarioConfig",
    "effect_profile_linear",
    "make_stream",
    "simulate",
    "simulate_continuous",
    "simulate_binary",
    "table1_scenario",
    "true_estimands",
]

ESTIMATORS = ("model", "classic", "kc", "md", "mbn")
REFERENCES = ("t_Iminus2", "normal")
FAMILIES = ("continuous", "binary")

_TABLE1 = {
    "C-I": RandomStructure("ED_RI", sigma_gamma=0.10, rho=0.8, sigma_t=0.21),
    "C-II": RandomStructure("ED_RI", sigma_gamma=0.23, rho=0.8, sigma_t=0.24),
    "C-III": RandomStructure("ED_RI", sigma_gamma=0.23, rho=0.8, sigma_t=0.35),
    "B-I": RandomStructure("EXCH", sigma_u=0.42),
    "B-II": RandomStructure("NE", sigma_u=0.37, sigma_v=0.19),
    "B-III": RandomStructure("NE_RI", sigma_u=0.37, sigma_v=0.19, sigma_t=0.2),
}


@dataclass(frozen=True)
class Dataset:
    """Long-format observations, one row per individual (or binomial row).

    ``trials`` is 1 for individual-level rows; binary ``y`` counts successes.
    """

    cluster: np.ndarray
    period: np.ndarray
    exposure: np.ndarray
    y: np.ndarray
    family: str
    num_periods: int
    trials: np.ndarray | None = None
    individual: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParameterError(f"unknown family {self.family!r}")
        n = len(self.y)
        object.__setattr__(self, "cluster", np.asarray(self.cluster, dtype=int))
        object.__setattr__(self, "period", np.asarray(self.period, dtype=int))
        object.__setattr__(self, "exposure", np.asarray(self.exposure, dtype=int))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.trials is None:
            object.__setattr__(self, "trials", np.ones(n, dtype=int))
        else:
            object.__setattr__(self, "trials", np.asarray(self.trials, dtype=int))
        if self.individual is None:
            object.__setattr__(self, "individual", np.zeros(n, dtype=int))
        for name in ("cluster", "period", "exposure", "trials", "individual"):
            if getattr(self, name).shape != (n,):
                raise InvalidParameterError(f"column {name} has the wrong length")

    @property
    def treat(self) -> np.ndarray:
        return (self.exposure >= 1).astype(int)

    @property
    def num_rows(self) -> int:
        return len(self.y)

    @property
    def clusters(self) -> np.ndarray:
        return np.unique(self.cluster)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("cluster,period,individual,exposure,treat,y,n\n")
        yfmt = "{:.17g}" if self.family == "continuous" else "{:.0f}"
        for row in zip(self.cluster, self.period, self.individual, self.exposure,
                       self.treat, self.y, self.trials):
            c, j, k, e, x, y, n = row
            buf.write(f"{c},{j},{k},{e},{x},{yfmt.format(y)},{n}\n")
        return buf.getvalue()


def effect_profile_linear(num_periods: int) -> np.ndarray:
    """Equally spaced effects rising from ``1/(J-1)`` to 1."""
    if num_periods < 3:
        raise InvalidParameterError("need at least 3 periods")
    return np.arange(1, num_periods) / (num_periods - 1)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to generate, fit and summarise one simulation cell.

    ``effects`` holds delta_1..delta_{J-1}; left as ``None`` it defaults to the
    linear profile for continuous outcomes and to a constant ``log_or`` for
    binary outcomes.  ``period_effects`` holds beta_1..beta_J (beta_1 ignored).
    """

    scenario_id: str
    num_clusters: int
    num_periods: int
    cluster_period_size: int
    family: str
    structure: RandomStructure
    effects: tuple[float, ...] | None = None
    log_or: float = 0.25
    mu: float = 0.0
    p0: float = 0.5
    sigma: float = 1.0
    period_effects: tuple[float, ...] | None = None
    replications: int = 2000
    seed: int = 20240101
    models: tuple[str, ...] = ("eti/exch",)
    estimators: tuple[str, ...] = ESTIMATORS
    references: tuple[str, ...] = REFERENCES
    level: float = 0.95
    r_mbn: float = 1.0
    d_mbn: float = 2.0
    singular: str = "raise"
    design: Design = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParameterError(f"unknown family {self.family!r}")
        object.__setattr__(
            self, "design",
            build_standard_design(self.num_clusters, self.num_periods, self.cluster_period_size),
        )
        J = self.num_periods
        if self.effects is not None and len(self.effects) != J - 1:
            raise InvalidParameterError(f"effects must have {J - 1} entries")
        if self.period_effects is not None and len(self.period_effects) != J:
            raise InvalidParameterError(f"period_effects must have {J} entries")
        if self.family == "binary" and not 0.0 < self.p0 < 1.0:
            raise InvalidParameterError("p0 must lie in (0, 1)")
        if self.sigma < 0:
            raise InvalidParameterError("sigma must be non-negative")
        if self.replications < 1:
            raise InvalidParameterError("replications must be positive")
        if not 0.0 < self.level < 1.0:
            raise InvalidParameterError("level must lie in (0, 1)")
        if not 0.0 <= self.r_mbn <= 1.0:
            raise InvalidParameterError("r_mbn must lie in [0, 1]")
        if self.d_mbn < 1.0:
            raise InvalidParameterError("d_mbn must be at least 1")
        if self.singular not in ("raise", "pinv"):
            raise InvalidParameterError("singular must be 'raise' or 'pinv'")
        for est in self.estimators:
            if est not in ESTIMATORS:
                raise InvalidParameterError(f"unknown estimator {est!r}")
        for ref in self.references:
            if ref not in REFERENCES:
                raise InvalidParameterError(f"unknown reference {ref!r}")
        if not self.models:
            raise InvalidParameterError("at least one working model is required")

    @property
    def effect_profile(self) -> np.ndarray:
        if self.effects is not None:
            return np.asarray(self.effects, dtype=float)
        if self.family == "continuous":
            return effect_profile_linear(self.num_periods)
        return np.full(self.num_periods - 1, self.log_or)

    @property
    def period_profile(self) -> np.ndarray:
        if self.period_effects is None:
            return np.zeros(self.num_periods)
        beta = np.asarray(self.period_effects, dtype=float).copy()
        beta[0] = 0.0
        return beta

    @property
    def intercept(self) -> float:
        return self.mu if self.family == "continuous" else float(logit(self.p0))

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


def table1_scenario(name: str, num_clusters: int, num_periods: int, cluster_period_size: int,
                    p0: float = 0.2, **overrides) -> ScenarioConfig:
    """Scenario from the simulation grid, e.g. ``table1_scenario("C-I", 32, 5, 50)``."""
    if name not in _TABLE1:
        raise InvalidParameterError(f"unknown scenario {name!r}; choose from {sorted(_TABLE1)}")
    structure = _TABLE1[name]
    if name.startswith("C"):
        kwargs = dict(family="continuous", sigma=1.0, models=("eti/exch",))
        sid = f"{name}/{num_clusters}-{num_periods}-{cluster_period_size}"
    else:
        models = (f"eti/{structure.kind.lower()}",)
        if structure.kind != "EXCH":
            models += ("eti/exch",)
        kwargs = dict(family="binary", p0=p0, log_or=0.25, models=models)
        sid = f"{name}/{num_clusters}-{num_periods}-{cluster_period_size}/p{p0:g}"
    kwargs.update(overrides)
    return ScenarioConfig(sid, num_clusters, num_periods, cluster_period_size,
                          structure=structure, **kwargs)


def make_stream(seed: int, scenario_id: str, replication: int) -> np.random.Generator:
    """Counter-based generator keyed on (seed, scenario, replication)."""
    key = np.random.SeedSequence([int(seed), zlib.crc32(scenario_id.encode()), int(replication)])
    return np.random.Generator(np.random.Philox(key))


def _layout(scenario: ScenarioConfig):
    d = scenario.design
    I, J, K = d.num_clusters, d.num_periods, d.cluster_period_size
    cluster = np.repeat(d.clusters, J * K)
    period = np.tile(np.repeat(d.periods, K), I)
    individual = np.tile(np.arange(1, K + 1), I * J)
    exposure = np.repeat(d.exposure_matrix().ravel(), K)
    return cluster, period, individual, exposure


def _linear_predictor(scenario: ScenarioConfig, rng: np.random.Generator, exposure_ij: np.ndarray):
    """Cluster-period linear predictor (I x J), random effects included."""
    d = scenario.design
    I, J = d.num_clusters, d.num_periods
    s = scenario.structure
    delta = np.concatenate([[0.0], scenario.effect_profile])
    eta = scenario.intercept + scenario.period_profile[None, :] + delta[exposure_ij]
    L = s.effect_factor(J)
    b = rng.standard_normal((I, L.shape[0])) @ L.T
    treat = (exposure_ij >= 1).astype(float)
    for i in range(I):
        eta[i] += s.loading(treat[i]) @ b[i]
    return eta


def simulate_continuous(scenario: ScenarioConfig, rng: np.random.Generator) -> Dataset:
    if scenario.family != "continuous":
        raise FamilyMismatchError("scenario is not continuous")
    d = scenario.design
    exposure_ij = d.exposure_matrix()
    eta = _linear_predictor(scenario, rng, exposure_ij)
    cluster, period, individual, exposure = _layout(scenario)
    K = d.cluster_period_size
    y = np.repeat(eta.ravel(), K) + scenario.sigma * rng.standard_normal(cluster.shape[0])
    return Dataset(cluster, period, exposure, y, "continuous", d.num_periods, individual=individual)


def simulate_binary(scenario: ScenarioConfig, rng: np.random.Generator) -> Dataset:
    if scenario.family != "binary":
        raise FamilyMismatchError("scenario is not binary")
    d = scenario.design
    exposure_ij = d.exposure_matrix()
    eta = _linear_predictor(scenario, rng, exposure_ij)
    cluster, period, individual, exposure = _layout(scenario)
    prob = np.repeat(expit(eta.ravel()), d.cluster_period_size)
    y = (rng.random(cluster.shape[0]) < prob).astype(float)
    return Dataset(cluster, period, exposure, y, "binary", d.num_periods, individual=individual)


def simulate(scenario: ScenarioConfig, rng: np.random.Generator) -> Dataset:
    if scenario.family == "continuous":
        return simulate_continuous(scenario, rng)
    return simulate_binary(scenario, rng)


def true_estimands(scenario: ScenarioConfig) -> tuple[float, float]:
    """(TATE, LTE) implied by the scenario's effect profile."""
    delta = scenario.effect_profile
    return float(np.mean(delta)), float(delta[-1])
