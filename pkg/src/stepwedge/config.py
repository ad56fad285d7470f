"""Strict flat ``section.key = value`` scenario configuration files.

Example::

    # smoke run
    scenario.id = smoke
    scenario.preset = C-I
    design.num_clusters = 8
    design.num_periods = 5
    design.cluster_period_size = 10
    run.replications = 5
    run.seed = 7
    analysis.estimators = model, classic, kc, md, mbn

``scenario.preset`` names a simulation-grid scenario (C-I .. B-III) whose
structure and outcome defaults are used unless overridden.  Unknown keys,
duplicate keys and malformed lines are errors.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, StepWedgeError
from .simulate import ScenarioConfig, table1_scenario
from .structures import RandomStructure

__all__ = ["KEYS", "RunConfig", "parse_config", "load_config"]


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _words(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _str(s):
    return s.strip()


KEYS = {
    "scenario.id": _str,
    "scenario.preset": _str,
    "design.num_clusters": _int,
    "design.num_periods": _int,
    "design.cluster_period_size": _int,
    "outcome.family": _str,
    "outcome.effects": _floats,
    "outcome.log_or": _float,
    "outcome.mu": _float,
    "outcome.p0": _float,
    "outcome.sigma": _float,
    "outcome.period_effects": _floats,
    "structure.kind": _str,
    "structure.sigma_u": _float,
    "structure.sigma_v": _float,
    "structure.sigma_gamma": _float,
    "structure.rho": _float,
    "structure.sigma_t": _float,
    "run.replications": _int,
    "run.seed": _int,
    "run.workers": _int,
    "run.export_datasets": _int,
    "analysis.models": _words,
    "analysis.estimators": _words,
    "analysis.references": _words,
    "analysis.level": _float,
    "analysis.r_mbn": _float,
    "analysis.d_mbn": _float,
    "analysis.singular": _str,
}

_TO_FIELD = {
    "outcome.family": "family",
    "outcome.effects": "effects",
    "outcome.log_or": "log_or",
    "outcome.mu": "mu",
    "outcome.p0": "p0",
    "outcome.sigma": "sigma",
    "outcome.period_effects": "period_effects",
    "run.replications": "replications",
    "run.seed": "seed",
    "analysis.models": "models",
    "analysis.estimators": "estimators",
    "analysis.references": "references",
    "analysis.level": "level",
    "analysis.r_mbn": "r_mbn",
    "analysis.d_mbn": "d_mbn",
    "analysis.singular": "singular",
}


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig
    workers: int = 1
    export_datasets: int = 0
    values: dict | None = None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}' (first on line {lines[key]})")
        if not value:
            raise ConfigError(f"{source}:{lineno}: empty value for '{key}'")
        try:
            values[key] = KEYS[key](value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for '{key}'") from None
        lines[key] = lineno

    def where(key):
        return f"{source}:{lines[key]}" if key in lines else source

    for key in ("design.num_clusters", "design.num_periods", "design.cluster_period_size"):
        if key not in values:
            raise ConfigError(f"{source}: missing required key '{key}'")
    if values.get("run.replications", 1) < 1:
        raise ConfigError(f"{where('run.replications')}: run.replications must be at least 1")
    if values.get("run.workers", 1) < 1:
        raise ConfigError(f"{where('run.workers')}: run.workers must be at least 1")

    I = values["design.num_clusters"]
    J = values["design.num_periods"]
    K = values["design.cluster_period_size"]
    kwargs = {field: values[key] for key, field in _TO_FIELD.items() if key in values}
    if kwargs.get("family") == "gaussian":
        kwargs["family"] = "continuous"
    elif kwargs.get("family") == "binomial":
        kwargs["family"] = "binary"
    try:
        base = None
        if "scenario.preset" in values:
            base = table1_scenario(values["scenario.preset"], I, J, K, p0=values.get("outcome.p0", 0.2))
        struct_keys = [k for k in values if k.startswith("structure.")]
        if struct_keys:
            s = base.structure if base is not None else None
            fields = {k.split(".", 1)[1]: values[k] for k in struct_keys}
            if "kind" not in fields:
                if s is None:
                    raise ConfigError(f"{source}: structure.kind is required without a preset")
                fields = {**{n: getattr(s, n) for n in ("kind", "sigma_u", "sigma_v", "sigma_gamma",
                                                         "rho", "sigma_t")}, **fields}
            kwargs["structure"] = RandomStructure(**fields)
        if base is not None:
            sid = values.get("scenario.id", base.scenario_id)
            scenario = base.with_(scenario_id=sid, **kwargs)
        else:
            if "structure" not in kwargs:
                raise ConfigError(f"{source}: give scenario.preset or structure.kind")
            if "family" not in kwargs:
                raise ConfigError(f"{source}: outcome.family is required without a preset")
            sid = values.get("scenario.id", f"custom/{I}-{J}-{K}")
            scenario = ScenarioConfig(sid, I, J, K, **kwargs)
    except ConfigError:
        raise
    except (StepWedgeError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(scenario, values.get("run.workers", 1), values.get("run.export_datasets", 0), values)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
