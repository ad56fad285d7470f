"""Command-line entry point: ``stepwedge simulate`` and ``stepwedge analyze``.

Exit status: 0 success, 2 configuration or schema error, 3 I/O error,
4 model fit did not converge.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .errors import (
    ColumnTypeError,
    ConfigError,
    ConsistencyError,
    EmptyInputError,
    SchemaError,
    StepWedgeError,
)
from .fitting import fit
from .harness import NOT_APPLICABLE, parse_model, run_scenario, sparsity_profile
from .inference import report
from .io import (
    ingest_long_format,
    read_crossover_map,
    write_manifest,
    write_records,
    write_report,
    write_sparsity,
    write_summary,
)
from .sandwich import ESTIMATORS, estimate_all
from .simulate import REFERENCES, make_stream, simulate

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONCONVERGENCE = 0, 2, 3, 4
_INPUT_ERRORS = (ConfigError, SchemaError, ColumnTypeError, ConsistencyError, EmptyInputError)


def _err(msg: str) -> None:
    print(f"stepwedge: error: {msg}", file=sys.stderr)


def _manifest(cfg, workers) -> dict:
    sc = cfg.scenario
    fields = {f.name: getattr(sc, f.name) for f in dataclasses.fields(sc) if f.init}
    fields["structure"] = dataclasses.asdict(sc.structure)
    fields["effect_profile"] = sc.effect_profile.tolist()
    fields["period_profile"] = sc.period_profile.tolist()
    return {"version": __version__, "scenario": fields, "workers": workers,
            "export_datasets": cfg.export_datasets,
            "outputs": ["summary.csv", "summary_converged.csv", "records.csv", "design.csv"]
            + (["sparsity.csv"] if sc.family == "binary" else [])}


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        _err(f"cannot read config: {exc}")
        return EXIT_IO
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    sc = cfg.scenario
    workers = args.workers or cfg.workers
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _err(f"cannot create output directory: {exc}")
        return EXIT_IO
    records, summary = run_scenario(sc, workers=workers)
    try:
        write_summary(out / "summary.csv", summary.all)
        write_summary(out / "summary_converged.csv", summary.converged)
        write_records(out / "records.csv", records)
        (out / "design.csv").write_text(sc.design.to_csv(), encoding="utf-8")
        if sc.family == "binary":
            prof = sparsity_profile(records)
            write_sparsity(out / "sparsity.csv", [] if prof is NOT_APPLICABLE else prof)
        for rep in range(min(cfg.export_datasets, sc.replications)):
            data = simulate(sc, make_stream(sc.seed, sc.scenario_id, rep))
            (out / f"dataset_{rep}.csv").write_text(data.to_csv(), encoding="utf-8")
        write_manifest(out / "run.json", _manifest(cfg, workers))
    except OSError as exc:
        _err(f"cannot write results: {exc}")
        return EXIT_IO
    n_fail = sum(r.fit_error is not None for r in records)
    print(f"{sc.scenario_id}: {len(records)} records ({n_fail} fit failures) written to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        crossover = args.crossover_column
        if args.crossover_map:
            crossover = read_crossover_map(args.crossover_map)
        data = ingest_long_format(args.data, family=args.family, crossover=crossover,
                                  num_periods=args.num_periods)
        fixed, kind = parse_model(f"{args.model}/{args.structure}", data.num_periods)
        for est in args.estimators:
            if est not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {est!r}")
        for ref in args.references:
            if ref not in REFERENCES:
                raise ConfigError(f"unknown reference {ref!r}")
    except OSError as exc:
        _err(f"cannot read input: {exc}")
        return EXIT_IO
    except (StepWedgeError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG

    try:
        fitted = fit(data, fixed, kind)
    except StepWedgeError as exc:
        _err(f"fit failed: {exc}")
        return EXIT_CONFIG
    variances, failures = estimate_all(fitted, args.estimators, args.r_mbn, args.d_mbn, args.singular)
    rows = report(fitted, variances, fixed, args.references, args.level)
    diag = {
        "model": f"{args.model}/{kind.lower()}",
        "family": data.family,
        "num_clusters": fitted.num_clusters,
        "num_rows": fitted.N,
        "columns": fitted.columns,
        "beta": fitted.beta.tolist(),
        "variance_components": fitted.variances,
        "residual_var": fitted.residual_var,
        "converged": fitted.converged,
        "quasi_separation": fitted.quasi_separation,
        "boundary": list(fitted.boundary),
        "objective": fitted.objective,
        "iterations": fitted.iterations,
        "message": fitted.message,
        "estimator_failures": failures,
        "non_psd": [n for n, v in variances.items() if not v.psd],
        "mbn": variances["mbn"].meta if "mbn" in variances else None,
        "r_mbn": args.r_mbn,
        "d_mbn": args.d_mbn,
    }
    try:
        if args.out == "-":
            from .io import fmt6
            from .inference import REPORT_COLUMNS
            print(",".join(REPORT_COLUMNS))
            for r in rows:
                print(",".join(v if isinstance(v, str) else fmt6(v) for v in r.as_tuple()))
        else:
            write_report(args.out, rows)
            write_manifest(Path(args.out).with_suffix(".json"), diag)
    except OSError as exc:
        _err(f"cannot write results: {exc}")
        return EXIT_IO
    if not fitted.converged:
        _err(f"model fit did not converge: {fitted.message}")
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stepwedge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--workers", type=int, default=None, help="worker processes (overrides run.workers)")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="fit a trial dataset and report robust inference")
    a.add_argument("--data", required=True, help="long-format CSV (cluster,period,y[,n][,treat])")
    a.add_argument("--out", default="-", help="report CSV path, or '-' for stdout")
    a.add_argument("--model", choices=("it", "eti"), default="eti")
    a.add_argument("--family", choices=("gaussian", "binomial"), default="gaussian")
    a.add_argument("--structure", default="exch", help="working structure: exch, ne or ne_ri")
    g = a.add_mutually_exclusive_group()
    g.add_argument("--crossover-column", default=None)
    g.add_argument("--crossover-map", default=None, help="CSV with cluster,crossover_period")
    a.add_argument("--num-periods", type=int, default=None)
    a.add_argument("--estimators", type=lambda s: [x.strip() for x in s.split(",")],
                   default=list(ESTIMATORS))
    a.add_argument("--references", type=lambda s: [x.strip() for x in s.split(",")],
                   default=list(REFERENCES))
    a.add_argument("--level", type=float, default=0.95)
    a.add_argument("--r-mbn", type=float, default=1.0)
    a.add_argument("--d-mbn", type=float, default=2.0)
    a.add_argument("--singular", choices=("raise", "pinv"), default="raise")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    with np.errstate(all="ignore"):
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
