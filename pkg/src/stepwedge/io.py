"""Long-format data ingestion and CSV/JSON writers."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ColumnTypeError, ConsistencyError, EmptyInputError, SchemaError
from .simulate import Dataset

__all__ = [
    "fmt6",
    "fmt_full",
    "ingest_long_format",
    "read_crossover_map",
    "write_csv",
    "write_records",
    "write_report",
    "write_sparsity",
    "write_summary",
    "write_manifest",
]

FAMILY_ALIASES = {"gaussian": "continuous", "continuous": "continuous",
                  "binomial": "binary", "binary": "binary"}


def fmt6(x) -> str:
    """Six significant digits; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NA"
    return f"{x:.6g}"


def fmt_full(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NA"
    return repr(x)


def _number(text: str, column: str, row: int, integer: bool = False):
    t = text.strip()
    if not t or t.upper() in ("NA", "NAN"):
        raise ColumnTypeError(f"row {row}: missing value in column '{column}'")
    try:
        v = float(t)
    except ValueError:
        raise ColumnTypeError(f"row {row}: non-numeric value {t!r} in column '{column}'") from None
    if not math.isfinite(v):
        raise ColumnTypeError(f"row {row}: non-finite value in column '{column}'")
    if integer:
        if v != int(v):
            raise ColumnTypeError(f"row {row}: column '{column}' must be an integer, got {t!r}")
        return int(v)
    return v


def read_crossover_map(path) -> dict:
    """Read ``cluster,crossover_period`` pairs (extra columns are ignored)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for col in ("cluster", "crossover_period"):
            if col not in cols:
                raise SchemaError(f"crossover map {path}: missing column '{col}'")
        out = {}
        for row, rec in enumerate(reader, start=2):
            out[rec["cluster"].strip()] = _number(rec["crossover_period"], "crossover_period", row, True)
    if not out:
        raise EmptyInputError(f"crossover map {path} has no rows")
    return out


def _cluster_codes(labels: list[str]):
    """Integer cluster ids: used directly when all labels are integers, else 1..I by sorted label."""
    try:
        ints = [int(x) for x in labels]
        if all(str(i) == x.strip() for i, x in zip(ints, labels)):
            return np.array(ints), {x.strip(): i for x, i in zip(labels, ints)}
    except ValueError:
        pass
    uniq = sorted(set(labels))
    code = {lab: k + 1 for k, lab in enumerate(uniq)}
    return np.array([code[x] for x in labels]), code


def ingest_long_format(path, family: str = "gaussian", crossover: str | Mapping | None = None,
                       num_periods: int | None = None) -> Dataset:
    """Read a comma-separated long-format file into a :class:`Dataset`.

    Parameters
    ----------
    path : str or Path
        Header row with at least ``cluster``, ``period`` and ``y``; optional
        ``n`` (binomial trials) and ``treat`` (checked against the derived
        exposure).
    family : {"gaussian", "binomial"}
    crossover : str or mapping, optional
        Name of a column holding each row's crossover period, or a mapping
        cluster label -> crossover period.  Defaults to a ``crossover_period``
        column when present.
    num_periods : int, optional
        Defaults to the largest period in the file.
    """
    fam = FAMILY_ALIASES.get(str(family).lower())
    if fam is None:
        raise SchemaError(f"unknown family {family!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [c.strip() for c in (reader.fieldnames or [])]
        reader.fieldnames = cols
        rows = list(reader)
    for col in ("cluster", "period", "y"):
        if col not in cols:
            raise SchemaError(f"missing required column '{col}'")
    if crossover is None and "crossover_period" in cols:
        crossover = "crossover_period"
    if crossover is None:
        raise SchemaError("no crossover declaration: give a crossover column or a cluster map")
    if isinstance(crossover, str) and crossover not in cols:
        raise SchemaError(f"missing crossover column '{crossover}'")
    if not rows:
        raise EmptyInputError(f"{path} has no data rows")

    labels = [r["cluster"].strip() for r in rows]
    for k, lab in enumerate(labels):
        if not lab:
            raise ColumnTypeError(f"row {k + 2}: missing value in column 'cluster'")
    cluster, code = _cluster_codes(labels)
    period = np.array([_number(r["period"], "period", k + 2, True) for k, r in enumerate(rows)])
    y = np.array([_number(r["y"], "y", k + 2) for k, r in enumerate(rows)])
    if "n" in cols:
        trials = np.array([_number(r["n"], "n", k + 2, True) for k, r in enumerate(rows)])
        if np.any(trials < 1):
            raise ColumnTypeError(f"row {int(np.argmax(trials < 1)) + 2}: trials must be at least 1")
    else:
        trials = np.ones(len(rows), dtype=int)

    if isinstance(crossover, str):
        cross = np.array([_number(r[crossover], crossover, k + 2, True) for k, r in enumerate(rows)])
        for cl in np.unique(cluster):
            vals = np.unique(cross[cluster == cl])
            if vals.size > 1:
                raise ConsistencyError(f"cluster {cl}: conflicting crossover periods {vals.tolist()}")
    else:
        cmap = {str(k).strip(): int(v) for k, v in crossover.items()}
        missing = sorted({lab for lab in labels if lab not in cmap})
        if missing:
            raise ConsistencyError(f"no crossover period for cluster(s) {missing}")
        cross = np.array([cmap[lab] for lab in labels])

    J = int(period.max()) if num_periods is None else int(num_periods)
    if np.any(period < 1) or np.any(period > J):
        bad = int(np.argmax((period < 1) | (period > J)))
        raise ColumnTypeError(f"row {bad + 2}: period outside 1..{J}")
    if np.any(cross < 2) or np.any(cross > J):
        bad = int(np.argmax((cross < 2) | (cross > J)))
        raise ConsistencyError(f"row {bad + 2}: crossover period must lie in 2..{J}")
    exposure = np.maximum(0, period - cross + 1)

    if "treat" in cols:
        treat = np.array([_number(r["treat"], "treat", k + 2, True) for k, r in enumerate(rows)])
        bad = np.flatnonzero(treat != (exposure >= 1))
        if bad.size:
            k = int(bad[0])
            raise ConsistencyError(
                f"row {k + 2}: treat={treat[k]} but cluster {labels[k]} crosses over in period "
                f"{cross[k]} (period {period[k]})")
    if fam == "binary":
        bad = np.flatnonzero((y < 0) | (y > trials) | (y != np.round(y)))
        if bad.size:
            k = int(bad[0])
            raise ColumnTypeError(f"row {k + 2}: binomial outcome must be an integer in 0..n, got {y[k]:g}")
    return Dataset(cluster, period, exposure, y, fam, J, trials=trials)


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable], formatter=fmt6) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([v if isinstance(v, str) else formatter(v) for v in row])


def write_summary(path, rows) -> None:
    from .harness import SUMMARY_COLUMNS
    write_csv(path, SUMMARY_COLUMNS, ([getattr(r, c) for c in SUMMARY_COLUMNS] for r in rows))


RECORD_COLUMNS = ("scenario", "model", "replication", "converged", "quasi_separation", "fit_error",
                  "boundary", "objective", "iterations", "events_longest", "estimand", "estimator",
                  "reference", "estimate", "se", "lo", "hi", "covered", "failures", "non_psd",
                  "mbn_c", "mbn_delta", "mbn_phi", "mbn_p_star", "mbn_identity_error")


def _record_rows(records):
    for r in records:
        common = [r.scenario, r.model, r.replication, r.converged, r.quasi_separation,
                  r.fit_error or "", ";".join(r.boundary), r.objective, r.iterations,
                  "" if r.events_longest is None else r.events_longest]
        tail = ["; ".join(f"{k}={v}" for k, v in r.failures), ";".join(r.non_psd),
                r.mbn_c, r.mbn_delta, r.mbn_phi, r.mbn_p_star, r.mbn_identity_error]
        if not r.results:
            yield common + ["", "", "", None, None, None, None, None] + tail
        for res in r.results:
            yield common + [res.estimand, res.estimator, res.reference, res.estimate, res.se,
                            res.lo, res.hi, res.covered] + tail


def write_records(path, records) -> None:
    """Replication log at full precision, one line per (replication, model, result)."""
    write_csv(path, RECORD_COLUMNS, _record_rows(records), formatter=fmt_full)


SPARSITY_COLUMNS = ("model", "bin", "estimand", "estimator", "count", "median", "q1", "q3", "iqr")


def write_sparsity(path, rows) -> None:
    write_csv(path, SPARSITY_COLUMNS,
              ([r.model, r.bin, r.estimand, r.estimator, r.count, r.median, r.q1, r.q3, r.iqr]
               for r in rows))


def write_report(path, rows, formatter=fmt6) -> None:
    from .inference import REPORT_COLUMNS
    write_csv(path, REPORT_COLUMNS, (r.as_tuple() for r in rows), formatter=formatter)


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n",
                          encoding="utf-8")
