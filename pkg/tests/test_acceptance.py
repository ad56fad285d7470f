"""End-to-end acceptance checks; each prints a single PASS/FAIL line."""
import numpy as np
import pytest

from acceptance_log import record
from oracles import agq_fit, anova_reml, ols_cr
from runs import binary_run, continuous_run, sparse_run
from stepwedge import (ClusterBlocks, FixedEffects, RandomStructure, ScenarioConfig, classic,
                       fit_glmm_logistic, kc, make_stream, mbn, md, run_scenario, simulate,
                       sparsity_profile, table1_scenario)
from stepwedge.errors import AdjustmentFailureError
from stepwedge.fitting import _fit_lmm_cells, build_cells
from stepwedge.io import write_records, write_summary

ESTIMATORS = ("model", "classic", "kc", "md", "mbn")
# LTE coverage (%) of 95% t(I-2) intervals
TARGET_CONTINUOUS = {"model": 82.2, "classic": 93.3, "kc": 95.0, "md": 95.9, "mbn": 96.6}
TARGET_BINARY = {"model": 97.1, "classic": 92.5, "kc": 94.8, "md": 96.7, "mbn": 98.6}


def test_criterion_01_two_cluster_hand_values():
    y = np.array([1.0, 3.0, 2.0, 6.0])
    cells = build_cells([1, 1, 2, 2], np.ones(4, int), np.ones((4, 1)), y, 1, "EXCH", "continuous")
    f = _fit_lmm_cells(cells, ["intercept"])
    got = [classic(f).matrix[0, 0], kc(f).matrix[0, 0], md(f).matrix[0, 0]]
    m = mbn(f)
    ok = np.allclose(got, [0.5, 1.0, 2.0], rtol=0, atol=1e-10) and m.meta["c"] == 2.0 and m.meta["delta"] == 0.5
    assert record(1, "two-cluster hand oracle", ok,
                  f"classic/kc/md = {got[0]:.12g}/{got[1]:.12g}/{got[2]:.12g}, "
                  f"c = {m.meta['c']:g}, delta = {m.meta['delta']:g}")


def test_criterion_02_cr_oracles():
    rng = np.random.default_rng(77)
    worst, done, skipped = 0.0, 0, 0
    while done < 100:
        I, p = rng.integers(3, 7), rng.integers(1, 5)
        sizes = rng.integers(max(2, p), 7, size=I)
        X_list = [np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))]) for n in sizes]
        y_list = [rng.standard_normal(n) + rng.standard_normal() for n in sizes]
        beta, _ = ols_cr(X_list, y_list)
        B = ClusterBlocks.from_dense(X_list, [np.eye(n) for n in sizes],
                                     [y - X @ beta for X, y in zip(X_list, y_list)])
        try:
            ours = {"CR0": classic(B).matrix, "CR2": kc(B).matrix, "CR3": md(B).matrix}
        except AdjustmentFailureError:
            skipped += 1
            continue
        for kind, mat in ours.items():
            ref = ols_cr(X_list, y_list, kind)[1]
            worst = max(worst, np.max(np.abs(mat - ref)) / np.abs(ref).max())
        done += 1
    assert record(2, "CR0/CR2/CR3 oracle equivalence", worst <= 1e-8,
                  f"100 instances ({skipped} singular draws redrawn), max relative error {worst:.2e}")


def test_criterion_03_reml_anova():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        a, m = rng.integers(3, 12), rng.integers(2, 8)
        su = rng.choice([0.0, 0.2, 0.7, 2.0])
        y = rng.normal(1.0, 1.0) + su * rng.standard_normal((a, 1)) + rng.uniform(0.3, 2) * rng.standard_normal((a, m))
        cells = build_cells(np.repeat(np.arange(a), m), np.ones(a * m, int), np.ones((a * m, 1)),
                            y.ravel(), 1, "EXCH", "continuous")
        f = _fit_lmm_cells(cells, ["intercept"])
        s2, u2 = anova_reml(y)
        worst = max(worst, abs(f.residual_var - s2) / s2,
                    abs(f.variances["sigma_u"] - u2) / max(u2, s2))
    assert record(3, "REML equals ANOVA closed form", worst <= 1e-6,
                  f"50 instances, max relative error {worst:.2e}")


def test_criterion_04_laplace_vs_quadrature():
    worst, gaps = 0.0, []
    fixed = FixedEffects("eti", 3)
    for seed in range(8):
        sc = ScenarioConfig("tiny", 4, 3, 5, "binary", RandomStructure("EXCH", sigma_u=0.5), p0=0.3)
        data = simulate(sc, make_stream(seed, "tiny", 0))
        f = fit_glmm_logistic(data, fixed)
        X = fixed.matrix(data.period, data.exposure)
        start = np.concatenate([f.beta, [np.log(max(np.sqrt(f.variances["sigma_u"]), 0.05))]])
        b, _, _ = agq_fit(X, data.y, data.cluster, start, nodes=64)
        gap = float(np.max(np.abs(f.beta - b)))
        gaps.append(gap)
        worst = max(worst, gap)
    assert record(4, "Laplace fit vs 64-node adaptive quadrature", worst <= 1e-3,
                  f"8 tiny EXCH instances (I=4, J=3, K=5), max |dbeta| per instance: "
                  + ", ".join(f"{g:.1e}" for g in gaps))


def _coverage_check(number, title, run, targets, tol):
    sc, records, summary = run
    lines, ok = [], True
    for est, target in targets.items():
        row = summary.lookup("LTE", est, "t_Iminus2")
        ok &= abs(row.coverage_pct - target) <= tol
        lines.append(f"{est} {row.coverage_pct:.1f} (target {target}, n={row.n})")
    return record(number, title, ok, "; ".join(lines))


def test_criterion_05_continuous_coverage():
    assert _coverage_check(5, "continuous LTE t coverage, C-I 32-5-50, 2000 reps", continuous_run(),
                           TARGET_CONTINUOUS, 2.0)


def test_criterion_06_continuous_bias():
    _, _, summary = continuous_run()
    bias = {e: summary.lookup(e, "model", "t_Iminus2").bias_pct for e in ("TATE", "LTE")}
    ok = all(abs(b) <= 1.0 for b in bias.values())
    assert record(6, "continuous bias, C-I 32-5-50", ok,
                  ", ".join(f"{e} {b:+.2f}%" for e, b in bias.items()))


def test_criterion_07_binary_coverage():
    assert _coverage_check(7, "binary LTE t coverage, B-I 16-5-50 p0=0.2, 1000 reps", binary_run(),
                           TARGET_BINARY, 2.5)


def test_criterion_08_interval_nesting():
    cells, bad = 0, []
    for run in (continuous_run(), binary_run()):
        _, _, summary = run
        for mode in ("all", "converged"):
            for e in ("TATE", "LTE"):
                for est in ESTIMATORS:
                    t = summary.lookup(e, est, "t_Iminus2", mode)
                    z = summary.lookup(e, est, "normal", mode)
                    cells += 1
                    if not t.coverage_pct >= z.coverage_pct:
                        bad.append(f"{t.scenario}/{mode}/{e}/{est}")
    assert record(8, "t coverage >= normal coverage", not bad,
                  f"{cells} summary cells checked, violations: {bad or 'none'}")


def test_criterion_09_mbn_identity():
    worst, n, non_psd = 0.0, 0, 0
    for run in (continuous_run(), binary_run()):
        for r in run[1]:
            if r.usable and r.converged:
                n += 1
                worst = max(worst, r.mbn_identity_error)
                non_psd += "mbn" in r.non_psd
    ok = worst <= 1e-10 and non_psd == 0
    assert record(9, "MBN identity and PSD", ok,
                  f"{n} converged replications, max relative identity error {worst:.1e}, non-PSD {non_psd}")


def test_criterion_10_sparsity_profile():
    sc, records, _ = sparse_run()
    rows = sparsity_profile(records)
    ests = [e for e in ESTIMATORS]
    overall = {}
    for estimand in ("TATE", "LTE"):
        for est in ests:
            se = [res.se for r in records if r.usable for res in r.results
                  if res.estimand == estimand and res.estimator == est and res.reference == "normal"]
            overall[estimand, est] = float(np.median(se))
    lte_larger = all(overall["LTE", e] > overall["TATE", e] for e in ests)
    by_bin = {(r.bin, r.estimand, r.estimator): r for r in rows}
    lte_larger_bins = all(by_bin[b, "LTE", e].median > by_bin[b, "TATE", e].median
                          for b in ("0", "1-2", "3-5", "6+") for e in ests if by_bin[b, "LTE", e].count)
    iqr = {(est, e): by_bin["1-2", e, est].iqr for est in ("md", "mbn") for e in ("TATE", "LTE")}
    spread = all(iqr["md", e] > iqr["mbn", e] for e in ("TATE", "LTE"))
    ok = lte_larger and lte_larger_bins and spread
    counts = {b: by_bin[b, "LTE", "mbn"].count for b in ("0", "1-2", "3-5", "6+")}
    assert record(10, "sparsity diagnostic, 8-9-10 p0=0.2, 2000 reps", ok,
                  f"LTE median SE > TATE for all estimators: {lte_larger} (every bin: {lte_larger_bins}); "
                  f"1-2 event bin IQR md/mbn TATE {iqr['md', 'TATE']:.3f}/{iqr['mbn', 'TATE']:.3f}, "
                  f"LTE {iqr['md', 'LTE']:.3f}/{iqr['mbn', 'LTE']:.3f}; bin counts {counts}")


def test_criterion_11_determinism(tmp_path):
    sc = table1_scenario("B-II", 8, 5, 10, replications=40, seed=99)
    digests = []
    for workers in (1, 2):
        records, summary = run_scenario(sc, workers=workers, chunk_size=7)
        d = tmp_path / f"w{workers}"
        d.mkdir()
        write_summary(d / "summary.csv", summary.all)
        write_summary(d / "summary_converged.csv", summary.converged)
        write_records(d / "records.csv", records)
        digests.append([(d / n).read_bytes() for n in ("summary.csv", "summary_converged.csv", "records.csv")])
    ok = digests[0] == digests[1]
    assert record(11, "determinism across worker counts", ok,
                  "summary, converged summary and records byte-identical for 1 vs 2 workers" if ok
                  else "outputs differ")
