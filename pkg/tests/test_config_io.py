import numpy as np
import pytest

from stepwedge import Dataset, FixedEffects, fit, make_stream, simulate, table1_scenario
from stepwedge.config import load_config, parse_config
from stepwedge.errors import ColumnTypeError, ConfigError, ConsistencyError, SchemaError
from stepwedge.io import fmt6, fmt_full, ingest_long_format, read_crossover_map

SMOKE = """
# smoke run
scenario.preset = C-I
design.num_clusters = 8
design.num_periods = 5
design.cluster_period_size = 10
run.replications = 5
run.seed = 7
analysis.estimators = model, classic, kc, md, mbn
"""


def test_parse_smoke_config():
    cfg = parse_config(SMOKE)
    sc = cfg.scenario
    assert (sc.num_clusters, sc.num_periods, sc.cluster_period_size) == (8, 5, 10)
    assert sc.replications == 5 and sc.seed == 7 and sc.family == "continuous"
    assert sc.structure.kind == "ED_RI" and sc.estimators == ("model", "classic", "kc", "md", "mbn")
    assert cfg.workers == 1


def test_overrides_and_custom_structure():
    cfg = parse_config(SMOKE + "structure.sigma_t = 0.5\nanalysis.r_mbn = 0.3\n")
    assert cfg.scenario.structure.sigma_t == 0.5 and cfg.scenario.structure.rho == 0.8
    assert cfg.scenario.r_mbn == 0.3
    text = """
design.num_clusters = 8
design.num_periods = 5
design.cluster_period_size = 10
outcome.family = binomial
outcome.p0 = 0.3
structure.kind = NE
structure.sigma_u = 0.4
structure.sigma_v = 0.1
analysis.models = eti/ne, it/exch
"""
    sc = parse_config(text).scenario
    assert sc.family == "binary" and sc.p0 == 0.3 and sc.models == ("eti/ne", "it/exch")


@pytest.mark.parametrize("extra, needle", [
    ("structure.sigm_u = 0.1\n", "structure.sigm_u"),
    ("run.seed = 8\n", "duplicate key 'run.seed'"),
    ("run.seed = eight\n", "run.seed"),
    ("just words\n", "expected"),
    ("analysis.level = \n", "empty value"),
])
def test_config_errors_name_the_line(extra, needle):
    with pytest.raises(ConfigError) as err:
        parse_config(SMOKE + extra, source="smoke.cfg")
    assert needle in str(err.value)
    assert "smoke.cfg:" in str(err.value)


def test_config_validation():
    with pytest.raises(ConfigError, match="replications"):
        parse_config(SMOKE.replace("run.replications = 5", "run.replications = 0"))
    with pytest.raises(ConfigError, match="num_clusters"):
        parse_config(SMOKE.replace("design.num_clusters = 8", ""))
    with pytest.raises(ConfigError):
        parse_config(SMOKE.replace("C-I", "C-IX"))
    with pytest.raises(ConfigError, match="reference"):
        parse_config(SMOKE + "analysis.references = chi2\n")


def test_load_config(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text(SMOKE)
    assert load_config(p).scenario.seed == 7


def test_formatters():
    assert fmt6(1 / 3) == "0.333333"
    assert fmt6(float("nan")) == "NA"
    assert fmt6(True) == "1" and fmt6(np.int64(12)) == "12" and fmt6(None) == ""
    assert float(fmt_full(1 / 3)) == 1 / 3


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_ingest_toy_file(tmp_path):
    p = _write(tmp_path, "cluster,period,y,crossover_period\nA,1,0.5,2\nA,2,1.5,2\nB,1,0.1,3\nB,3,2.0,3\n")
    d = ingest_long_format(p)
    assert d.num_rows == 4 and d.num_periods == 3
    np.testing.assert_array_equal(d.exposure, [0, 1, 0, 1])
    np.testing.assert_array_equal(d.cluster, [1, 1, 2, 2])


def test_ingest_with_map_and_treat(tmp_path):
    m = _write(tmp_path, "cluster,crossover_period\n7,2\n9,3\n", "map.csv")
    p = _write(tmp_path, "cluster,period,y,treat\n7,1,1,0\n7,2,0,1\n9,2,1,0\n9,3,1,1\n")
    d = ingest_long_format(p, family="binomial", crossover=read_crossover_map(m))
    np.testing.assert_array_equal(d.cluster, [7, 7, 9, 9])
    np.testing.assert_array_equal(d.exposure, [0, 1, 0, 1])


def test_ingest_errors(tmp_path):
    with pytest.raises(SchemaError, match="'y'"):
        ingest_long_format(_write(tmp_path, "cluster,period,crossover_period\n1,1,2\n"))
    with pytest.raises(SchemaError, match="crossover"):
        ingest_long_format(_write(tmp_path, "cluster,period,y\n1,1,2\n"))
    with pytest.raises(ColumnTypeError, match="row 3"):
        ingest_long_format(_write(tmp_path, "cluster,period,y,crossover_period\n1,1,2,2\n1,2,,2\n"))
    with pytest.raises(ColumnTypeError, match="row 2"):
        ingest_long_format(_write(tmp_path, "cluster,period,y,crossover_period\n1,1,abc,2\n"))
    with pytest.raises(ConsistencyError, match="row 2"):
        ingest_long_format(_write(tmp_path, "cluster,period,y,treat,crossover_period\n1,1,2,1,2\n1,2,2,1,2\n"))
    with pytest.raises(ConsistencyError):
        ingest_long_format(_write(tmp_path, "cluster,period,y,crossover_period\n1,1,2,2\n1,2,2,3\n"))
    with pytest.raises(ColumnTypeError, match="binomial"):
        ingest_long_format(_write(tmp_path, "cluster,period,y,crossover_period\n1,1,2,2\n1,2,0,2\n"),
                           family="binomial")


def test_simulated_dataset_round_trip(tmp_path):
    sc = table1_scenario("B-II", 8, 5, 10)
    data = simulate(sc, make_stream(1, sc.scenario_id, 0))
    text = data.to_csv().splitlines()
    cross = {c: v for c, v in sc.design.crossover.items()}
    p = _write(tmp_path, "\n".join(text) + "\n")
    back = ingest_long_format(p, family="binomial", crossover={str(k): v for k, v in cross.items()})
    np.testing.assert_array_equal(back.y, data.y)
    np.testing.assert_array_equal(back.exposure, data.exposure)
    a, b = fit(back, FixedEffects("eti", 5)), fit(data, FixedEffects("eti", 5))
    np.testing.assert_array_equal(a.beta, b.beta)
