import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import marginal_probability
from stepwedge import (RandomStructure, ScenarioConfig, effect_profile_linear, make_stream, simulate,
                       simulate_binary, table1_scenario, true_estimands)
from stepwedge.errors import FamilyMismatchError, InvalidParameterError


def test_linear_effect_profile():
    np.testing.assert_allclose(effect_profile_linear(5), [0.25, 0.5, 0.75, 1.0])
    with pytest.raises(InvalidParameterError):
        effect_profile_linear(2)


def test_true_estimands():
    c = table1_scenario("C-I", 8, 5, 10)
    assert true_estimands(c) == pytest.approx((0.625, 1.0))
    b = table1_scenario("B-I", 8, 5, 10)
    assert true_estimands(b) == pytest.approx((0.25, 0.25))


def test_scenario_models():
    assert table1_scenario("B-II", 8, 5, 10).models == ("eti/ne", "eti/exch")
    assert table1_scenario("B-I", 8, 5, 10).models == ("eti/exch",)
    with pytest.raises(InvalidParameterError):
        table1_scenario("C-IV", 8, 5, 10)


def test_layout_and_shapes():
    sc = table1_scenario("C-II", 8, 5, 10)
    d = simulate(sc, make_stream(1, sc.scenario_id, 0))
    assert d.num_rows == 8 * 5 * 10
    assert set(d.clusters) == set(range(1, 9))
    first = d.cluster == 1
    np.testing.assert_array_equal(np.unique(d.exposure[first & (d.period == 5)]), [4])
    np.testing.assert_array_equal(d.treat, d.exposure >= 1)


def test_streams_are_deterministic_and_distinct():
    sc = table1_scenario("B-I", 8, 5, 10)
    a = simulate(sc, make_stream(3, sc.scenario_id, 7)).y
    b = simulate(sc, make_stream(3, sc.scenario_id, 7)).y
    c = simulate(sc, make_stream(3, sc.scenario_id, 8)).y
    d = simulate(sc, make_stream(3, "other", 7)).y
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_family_mismatch():
    sc = table1_scenario("C-I", 8, 5, 10)
    with pytest.raises(FamilyMismatchError):
        simulate_binary(sc, make_stream(1, "x", 0))


def test_bad_configs():
    s = RandomStructure("EXCH", sigma_u=0.1)
    with pytest.raises(InvalidParameterError):
        ScenarioConfig("x", 8, 5, 10, "binary", s, p0=1.0)
    with pytest.raises(InvalidParameterError):
        ScenarioConfig("x", 8, 5, 10, "continuous", s, effects=(1.0, 2.0))
    with pytest.raises(InvalidParameterError):
        ScenarioConfig("x", 8, 5, 10, "continuous", s, singular="maybe")


def test_continuous_moments():
    # cell means: var = sigma_u^2 + sigma^2/K; within-cell var = sigma^2
    s = RandomStructure("EXCH", sigma_u=0.5)
    sc = ScenarioConfig("moments", 400, 3, 20, "continuous", s, effects=(0.0, 0.0), sigma=1.3)
    d = simulate(sc, make_stream(11, sc.scenario_id, 0))
    y = d.y.reshape(400, 3, 20)
    within = y.var(axis=2, ddof=1).mean()
    assert within == pytest.approx(1.69, rel=0.03)
    cm = y.mean(axis=(1, 2))
    assert cm.var(ddof=1) == pytest.approx(0.25 + 1.69 / 60, rel=0.15)
    # effects enter through exposure
    sc2 = sc.with_(effects=(2.0, 5.0), structure=RandomStructure("EXCH", sigma_u=0.0))
    d2 = simulate(sc2, make_stream(11, sc2.scenario_id, 0))
    for e, target in [(0, 0.0), (1, 2.0), (2, 5.0)]:
        assert d2.y[d2.exposure == e].mean() == pytest.approx(target, abs=0.05)


def test_binary_marginal_probability():
    s = RandomStructure("EXCH", sigma_u=0.8)
    sc = ScenarioConfig("marg", 600, 3, 30, "binary", s, effects=(0.0, 0.0), p0=0.2)
    d = simulate(sc, make_stream(5, sc.scenario_id, 0))
    assert set(np.unique(d.y)) <= {0.0, 1.0}
    assert d.y.mean() == pytest.approx(marginal_probability(0.2, 0.8), abs=0.01)
    assert marginal_probability(0.2, 0.8) > 0.2  # attenuation towards 1/2
    assert marginal_probability(0.2, 0.0) == pytest.approx(0.2)


def test_period_effects_shift_means():
    s = RandomStructure("EXCH", sigma_u=0.0)
    sc = ScenarioConfig("pe", 200, 3, 20, "continuous", s, effects=(0.0, 0.0),
                        period_effects=(9.0, 1.0, -1.0), sigma=0.5)
    d = simulate(sc, make_stream(2, sc.scenario_id, 0))
    means = [d.y[d.period == j].mean() for j in (1, 2, 3)]
    np.testing.assert_allclose(means, [0.0, 1.0, -1.0], atol=0.02)


@given(st.integers(0, 2**31), st.integers(0, 50))
def test_stream_reproducible(seed, rep):
    a = make_stream(seed, "C-I/8-5-10", rep).random(4)
    b = make_stream(seed, "C-I/8-5-10", rep).random(4)
    np.testing.assert_array_equal(a, b)
