import numpy as np
import pytest
from hypothesis import given, strategies as st

from stepwedge import Design, FixedEffects, build_standard_design, design_row, exposure_time
from stepwedge.errors import InvalidDesignError, NonDivisibleAllocationError, OutOfRangeError


def test_even_allocation_8_5():
    d = build_standard_design(8, 5, 10)
    assert [d.crossover[c] for c in d.clusters] == [2, 2, 3, 3, 4, 4, 5, 5]


def test_one_cluster_per_sequence():
    d = build_standard_design(8, 9, 10)
    assert sorted(d.crossover.values()) == list(range(2, 10))


def test_non_divisible_allocation():
    with pytest.raises(NonDivisibleAllocationError):
        build_standard_design(7, 5, 10)


def test_too_few_periods():
    with pytest.raises(InvalidDesignError):
        build_standard_design(4, 2, 10)


def test_crossover_outside_range_rejected():
    with pytest.raises(InvalidDesignError):
        Design(2, 4, 5, {1: 1, 2: 3})


@pytest.mark.parametrize("c, period, e", [(2, 1, 0), (2, 5, 4), (5, 5, 1)])
def test_exposure_time_examples(c, period, e):
    d = Design(1, 5, 3, {1: c})
    assert exposure_time(d, 1, period) == e


def test_exposure_time_bad_ids():
    d = build_standard_design(4, 5, 2)
    with pytest.raises(OutOfRangeError):
        exposure_time(d, 5, 1)
    with pytest.raises(OutOfRangeError):
        exposure_time(d, 1, 6)


def test_design_row_examples():
    d = Design(2, 5, 3, {1: 2, 2: 5})
    eti, it = FixedEffects("eti", 5), FixedEffects("it", 5)
    np.testing.assert_array_equal(design_row(d, eti, 1, 4), [1, 0, 0, 1, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(design_row(d, it, 1, 1), [1, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(design_row(d, eti, 2, 5), [1, 0, 0, 0, 1, 1, 0, 0, 0])


def test_parameter_counts_and_columns():
    assert FixedEffects("it", 5).p == 6
    assert FixedEffects("eti", 5).p == 9
    assert FixedEffects("eti", 4).columns == ["intercept", "period2", "period3", "period4",
                                              "delta1", "delta2", "delta3"]


def test_design_csv():
    text = build_standard_design(4, 3, 1).to_csv().splitlines()
    assert text[0] == "cluster,sequence,crossover_period"
    assert text[1:] == ["1,1,2", "2,1,2", "3,2,3", "4,2,3"]


designs = st.integers(3, 9).flatmap(
    lambda J: st.tuples(st.just(J), st.integers(1, 4).map(lambda m: m * (J - 1))))


@given(designs)
def test_exposure_matrix_matches_scalar(dims):
    J, I = dims
    d = build_standard_design(I, J, 2)
    E = d.exposure_matrix()
    for c in d.clusters:
        for j in d.periods:
            assert E[c - 1, j - 1] == exposure_time(d, c, j)
    assert E.min() == 0 and E.max() == J - 1


@given(designs)
def test_staircase_symmetry(dims):
    J, I = dims
    d = build_standard_design(I, J, 2)
    E = d.exposure_matrix()
    m = I // (J - 1)
    for e in range(1, J):
        assert np.sum(E == e) == m * (J - e)
    # the longest exposure only occurs in the earliest sequence
    rows = np.flatnonzero((E == J - 1).any(axis=1)) + 1
    assert all(d.crossover[c] == 2 for c in rows)


@given(designs, st.sampled_from(["it", "eti"]))
def test_treatment_block_indicator_sum(dims, treatment):
    J, I = dims
    d = build_standard_design(I, J, 2)
    fixed = FixedEffects(treatment, J)
    for c in d.clusters:
        for j in d.periods:
            row = design_row(d, fixed, c, j)
            assert row[fixed.treatment_slice].sum() == (exposure_time(d, c, j) >= 1)
            assert np.array_equal(row, design_row(d, fixed, c, j))
