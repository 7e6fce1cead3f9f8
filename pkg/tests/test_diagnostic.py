from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import random_diagnostic_design, random_roster
from schoolrd import worked_example
from schoolrd.diagnostic import (
    RdFlags,
    SingularDesignError,
    linear_estimator_weights,
    rd_flags,
    rd_flags_roster,
    rd_weight_bounds,
    regression_coefficient,
)
from schoolrd.market import Kind, MarketSpec, SchoolSpec, StudentProfile
from schoolrd.matching import run_da
from schoolrd.sim import generate_population

C = worked_example.CUTOFFS
TREATED = worked_example.TREATED


def _flags(label, r, h=0.05):
    s = StudentProfile(worked_example.PREFERENCES[label], (r,), (0,) * 4, (0.5,))
    return rd_flags(s, TREATED, C, h, worked_example.market())


def test_type_b_near_top_cutoff_is_definitely_rd():
    f = _flags("B", 0.68)
    assert f.possibly and f.definitely
    assert (2, 1) in f.witnesses


def test_type_a_near_top_cutoff_is_covered_by_a_lottery_pair():
    f = _flags("A", 0.68)
    assert f.possibly and not f.definitely


def test_far_from_cutoffs_nobody_is_flagged():
    for label in "ABC":
        assert _flags(label, 0.1) == RdFlags(False, False, ())
        assert not _flags(label, 0.9).possibly


def test_type_b_lower_cutoff_flag():
    # for B the pair (1, 3) straddles the boundary and admits at 1/3
    f = _flags("B", 0.35)
    assert (1, 3) in f.witnesses


def test_flags_cannot_be_definite_without_possible():
    with pytest.raises(ValueError):
        RdFlags(False, True)


def test_roster_flags_match_single_student_flags():
    dgp = worked_example.dgp()
    pop = generate_population(dgp, 400, 3)
    up, lo = rd_flags_roster(pop.roster, TREATED, C, 0.05, dgp.market)
    for i in range(len(pop.roster)):
        f = rd_flags(pop.roster.profile(i), TREATED, C, 0.05, dgp.market)
        assert (up[i], lo[i]) == (f.possibly, f.definitely)


def test_intercept_only_weights_are_uniform():
    w = linear_estimator_weights(np.ones((7, 1)), 0)
    assert w == pytest.approx(np.full(7, 1 / 7))


def test_difference_in_means_weights_and_telescoping_bound():
    d = np.array([1, 1, 0, 0, 0], dtype=float)
    w = linear_estimator_weights(np.column_stack([np.ones(5), d]), 1)
    assert w == pytest.approx([0.5, 0.5, -1 / 3, -1 / 3, -1 / 3])
    flags = np.ones(5, dtype=bool)
    b = rd_weight_bounds(w, d, flags, flags)
    assert b.upper == pytest.approx(2.0)
    n = 5
    uniform = (2 * d - 1) / n
    assert rd_weight_bounds(uniform, d, flags, flags).upper == pytest.approx(1.0)


def test_no_flags_give_zero_bounds():
    d = np.array([1, 0, 1], dtype=float)
    none = np.zeros(3, dtype=bool)
    b = rd_weight_bounds(np.array([0.3, -0.2, 0.1]), d, none, none)
    assert (b.upper, b.lower) == (0.0, 0.0)


def test_wrong_sign_and_inversion_flags():
    d = np.array([1, 0], dtype=float)
    w = np.array([-0.5, 0.5])
    b = rd_weight_bounds(w, d, np.array([True, False]), np.array([True, False]))
    assert b.n_wrong_sign == 2
    assert b.negative
    up = np.array([True, True])
    lo = np.array([False, True])
    b = rd_weight_bounds(np.array([0.5, 0.5]), d, up, lo)
    assert b.upper == 0.0 and b.lower == -0.5 and not b.inverted


def test_rank_deficient_design_is_reported():
    x = np.column_stack([np.ones(4), np.ones(4)])
    with pytest.raises(SingularDesignError):
        linear_estimator_weights(x, 1)
    with pytest.raises(SingularDesignError):
        regression_coefficient(x, np.arange(4.0), 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 50), k=st.integers(1, 4))
def test_weights_reproduce_the_fitted_coefficient(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, k))
    y = rng.normal(size=n)
    target = int(rng.integers(k))
    w = linear_estimator_weights(x, target)
    assert w @ y == pytest.approx(regression_coefficient(x, y, target), rel=1e-9, abs=1e-9)


def test_two_routes_and_perturbation_on_random_designs():
    rng = np.random.default_rng(42)
    for _ in range(10):
        market, roster, treated, c, h, d, x, target, up, lo = random_diagnostic_design(rng)
        w = linear_estimator_weights(x, target)
        b = rd_weight_bounds(w, d, up, lo, design=x, target=target)
        assert b.regression_upper == pytest.approx(b.upper, rel=1e-9, abs=1e-12)
        assert b.regression_lower == pytest.approx(b.lower, rel=1e-9, abs=1e-12)
        y = rng.normal(size=len(d))
        shift = regression_coefficient(x, y + (2 * d - 1) * up, target) - regression_coefficient(x, y, target)
        assert abs(shift - b.upper) <= 1e-10 * abs(b.upper)


def test_all_lottery_market_has_no_rd_weight():
    rng = np.random.default_rng(0)
    schools = (
        SchoolSpec(0, math.inf, Kind.LOTTERY, None),
        SchoolSpec(1, 0.2, Kind.LOTTERY, 0),
        SchoolSpec(2, 0.3, Kind.LOTTERY, 1),
    )
    market = MarketSpec(schools, 0, 2)
    roster = random_roster(rng, market, 300)
    res = run_da(market, roster)
    d = (res.assignment == 1).astype(float)
    up, lo = rd_flags_roster(roster, {1}, res.cutoffs, 0.05, market)
    w = linear_estimator_weights(np.column_stack([np.ones(300), d]), 1)
    b = rd_weight_bounds(w, d, up, lo)
    assert (b.upper, b.lower) == (0.0, 0.0)


def test_rd_weight_shrinks_with_bandwidth_on_the_worked_example():
    dgp = worked_example.dgp()
    pop = generate_population(dgp, 20_000, 0)
    res = run_da(dgp.market, pop.roster)
    d = np.isin(res.assignment, list(TREATED)).astype(float)
    x = np.column_stack([np.ones(len(d)), d, pop.roster.scores])
    w = linear_estimator_weights(x, 1)
    uppers, lowers = [], []
    for h in (0.1, 0.05, 0.02):
        up, lo = rd_flags_roster(pop.roster, TREATED, res.cutoffs, h, dgp.market)
        b = rd_weight_bounds(w, d, up, lo)
        assert b.upper > b.lower >= 0
        uppers.append(b.upper)
        lowers.append(b.lower)
    assert uppers[0] > uppers[1] > uppers[2]
    assert lowers[0] > lowers[1] > lowers[2]
