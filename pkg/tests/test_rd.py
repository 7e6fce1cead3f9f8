from __future__ import annotations

import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schoolrd import worked_example
from schoolrd.market import ConfigurationError, DegenerateError, Kind, MarketSpec, SchoolSpec, StudentProfile
from schoolrd.matching import assign_all_at_cutoffs
from schoolrd.rd import (
    BandwidthPolicy,
    ImpossibleEventError,
    InsufficientDataError,
    SelectionContext,
    SelectionFrame,
    band_rows,
    estimate_rd_ate,
    local_linear_side,
    oracle_estimate,
    proxy_outcome,
    proxy_outcomes,
    qualification_probability,
    selection_indicator,
)
from schoolrd.sim import generate_population, rd_truth

C = worked_example.CUTOFFS
PREFS = worked_example.PREFERENCES


def _ctx(pair=(2, 1), cutoffs=C, h=0.05, market=None):
    return SelectionContext.build(market or worked_example.market(), pair, cutoffs, h)


def _student(prefs, r, u=0.9, num_schools=4):
    return StudentProfile(tuple(prefs), (r,), (0,) * num_schools, (u,))


def test_context_cutoff_and_validation():
    ctx = _ctx()
    assert ctx.rho == F(2, 3) and ctx.test == 0
    with pytest.raises(ConfigurationError):
        _ctx(pair=(3, 1))
    with pytest.raises(ConfigurationError):
        _ctx(h=0)
    with pytest.raises(DegenerateError):
        _ctx(cutoffs=(0, F(1, 3), F(0), F(1, 2)))


def test_type_a_on_the_margin_is_selected():
    assert selection_indicator(_student(PREFS["A"], 0.64), _ctx()) == 1


def test_preferred_sure_win_lottery_deselects():
    sure = (F(0), F(1, 3), F(2, 3), F(0))
    # type C ranks the lottery school first; at cutoff 0 it always wins there
    assert selection_indicator(_student(PREFS["C"], 0.64), _ctx(cutoffs=sure)) == 0
    assert selection_indicator(_student(PREFS["C"], 0.64), _ctx()) == 1


def test_type_without_the_contrast_is_not_selected():
    # type B ranks 1 above 3 and 2 above 1: (2, 1) is on its list
    assert selection_indicator(_student(PREFS["B"], 0.64), _ctx()) == 1
    assert selection_indicator(_student((1, 2, 0), 0.64), _ctx()) == 0
    assert selection_indicator(_student((2, 0), 0.64), _ctx()) == 0


def _two_test_market():
    schools = (
        SchoolSpec(0, math.inf, Kind.LOTTERY, None),
        SchoolSpec(1, 0.2, Kind.TEST, 0),
        SchoolSpec(2, 0.2, Kind.TEST, 1),
    )
    return MarketSpec(schools, 2, 0)


def test_off_running_score_above_preferred_cutoff_deselects():
    m = _two_test_market()
    ctx = SelectionContext.build(m, (1, 0), (0, 0.5, 0.5), 0.05)
    lo = StudentProfile((2, 1, 0), (0.52, 0.3), (0, 0, 0), ())
    hi = StudentProfile((2, 1, 0), (0.52, 0.7), (0, 0, 0), ())
    assert selection_indicator(lo, ctx) == 1
    assert selection_indicator(hi, ctx) == 0


def test_qualification_probabilities():
    ctx = _ctx()
    assert qualification_probability(_student(PREFS["A"], 0.5), 1, ctx) == 1
    assert qualification_probability(_student(PREFS["C"], 0.5), 1, ctx) == 0.5
    schools = (
        SchoolSpec(0, math.inf, Kind.LOTTERY, None),
        SchoolSpec(1, 0.2, Kind.TEST, 0),
        SchoolSpec(2, 0.2, Kind.LOTTERY, 0),
        SchoolSpec(3, 0.2, Kind.LOTTERY, 1),
    )
    m = MarketSpec(schools, 1, 2)
    ctx = SelectionContext.build(m, (1, 3), (0, 0.5, 0.5, 0.5), 0.05)
    s = StudentProfile((2, 1, 3, 0), (0.5,), (0,) * 4, (0.1, 0.9))
    assert qualification_probability(s, 0, ctx) == 0.25
    assert qualification_probability(s, 1, ctx) == 0.5


def test_proxy_outcome_examples():
    ctx = _ctx()
    assert proxy_outcome(_student(PREFS["A"], 0.7), 3.2, 1, ctx) == 3.2
    # type C loses its first-choice lottery with draw 0.2 (< 1/2): weight 1/0.5
    assert proxy_outcome(_student(PREFS["C"], 0.7, u=0.2), 2.0, 1, ctx) == 4.0
    assert proxy_outcome(_student(PREFS["C"], 0.7, u=0.8), 2.0, 1, ctx) == 0.0


def test_impossible_event_raises():
    frame = SelectionFrame(*(np.array([True]),) * 4, np.array([True]), np.array([True]), np.zeros(1), np.zeros(1))
    with pytest.raises(ImpossibleEventError):
        proxy_outcomes(frame, np.array([1.0]), 1)
    frame.d1[:] = False
    assert proxy_outcomes(frame, np.array([1.0]), 1).tolist() == [0.0]


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(-10, 10),
    b=st.floats(-10, 10),
    h=st.floats(0.01, 0.5),
    seed=st.integers(0, 1000),
)
def test_local_line_reproduces_affine_functions(a, b, h, seed):
    x = np.random.default_rng(seed).uniform(0, h, 25)
    fit = local_linear_side(x, a + b * x, 1000, h)
    assert fit.intercept == pytest.approx(a, abs=1e-8)
    assert fit.slope == pytest.approx(b, abs=1e-6)


@given(k=st.floats(-50, 50), n=st.integers(2, 40))
def test_constant_outcome_has_zero_variance(k, n):
    x = np.linspace(-0.1, 0, n, endpoint=False)
    fit = local_linear_side(x, np.full(n, k), 500, 0.1, "-")
    assert fit.intercept == pytest.approx(k)
    assert fit.sigma2 == pytest.approx(0.0, abs=1e-9 * max(1, k * k))


@given(k=st.floats(0.1, 20), seed=st.integers(0, 1000))
def test_variance_scales_quadratically(k, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0, 0.1, 30), rng.normal(size=30)
    base = local_linear_side(x, y, 300, 0.1).sigma2
    assert local_linear_side(x, k * y, 300, 0.1).sigma2 == pytest.approx(k * k * base, rel=1e-9)


def test_variance_formula_by_hand():
    x = np.array([0.0, 0.1])
    y = np.array([1.0, 3.0])
    fit = local_linear_side(x, y, 10, 0.1)
    assert (fit.intercept, fit.slope) == pytest.approx((1.0, 20.0))
    assert fit.sigma2 == pytest.approx(4 * 10 * 0.1 / 2 * (5.0 - 1.0))


def test_insufficient_data_carries_side_count():
    with pytest.raises(InsufficientDataError) as err:
        local_linear_side(np.array([]), np.array([]), 10, 0.1, "+")
    assert err.value.n_side == 0
    with pytest.raises(InsufficientDataError) as err:
        local_linear_side(np.array([0.01, 0.01]), np.array([1.0, 2.0]), 10, 0.1, "-")
    assert err.value.n_side == 2 and err.value.side == "-"


def test_bandwidth_policy_parse_and_flags():
    assert BandwidthPolicy.parse("0.05").bandwidth(10) == 0.05
    p = BandwidthPolicy.parse("1.5*N^-0.3")
    assert p.bandwidth(1000) == pytest.approx(1.5 * 1000**-0.3)
    assert BandwidthPolicy.parse("N^-0.3").flags() == ()
    assert len(BandwidthPolicy.parse("N^-0.6").flags()) == 1
    assert len(BandwidthPolicy.parse("N^-0.1").flags()) == 1
    for bad in ("abc", "-1", "N^-x"):
        with pytest.raises(ConfigurationError):
            BandwidthPolicy.parse(bad)


def _population(n=20_000, seed=0):
    dgp = worked_example.dgp()
    pop = generate_population(dgp, n, seed)
    return dgp, pop


def test_feasible_equals_oracle_at_population_cutoffs():
    dgp, pop = _population()
    c = [float(x) for x in C]
    y = pop.observed(assign_all_at_cutoffs(pop.roster, c, dgp.market))
    h = 20_000**-0.3
    feas = estimate_rd_ate(pop.roster, y, (2, 1), c, h, dgp.market)
    orac = oracle_estimate(pop.roster, pop.potential, (2, 1), c, h, dgp.market)
    assert feas.to_dict() == orac.to_dict()


def test_unranked_school_does_not_change_the_estimate():
    dgp, pop = _population(5000, 1)
    c = [float(x) for x in C]
    y = pop.observed(assign_all_at_cutoffs(pop.roster, c, dgp.market))
    base = estimate_rd_ate(pop.roster, y, (2, 1), c, 0.1, dgp.market)
    m = dgp.market
    bigger = MarketSpec(m.schools + (SchoolSpec(4, 0.1, Kind.LOTTERY, 0),), m.num_tests, m.num_lotteries)
    roster = pop.roster
    wider = type(roster)(roster.preferences, roster.scores, np.pad(roster.qualifiers, ((0, 0), (0, 1))), roster.lottery_draws)
    again = estimate_rd_ate(wider, y, (2, 1), c + [0.3], 0.1, bigger)
    assert again.tau_hat == base.tau_hat


def test_estimate_report_is_consistent():
    dgp, pop = _population()
    c = [float(x) for x in C]
    y = pop.observed(assign_all_at_cutoffs(pop.roster, c, dgp.market))
    rep = estimate_rd_ate(pop.roster, y, (2, 1), c, 0.05, dgp.market, policy=BandwidthPolicy(fixed=0.05))
    assert rep.tau_hat == pytest.approx(rep.beta_plus[0] - rep.beta_minus[0])
    assert rep.se == pytest.approx(math.sqrt(rep.sigma2_hat / (20_000 * 0.05)))
    assert rep.ci_95[1] - rep.tau_hat == pytest.approx(1.959963984540054 * rep.se)
    assert rep.rate_flags
    truth = rd_truth(dgp, (2, 1), c).tau
    assert abs(rep.tau_hat - truth) < 5 * rep.se
    rows = band_rows(pop.roster, y, (2, 1), c, 0.05, dgp.market)
    assert sum(1 for r in rows if r[3] and r[4] == "+") == rep.n_plus


def test_empty_band_is_insufficient_data():
    dgp, pop = _population(50, 2)
    y = np.zeros(50)
    with pytest.raises(InsufficientDataError):
        estimate_rd_ate(pop.roster, y, (2, 1), [float(x) for x in C], 1e-6, dgp.market)


def test_outcome_length_checked():
    dgp, pop = _population(100, 2)
    with pytest.raises(ConfigurationError):
        estimate_rd_ate(pop.roster, np.zeros(3), (2, 1), [float(x) for x in C], 0.1, dgp.market)
