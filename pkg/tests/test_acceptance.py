"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line detail; the terminal summary prints a PASS/FAIL
line per criterion.
"""

from __future__ import annotations

import csv
import io
import math
import re
import time
from fractions import Fraction

import numpy as np
import pytest

from _reference_tables import CONTRASTS, ELIGIBILITY_TEXT, PAIRS, PSI
from _util import (
    consistency_cutoffs,
    eligibility_mc_disagreements,
    random_diagnostic_design,
    random_market,
    random_roster,
    random_type,
)
from schoolrd import worked_example
from schoolrd.cli import eligibility_tables
from schoolrd.diagnostic import linear_estimator_weights, rd_flags_roster, rd_weight_bounds, regression_coefficient
from schoolrd.market import Kind, MarketSpec, SchoolSpec
from schoolrd.matching import assign_at_cutoffs, check_stability, run_da
from schoolrd.propensity import BandPartition, cell_scores, propensity_table, weight_decomposition
from schoolrd.rd import BandwidthPolicy, SelectionContext, proxy_outcomes, selection_frame
from schoolrd.sim import experiment_coverage, experiment_cutoff_convergence, experiment_oracle_gap, generate_population

criterion = pytest.mark.criterion


def _note(record_property, text: str) -> None:
    record_property("detail", text)
    print(text)


def _parse_region(text: str):
    """Interior endpoints of a printed one-dimensional region: None, a point, or a pair."""
    if text == "empty":
        return None
    if text.startswith("{"):
        return Fraction(text[1:-1])
    lo, hi = re.fullmatch(r"[\[(](.+), (.+)[\])]", text).groups()
    return (Fraction(lo), Fraction(hi))


@criterion(1, "worked-example eligibility and contrast tables")
def test_criterion_1_eligibility_tables(record_property):
    start = time.perf_counter()
    e_text, x_text, _ = eligibility_tables(
        worked_example.market(), list(worked_example.CUTOFFS), list(worked_example.TYPE_LABELS), worked_example.census()
    )
    elapsed = time.perf_counter() - start
    e_rows = {row["type"]: row for row in csv.DictReader(io.StringIO(e_text))}
    x_rows = {row["type"]: row for row in csv.DictReader(io.StringIO(x_text))}
    e_hits = sum(e_rows[t][f"E_{s}"] == ELIGIBILITY_TEXT[t][s] for t in "ABC" for s in range(4))
    x_hits = 0
    for t in "ABC":
        for (a, b), expected in zip(PAIRS, CONTRASTS[t]):
            got = _parse_region(x_rows[t][f"({a},{b})"])
            # compare interiors and measures: a point region has measure zero
            x_hits += got == expected
    _note(record_property, f"{e_hits}/12 eligibility entries, {x_hits}/18 contrast entries, {elapsed:.3f}s")
    assert e_hits == 12 and x_hits == 18
    assert elapsed < 1.0


@criterion(2, "local propensity table")
def test_criterion_2_propensity_table(record_property):
    start = time.perf_counter()
    m, c, census = worked_example.market(), worked_example.CUTOFFS, worked_example.census()
    part = BandPartition.from_cutoffs(m, c, 0, 0.05, census)
    table = propensity_table(m, c, census, part, worked_example.TREATED)
    elapsed = time.perf_counter() - start
    hits = int((table == np.array(PSI)).sum())
    _note(record_property, f"{hits}/15 entries, (B, II) = {table[1, 1]}, (C, IV) = {table[2, 3]}, {elapsed:.3f}s")
    assert hits == 15
    assert elapsed < 1.0


@criterion(3, "band weight share vanishes with the bandwidth")
def test_criterion_3_vanishing_band_weight(record_property):
    start = time.perf_counter()
    dgp = worked_example.dgp()
    m, c, census = dgp.market, worked_example.CUTOFFS, worked_example.census()
    labels = [t.label for t in dgp.types]
    shares = []
    for h in (0.1, 0.05, 0.02, 0.01):
        part = BandPartition.from_cutoffs(m, c, 0, h, census)
        table = propensity_table(m, c, census, part, worked_example.TREATED)
        cells = cell_scores(table, part, labels, [t.share for t in dgp.types], [t.densities[0].cdf for t in dgp.types])
        shares.append(weight_decomposition(cells).band_share)
    elapsed = time.perf_counter() - start
    _note(record_property, "shares " + ", ".join(f"{s:.4f}" for s in shares) + f", {elapsed:.2f}s")
    assert all(b < a for a, b in zip(shares, shares[1:]))
    assert shares[-1] < 0.05
    assert elapsed < 10


@criterion(4, "deferred acceptance is stable and rationalized by its cutoffs")
def test_criterion_4_da_correctness(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    blocking = mismatched = students = 0
    for _ in range(1000):
        market = random_market(rng, max_schools=5, infinite_share=0.05)
        n = int(rng.integers(1, 501))
        roster = random_roster(rng, market, n, num_types=int(rng.integers(1, 12)))
        res = run_da(market, roster)
        blocking += len(check_stability(res, market, roster))
        for i in range(n):
            mismatched += assign_at_cutoffs(roster.profile(i), res.cutoffs, market) != res.assignment[i]
        students += n
    elapsed = time.perf_counter() - start
    _note(record_property, f"{blocking} blocking pairs, {mismatched}/{students} unrationalized, {elapsed:.1f}s")
    assert blocking == 0 and mismatched == 0
    assert elapsed < 120


@pytest.mark.slow
@criterion(5, "cutoffs converge at the root-N rate")
def test_criterion_5_cutoff_convergence(record_property):
    dgp = worked_example.dgp()
    rep = experiment_cutoff_convergence(dgp, [1000, 10_000, 100_000], 200, [float(x) for x in worked_example.CUTOFFS], seed=0)
    med = rep.metrics["median_max_deviation"]
    _note(record_property, f"slope {rep.metrics['slope']:.3f}, medians {[round(x, 5) for x in med]}, {rep.runtime:.0f}s")
    assert -0.6 <= rep.metrics["slope"] <= -0.4
    assert rep.runtime < 600


def _consistency_market(rng):
    # at least three schools so markets mix lotteries, tests and outside option
    while True:
        market = random_market(rng, max_schools=5, max_tests=2, max_lotteries=2)
        if market.num_schools >= 3:
            return market


@criterion(6, "eligibility sets agree with simulated assignment")
def test_criterion_6_eligibility_simulation_consistency(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    bad = checks = 0
    for _ in range(20):
        market = _consistency_market(rng)
        c = consistency_cutoffs(rng, market)
        types = [random_type(rng, market) for _ in range(4)]
        b, k = eligibility_mc_disagreements(rng, market, c, types, steps=200, draws=20_000)
        bad += b
        checks += k
    elapsed = time.perf_counter() - start
    _note(record_property, f"{bad} disagreements over {checks} off-cutoff grid checks, {elapsed:.1f}s")
    assert bad == 0
    assert elapsed < 300


@pytest.mark.slow
@criterion(7, "RD interval coverage")
def test_criterion_7_coverage(record_property):
    rep = experiment_coverage(
        worked_example.coverage_dgp(),
        worked_example.COVERAGE_PAIR,
        20_000,
        BandwidthPolicy(exponent=0.3),
        500,
        worked_example.COVERAGE_CUTOFFS,
        seed=0,
    )
    m = rep.metrics
    _note(
        record_property,
        f"coverage {m['coverage']:.3f}, bias {m['bias']:.4f}, mean se {m['mean_se']:.4f}, truth {m['truth']:.4f}, {rep.runtime:.0f}s",
    )
    assert 0.90 <= m["coverage"] <= 0.98
    assert abs(m["bias"]) < 0.5 * m["mean_se"]
    assert rep.runtime < 900


@pytest.mark.slow
@criterion(8, "feasible and oracle estimates merge")
def test_criterion_8_oracle_gap(record_property):
    rep = experiment_oracle_gap(
        worked_example.coverage_dgp(),
        worked_example.COVERAGE_PAIR,
        [4000, 16_000, 64_000],
        BandwidthPolicy(exponent=0.3),
        200,
        worked_example.COVERAGE_CUTOFFS,
        seed=0,
    )
    med = rep.metrics["median_scaled_gap"]
    _note(record_property, f"median scaled gaps {[round(x, 4) for x in med]}, {rep.runtime:.0f}s")
    assert all(b <= a for a, b in zip(med, med[1:]))
    assert rep.runtime < 900


@criterion(9, "RD weight bounds survive perturb-and-recompute")
def test_criterion_9_diagnostic_contract(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        market, roster, treated, c, h, d, x, target, up, lo = random_diagnostic_design(rng)
        w = linear_estimator_weights(x, target)
        bounds = rd_weight_bounds(w, d, up, lo, design=x, target=target)
        y = rng.normal(size=len(d))
        base = regression_coefficient(x, y, target)
        bumped = regression_coefficient(x, y + (2 * d - 1) * up, target)
        worst = max(worst, abs((bumped - base) - bounds.upper) / abs(bounds.upper))

    schools = (
        SchoolSpec(0, math.inf, Kind.LOTTERY, None),
        SchoolSpec(1, 0.2, Kind.LOTTERY, 0),
        SchoolSpec(2, 0.3, Kind.LOTTERY, 1, qualifier_max=1),
    )
    lottery_market = MarketSpec(schools, 0, 2)
    roster = random_roster(rng, lottery_market, 400)
    res = run_da(lottery_market, roster)
    d = (res.assignment == 2).astype(float)
    up, lo = rd_flags_roster(roster, {2}, res.cutoffs, 0.05, lottery_market)
    w = linear_estimator_weights(np.column_stack([np.ones(len(d)), d]), 1)
    lottery = rd_weight_bounds(w, d, up, lo)
    elapsed = time.perf_counter() - start
    _note(
        record_property,
        f"max relative error {worst:.2e} over 100 designs, all-lottery bounds ({lottery.upper}, {lottery.lower}), {elapsed:.1f}s",
    )
    assert worst < 1e-10
    assert lottery.upper == 0 and lottery.lower == 0
    assert elapsed < 60


@criterion(10, "proxy outcomes are unbiased for stored potential outcomes")
def test_criterion_10_proxy_identity(record_property):
    start = time.perf_counter()
    dgp, pair = worked_example.coverage_dgp(), worked_example.COVERAGE_PAIR
    s1, s0 = pair
    gaps = {1: [], 0: []}
    n = 20_000
    h = BandwidthPolicy(exponent=0.3).bandwidth(n)
    for rep in range(100):
        pop = generate_population(dgp, n, (10, rep))
        res = run_da(dgp.market, pop.roster)
        y = pop.observed(res.assignment)
        frame = selection_frame(pop.roster, SelectionContext.build(dgp.market, pair, res.cutoffs, h))
        right, left = frame.selected & frame.right, frame.selected & frame.left
        gaps[1].append(proxy_outcomes(frame, y, 1)[right] - pop.potential[right, s1])
        gaps[0].append(proxy_outcomes(frame, y, 0)[left] - pop.potential[left, s0])
    elapsed = time.perf_counter() - start
    z = {}
    for side, parts in gaps.items():
        g = np.concatenate(parts)
        z[side] = g.mean() / (g.std(ddof=1) / math.sqrt(g.size))
    _note(record_property, f"pooled z right {z[1]:.2f}, left {z[0]:.2f}, {elapsed:.1f}s")
    assert abs(z[1]) < 3 and abs(z[0]) < 3
    assert elapsed < 120
