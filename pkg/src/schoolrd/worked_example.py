"""The four-school, three-type market used throughout the docs and golden tests.

School 0 is the outside option, schools 1 and 2 admit on a single shared test
with score cutoffs 1/3 and 2/3, and school 3 is an oversubscribed lottery school
that half of its applicants win. Every student has zero discrete priority.

Types (equal shares):

* ``A``: 2 > 3 > 1 > 0
* ``B``: 2 > 1 > 3 > 0
* ``C``: 3 > 2 > 1 > 0

The simulation version draws scores from the U-shaped density
``f(x) = 0.25 + 2.25 (2x - 1)^2`` so that 4/9 of each type falls below 1/3,
1/9 between the cutoffs and 4/9 above 2/3. The capacity shares below make
``c = (0, 1/3, 2/3, 1/2)`` the exact large-market cutoffs under that density.
"""

from __future__ import annotations

import math
from fractions import Fraction

from schoolrd.market import Kind, MarketSpec, SchoolSpec

TYPE_LABELS = ("A", "B", "C")
PREFERENCES = {
    "A": (2, 3, 1, 0),
    "B": (2, 1, 3, 0),
    "C": (3, 2, 1, 0),
}
QUALIFIERS = (0, 0, 0, 0)
CUTOFFS = (Fraction(0), Fraction(1, 3), Fraction(2, 3), Fraction(1, 2))
TREATED = frozenset({2, 3})
CAPACITY_SHARES = (math.inf, 2 / 27, 10 / 27, 1 / 3)
# 0.25 + 2.25 (2x - 1)^2 in the monomial basis
SCORE_DENSITY = (2.5, -9.0, 9.0)
REGION_LABELS = ("I", "II", "III", "IV", "V")


def market() -> MarketSpec:
    return MarketSpec(
        schools=(
            SchoolSpec(0, CAPACITY_SHARES[0], Kind.LOTTERY, None),
            SchoolSpec(1, CAPACITY_SHARES[1], Kind.TEST, 0),
            SchoolSpec(2, CAPACITY_SHARES[2], Kind.TEST, 0),
            SchoolSpec(3, CAPACITY_SHARES[3], Kind.LOTTERY, 0),
        ),
        num_tests=1,
        num_lotteries=1,
    )


def census() -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    return [(PREFERENCES[k], QUALIFIERS) for k in TYPE_LABELS]


def dgp(*, effects: dict[str, dict[int, tuple[float, ...]]] | None = None, noise_sd: float = 1.0):
    """Simulation model of the example; ``effects`` overrides per-type mean outcomes."""
    from schoolrd.sim import DgpSpec, PolynomialDensity, TypeSpec

    density = PolynomialDensity(SCORE_DENSITY)
    default = {0: (0.0,), 1: (0.5, 0.5), 2: (1.0, 0.5), 3: (0.8,)}
    types = tuple(
        TypeSpec(
            label=k,
            preferences=PREFERENCES[k],
            qualifiers=QUALIFIERS,
            share=1 / 3,
            densities=(density,),
            outcome_means=(effects or {}).get(k, default),
            noise_sd=noise_sd,
        )
        for k in TYPE_LABELS
    )
    return DgpSpec(market=market(), types=types)


def coverage_market() -> MarketSpec:
    """One test school (score cutoff 1/2) and one lottery school (win rate 1/2)."""
    return MarketSpec(
        schools=(
            SchoolSpec(0, math.inf, Kind.LOTTERY, None),
            SchoolSpec(1, 5 / 12, Kind.TEST, 0),
            SchoolSpec(2, 1 / 4, Kind.LOTTERY, 0),
        ),
        num_tests=1,
        num_lotteries=1,
    )


COVERAGE_CUTOFFS = (0.0, 0.5, 0.5)
COVERAGE_PAIR = (1, 0)


def coverage_dgp(*, null: bool = False, noise_sd: float = 1.0):
    """Known-effect model for the RD pair (1, 0) with cubic mean outcomes.

    Every type ranks school 1 above school 0; one type also prefers the lottery
    school, one ranks it between 1 and 0, so both proxy-outcome corrections
    are exercised. Uniform scores and the capacity shares of
    :func:`coverage_market` give large-market cutoffs ``(0, 1/2, 1/2)``.
    """
    from schoolrd.sim import DgpSpec, PolynomialDensity, TypeSpec

    uniform = PolynomialDensity((1.0,))
    means = {
        "lottery-first": {0: (0.2, 1.0, -0.6, 0.4), 1: (1.0, 0.8, 0.5, -0.3), 2: (0.5,)},
        "test-only": {0: (-0.1, 0.6, 0.3, 0.2), 1: (0.9, 1.1, -0.4, 0.2)},
        "lottery-between": {0: (0.0, 0.9, 0.2, -0.2), 1: (1.2, 0.7, 0.6, 0.1), 2: (0.3, 0.2)},
    }
    if null:
        for table in means.values():
            table[1] = table[0]
    prefs = {"lottery-first": (2, 1, 0), "test-only": (1, 0), "lottery-between": (1, 2, 0)}
    types = tuple(
        TypeSpec(
            label=k,
            preferences=prefs[k],
            qualifiers=(0, 0, 0),
            share=1 / 3,
            densities=(uniform,),
            outcome_means=means[k],
            noise_sd=noise_sd,
        )
        for k in prefs
    )
    return DgpSpec(market=coverage_market(), types=types)
