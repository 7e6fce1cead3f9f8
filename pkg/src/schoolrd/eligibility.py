"""Eligibility regions in test-score space and identified pairwise contrasts.

All functions work on a fixed cutoff vector and a student *type*
``(preferences, qualifiers)``. Arithmetic is generic over ``float`` and
``fractions.Fraction``: passing Fraction cutoffs gives exact endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from numbers import Real
from typing import Callable, Iterable, Sequence

import numpy as np

from schoolrd.market import OUTSIDE_OPTION, MarketSpec, SchoolSpec

Prefs = Sequence[int]
Quals = Sequence[int]

MC_POSITIVITY_DRAWS = 1_000_000


class DomainError(ValueError):
    """An operation was applied to a school or pair it is not defined for."""


def fmt_number(x: Real) -> str:
    """Render a score endpoint, as a small fraction when it is one."""
    if isinstance(x, Fraction):
        return str(x)
    f = Fraction(float(x)).limit_denominator(1000)
    if abs(float(f) - float(x)) < 1e-12:
        return str(f)
    return f"{float(x):.12g}"


@dataclass(frozen=True)
class Interval:
    """A nonempty sub-interval of [0, 1]; use :meth:`make` to get ``None`` for empty ones."""

    lower: Real
    upper: Real
    lower_closed: bool = True
    upper_closed: bool = True

    def __post_init__(self) -> None:
        if self.lower > self.upper:
            raise ValueError("interval lower end exceeds upper end")
        if self.lower == self.upper and not (self.lower_closed and self.upper_closed):
            raise ValueError("a degenerate interval must be a closed point")

    @classmethod
    def make(cls, lower: Real, upper: Real, lower_closed: bool = True, upper_closed: bool = True):
        if lower > upper or (lower == upper and not (lower_closed and upper_closed)):
            return None
        return cls(lower, upper, lower_closed, upper_closed)

    @property
    def length(self) -> Real:
        return self.upper - self.lower

    @property
    def is_point(self) -> bool:
        return self.lower == self.upper

    def closure(self) -> Interval:
        return Interval(self.lower, self.upper, True, True)

    def intersect(self, other: Interval | None) -> Interval | None:
        if other is None:
            return None
        if self.lower > other.lower:
            lo, lo_c = self.lower, self.lower_closed
        elif self.lower < other.lower:
            lo, lo_c = other.lower, other.lower_closed
        else:
            lo, lo_c = self.lower, self.lower_closed and other.lower_closed
        if self.upper < other.upper:
            hi, hi_c = self.upper, self.upper_closed
        elif self.upper > other.upper:
            hi, hi_c = other.upper, other.upper_closed
        else:
            hi, hi_c = self.upper, self.upper_closed and other.upper_closed
        return Interval.make(lo, hi, lo_c, hi_c)

    def contains(self, x: Real) -> bool:
        above = x > self.lower or (self.lower_closed and x == self.lower)
        below = x < self.upper or (self.upper_closed and x == self.upper)
        return above and below

    def enlarge(self, h: Real) -> Interval:
        """Closed ``h``-neighbourhood, clipped to [0, 1]."""
        return Interval(max(self.lower - h, 0), min(self.upper + h, 1), True, True)

    def __str__(self) -> str:
        if self.is_point:
            return "{" + fmt_number(self.lower) + "}"
        left = "[" if self.lower_closed else "("
        right = "]" if self.upper_closed else ")"
        return f"{left}{fmt_number(self.lower)}, {fmt_number(self.upper)}{right}"


@dataclass(frozen=True)
class Region:
    """Product of per-test intervals; ``empty`` is set iff some factor is empty."""

    per_test: tuple[Interval | None, ...]
    empty: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_test", tuple(self.per_test))
        if any(iv is None for iv in self.per_test):
            object.__setattr__(self, "empty", True)
        if self.empty:
            object.__setattr__(self, "per_test", tuple(None for _ in self.per_test))

    @classmethod
    def nothing(cls, num_tests: int) -> Region:
        return cls(tuple(None for _ in range(num_tests)), empty=True)

    @classmethod
    def everything(cls, num_tests: int) -> Region:
        return cls(tuple(Interval(0, 1) for _ in range(num_tests)))

    @property
    def num_tests(self) -> int:
        return len(self.per_test)

    def closure(self) -> Region:
        if self.empty:
            return self
        return Region(tuple(iv.closure() for iv in self.per_test))

    def intersect(self, other: Region) -> Region:
        if self.empty or other.empty:
            return Region.nothing(self.num_tests)
        return Region(tuple(a.intersect(b) for a, b in zip(self.per_test, other.per_test)))

    def slice(self, test: int, interval: Interval | None) -> Region:
        """Keep the points whose ``test`` coordinate lies in ``interval``."""
        if self.empty:
            return self
        parts = list(self.per_test)
        parts[test] = parts[test].intersect(interval)
        return Region(tuple(parts))

    def replace(self, test: int, interval: Interval | None) -> Region:
        if self.empty:
            return self
        parts = list(self.per_test)
        parts[test] = interval
        return Region(tuple(parts))

    def enlarge(self, h: Real) -> Region:
        if self.empty:
            return self
        return Region(tuple(iv.enlarge(h) for iv in self.per_test))

    @property
    def measure(self) -> Real:
        if self.empty:
            return 0
        out: Real = 1
        for iv in self.per_test:
            out = out * iv.length
        return out

    def contains(self, point: Sequence[Real]) -> bool:
        if self.empty:
            return False
        return all(iv.contains(x) for iv, x in zip(self.per_test, point))

    def __str__(self) -> str:
        if self.empty:
            return "∅"
        return " x ".join(str(iv) for iv in self.per_test) if self.per_test else "(all)"


class Variation(str, Enum):
    LOTTERY = "lottery"
    RD = "rd"
    UNIDENTIFIED = "unidentified"


@dataclass(frozen=True)
class ContrastReport:
    type_key: tuple[tuple[int, ...], tuple[int, ...]]
    pair: tuple[int, int]
    region: Region
    variation: Variation
    rd_cutoff: tuple[int, Real] | None = None


# -- cutoffs in score and lottery space -------------------------------------


def _threshold(school: SchoolSpec, q: int, c_s: Real) -> Real:
    # tie-breaker value needed to clear c_s with qualifier q, clamped to [0, 1]
    raw = (1 + school.qualifier_max) * c_s - q
    return min(max(raw, 0), 1)


def score_cutoff(school: SchoolSpec, q: int, c_s: Real) -> Real:
    """Minimum test score with which a student holding qualifier ``q`` clears ``c_s``."""
    if not school.is_test:
        raise DomainError(f"school {school.id} is not a test-score school")
    return _threshold(school, q, c_s)


def school_test_cutoff(school: SchoolSpec, c: Sequence[Real]) -> Real:
    """The interior score-space cutoff of a test school (0 if there is none)."""
    if not school.is_test:
        raise DomainError(f"school {school.id} is not a test-score school")
    candidates = [_threshold(school, q, c[school.id]) for q in range(school.qualifier_max + 1)]
    inside = [r for r in candidates if r < 1]
    return max(inside) if inside else 0


def _lenient(
    s: int, prefs: Prefs, quals: Quals, c: Sequence[Real], market: MarketSpec, test: int
) -> tuple[Real, bool]:
    better = prefs[: list(prefs).index(s)] if s in prefs else list(prefs)
    vals = [
        _threshold(market[b], quals[b], c[b])
        for b in better
        if market[b].is_test and market[b].index == test
    ]
    if not vals:
        return 1, True
    return max(min(vals), 0), False


def lenient_cutoff(
    s: int, prefs: Prefs, quals: Quals, c: Sequence[Real], test: int, market: MarketSpec
) -> Real:
    """Lowest score on ``test`` that qualifies for some school ranked above ``s``.

    With no such school the constraint is vacuous and the value is 1.
    """
    return _lenient(s, prefs, quals, c, market, test)[0]


def win_probability(school: SchoolSpec, q: int, c_s: Real) -> Real:
    if not school.is_lottery:
        raise DomainError(f"school {school.id} is not a lottery school")
    if school.index is None:
        return 1
    return 1 - _threshold(school, q, c_s)


def sure_win_set(quals: Quals, c: Sequence[Real], market: MarketSpec) -> set[int]:
    """Lottery schools at which the student qualifies whatever the draw."""
    return {s.id for s in market.lottery_schools() if win_probability(s, quals[s.id], c[s.id]) == 1}


def ranks_above_sure_wins(s: int, prefs: Prefs, quals: Quals, c: Sequence[Real], market: MarketSpec) -> bool:
    """No sure-win lottery school is ranked strictly above ``s``."""
    if s not in prefs:
        return False
    better = set(prefs[: list(prefs).index(s)])
    return not (better & sure_win_set(quals, c, market))


def lottery_event_probability(
    wins: Iterable[int], losses: Iterable[int], quals: Quals, c: Sequence[Real], market: MarketSpec
) -> Real:
    """P(win every school in ``wins`` and lose every school in ``losses``).

    Exact under independent uniform lotteries: on each lottery the event is a
    half-open interval of the shared draw, so the probability is the product
    of interval lengths.
    """
    lo = {l: 0 for l in range(market.num_lotteries)}
    hi = {l: 1 for l in range(market.num_lotteries)}
    for s in wins:
        school = market[s]
        if school.index is not None:
            lo[school.index] = max(lo[school.index], _threshold(school, quals[s], c[s]))
    for s in losses:
        school = market[s]
        if school.index is None:
            return 0
        hi[school.index] = min(hi[school.index], _threshold(school, quals[s], c[s]))
    out: Real = 1
    for l in lo:
        out = out * max(hi[l] - lo[l], 0)
    return out


def _preferred_lotteries(s: int, prefs: Prefs, market: MarketSpec) -> list[int]:
    upto = list(prefs).index(s) if s in prefs else len(prefs)
    return [b for b in prefs[:upto] if market[b].is_lottery]


def favorite_lottery_probability(
    s: int, prefs: Prefs, quals: Quals, c: Sequence[Real], market: MarketSpec
) -> Real:
    """P(``s`` is the best-ranked lottery school the student qualifies for)."""
    if not market[s].is_lottery:
        raise DomainError(f"school {s} is not a lottery school")
    return lottery_event_probability([s], _preferred_lotteries(s, prefs, market), quals, c, market)


def favorite_lottery_positive(
    s: int,
    prefs: Prefs,
    quals: Quals,
    c: Sequence[Real],
    market: MarketSpec,
    *,
    lottery_sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None,
    seed: int = 0,
) -> bool:
    """Whether ``s`` is the favourite won lottery school with positive probability.

    With the default independent lotteries this is decided exactly. A custom
    ``lottery_sampler`` (returning ``n x L`` draws) switches to a Monte Carlo
    check that reports positive iff any of 10**6 draws hits the event.
    """
    if not market[s].is_lottery:
        raise DomainError(f"school {s} is not a lottery school")
    if lottery_sampler is None:
        return favorite_lottery_probability(s, prefs, quals, c, market) > 0
    u = lottery_sampler(MC_POSITIVITY_DRAWS, np.random.default_rng(seed))
    hit = np.ones(u.shape[0], dtype=bool)
    school = market[s]
    if school.index is not None:
        hit &= u[:, school.index] >= _threshold(school, quals[s], c[s])
    for b in _preferred_lotteries(s, prefs, market):
        other = market[b]
        if other.index is None:
            return False
        hit &= u[:, other.index] < _threshold(other, quals[b], c[b])
    return bool(hit.any())


# -- eligibility regions -----------------------------------------------------


def _base_box(s: int, prefs: Prefs, quals: Quals, c: Sequence[Real], market: MarketSpec):
    parts = []
    for t in range(market.num_tests):
        value, vacuous = _lenient(s, prefs, quals, c, market, t)
        if value <= 0:
            return None, None
        parts.append((value, vacuous))
    return [Interval(0, v, True, vac) for v, vac in parts], parts


def eligibility_set(s: int, prefs: Prefs, quals: Quals, c: Sequence[Real], market: MarketSpec) -> Region:
    """Scores at which the type is assigned to ``s`` with positive probability."""
    nothing = Region.nothing(market.num_tests)
    if s not in prefs:
        return nothing
    box, lenient = _base_box(s, prefs, quals, c, market)
    if box is None:
        return nothing
    school = market[s]
    if school.is_lottery:
        if favorite_lottery_probability(s, prefs, quals, c, market) <= 0:
            return nothing
        return Region(tuple(box))
    if not ranks_above_sure_wins(s, prefs, quals, c, market):
        return nothing
    t0 = school.index
    upper, vacuous = lenient[t0]
    lower = _threshold(school, quals[s], c[s])
    if not upper > lower:
        return nothing
    box[t0] = Interval(lower, upper, True, vacuous)
    return Region(tuple(box))


def identified_contrast_region(
    s0: int, s1: int, prefs: Prefs, quals: Quals, c: Sequence[Real], market: MarketSpec
) -> ContrastReport:
    """Closure intersection of the eligibility regions of ``s1`` (preferred) and ``s0``."""
    prefs = tuple(prefs)
    if s1 not in prefs or s0 not in prefs or prefs.index(s1) >= prefs.index(s0):
        raise DomainError(f"school {s1} is not ranked above school {s0}")
    e0 = eligibility_set(s0, prefs, quals, c, market).closure()
    e1 = eligibility_set(s1, prefs, quals, c, market).closure()
    region = e0.intersect(e1)
    key = (prefs, tuple(quals))
    if region.empty:
        return ContrastReport(key, (s1, s0), region, Variation.UNIDENTIFIED)
    school = market[s1]
    if school.is_lottery:
        return ContrastReport(key, (s1, s0), region, Variation.LOTTERY)
    rd_cutoff = (school.index, _threshold(school, quals[s1], c[s1]))
    return ContrastReport(key, (s1, s0), region, Variation.RD, rd_cutoff)


@dataclass(frozen=True)
class ContrastSummary:
    lottery: int
    rd: int
    unidentified: int
    lottery_measure: Real
    rd_measure: Real


def enumerate_identified_ates(
    market: MarketSpec, c: Sequence[Real], census: Iterable[tuple[Prefs, Quals]]
) -> tuple[list[ContrastReport], ContrastSummary]:
    """Classify every ordered pair ``s1 > s0`` of listed schools for every type."""
    reports = []
    for prefs, quals in census:
        prefs = tuple(prefs)
        for i, s1 in enumerate(prefs):
            for s0 in prefs[i + 1 :]:
                reports.append(identified_contrast_region(s0, s1, prefs, quals, c, market))
    by = {v: [r for r in reports if r.variation is v] for v in Variation}
    summary = ContrastSummary(
        lottery=len(by[Variation.LOTTERY]),
        rd=len(by[Variation.RD]),
        unidentified=len(by[Variation.UNIDENTIFIED]),
        lottery_measure=sum((r.region.measure for r in by[Variation.LOTTERY]), 0),
        rd_measure=sum((r.region.measure for r in by[Variation.RD]), 0),
    )
    return reports, summary


def assignment_probabilities(
    prefs: Prefs, quals: Quals, c: Sequence[Real], market: MarketSpec, qualifies_test: Callable[[int], bool]
) -> dict[int, Real]:
    """Exact assignment distribution at fixed cutoffs for a fixed test-score position.

    ``qualifies_test(s)`` says whether the student's scores clear test school
    ``s``. Lotteries are integrated out exactly.
    """
    out: dict[int, Real] = {}
    lotteries_above: list[int] = []
    for s in prefs:
        school = market[s]
        if s == OUTSIDE_OPTION and school.index is None:
            out[s] = lottery_event_probability([], lotteries_above, quals, c, market)
            break
        if school.is_test:
            if qualifies_test(s):
                out[s] = lottery_event_probability([], lotteries_above, quals, c, market)
                break
            continue
        out[s] = lottery_event_probability([s], lotteries_above, quals, c, market)
        lotteries_above.append(s)
    return out
