"""Report-only checks of a market and synthetic population against the estimator's regularity conditions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np

from schoolrd.eligibility import school_test_cutoff
from schoolrd.market import MarketSpec


class Status(str, Enum):
    OK = "satisfied"
    VIOLATED = "violated"
    UNKNOWN = "unverifiable"


@dataclass(frozen=True)
class Check:
    label: str
    status: Status
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...]

    @property
    def violations(self) -> list[Check]:
        return [c for c in self.checks if c.status is Status.VIOLATED]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [{"label": c.label, "status": c.status.value, "detail": c.detail} for c in self.checks],
        }


def _close(a: float, b: float) -> bool:
    return math.isclose(float(a), float(b), rel_tol=0, abs_tol=1e-12)


def validate_market(market: MarketSpec, dgp=None, cutoffs: Sequence[float] | None = None) -> ValidationReport:
    """Check cutoff interiority, density, moment and smoothness conditions.

    Cutoff checks need ``cutoffs`` (population values); DGP checks need ``dgp``.
    Anything that cannot be checked is reported as unverifiable.
    """
    checks: list[Check] = []
    if cutoffs is None:
        checks.append(Check("cutoffs-known", Status.UNKNOWN, "no population cutoffs supplied"))
    else:
        c = list(cutoffs)
        bad = []
        for s in market.schools:
            knots = [Fraction(k, s.qualifier_max + 1) for k in range(1, s.qualifier_max + 2)]
            if any(_close(c[s.id], k) for k in knots):
                bad.append(s.id)
        checks.append(
            Check(
                "cutoffs-off-qualifier-knots",
                Status.VIOLATED if bad else Status.OK,
                f"schools {bad} sit exactly on a qualifier boundary" if bad else "no cutoff on a qualifier boundary",
            )
        )
        clashes = []
        tests = market.test_schools()
        for i, a in enumerate(tests):
            for b in tests[i + 1 :]:
                if a.index != b.index or (c[a.id] == 0 and c[b.id] == 0):
                    continue
                if _close(school_test_cutoff(a, c), school_test_cutoff(b, c)):
                    clashes.append((a.id, b.id))
        checks.append(
            Check(
                "cutoffs-distinct-per-test",
                Status.VIOLATED if clashes else Status.OK,
                f"schools {clashes} share a test and a nonzero score cutoff" if clashes else "test cutoffs distinct",
            )
        )
        interior = [s.id for s in tests if 0 < school_test_cutoff(s, c) < 1]
        checks.append(
            Check("cutoffs-interior", Status.OK if interior else Status.UNKNOWN, f"test schools with interior cutoffs: {interior}")
        )
        dead = [s.id for s in market.schools if s.capacity_share == 0]
        checks.append(
            Check(
                "capacity-positive",
                Status.VIOLATED if dead else Status.OK,
                f"schools {dead} have no seats: cutoff pinned at 1" if dead else "every school has seats",
            )
        )
    if dgp is None:
        for label in ("bounded-density", "moment-bounds", "smooth-means", "smooth-density"):
            checks.append(Check(label, Status.UNKNOWN, "no DGP supplied"))
        return ValidationReport(tuple(checks))

    lows, highs = [], []
    for t in dgp.types:
        for d in t.densities:
            lo, hi = d._extremes()
            lows.append(lo)
            highs.append(hi)
    positive = all(x > 0 for x in lows)
    checks.append(
        Check(
            "bounded-density",
            Status.OK if positive else Status.VIOLATED,
            f"score densities in [{min(lows, default=1):.6g}, {max(highs, default=1):.6g}]",
        )
    )
    finite = dgp.noise == "gaussian" or dgp.pareto_shape > 2
    checks.append(Check("moment-bounds", Status.OK if finite else Status.VIOLATED, f"noise law {dgp.noise}"))
    checks.append(Check("smooth-means", Status.OK, "mean outcomes are polynomials of degree at most 3"))
    checks.append(Check("smooth-density", Status.OK, "score densities are polynomials"))
    if cutoffs is not None:
        demand = {s for t in dgp.types if t.share > 0 for s in t.preferences}
        starved = [s.id for s in market.schools if s.capacity_share == 0 and s.id in demand]
        if starved:
            checks.append(Check("zero-capacity-demand", Status.VIOLATED, f"schools {starved} are ranked but have no seats"))
    return ValidationReport(tuple(checks))


def score_density_range(dgp) -> tuple[float, float]:
    vals = np.array([d._extremes() for t in dgp.types for d in t.densities])
    return float(vals[:, 0].min()), float(vals[:, 1].max())
