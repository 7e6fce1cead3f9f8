"""How much of a linear estimator's weight rests on students who only see RD variation.

A student is *possibly* RD-exposed if, for some pair of schools straddling the
treatment boundary with a test school on top, their score sits within ``h`` of
that school's cutoff inside the lower school's eligibility region. They are
*definitely* exposed if, in addition, no lottery pair straddling the boundary
covers them (within ``h``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from numbers import Real
from typing import Iterable, Sequence

import numpy as np

from schoolrd.eligibility import Interval, Region, Variation, eligibility_set, identified_contrast_region
from schoolrd.market import DegenerateError, MarketSpec, Roster, StudentProfile


class SingularDesignError(DegenerateError):
    """The design does not pin down the requested coefficient."""


@dataclass(frozen=True)
class RdFlags:
    possibly: bool
    definitely: bool
    witnesses: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if self.definitely and not self.possibly:
            raise ValueError("definitely exposed implies possibly exposed")


@dataclass(frozen=True)
class TypeBoxes:
    rd: tuple[tuple[tuple[int, int], Region], ...]
    lottery: tuple[Region, ...]


def type_boxes(
    prefs: Sequence[int], quals: Sequence[int], treated: set[int], c: Sequence[Real], h: float, market: MarketSpec
) -> TypeBoxes:
    rd, lottery = [], []
    prefs = tuple(prefs)
    for i, s1 in enumerate(prefs):
        for s0 in prefs[i + 1 :]:
            if (s1 in treated) == (s0 in treated):
                continue
            report = identified_contrast_region(s0, s1, prefs, quals, c, market)
            if report.variation is Variation.UNIDENTIFIED:
                continue
            if report.variation is Variation.LOTTERY:
                lottery.append(report.region.enlarge(h))
                continue
            t1, r = report.rd_cutoff
            lower_region = eligibility_set(s0, prefs, quals, c, market).closure()
            band = Interval(max(r - h, 0), min(r + h, 1))
            rd.append(((s1, s0), lower_region.replace(t1, band)))
    return TypeBoxes(tuple(rd), tuple(lottery))


def _inside(region: Region, scores: np.ndarray) -> np.ndarray:
    if region.empty:
        return np.zeros(scores.shape[0], dtype=bool)
    ok = np.ones(scores.shape[0], dtype=bool)
    for t, iv in enumerate(region.per_test):
        x = scores[:, t]
        lo, hi = float(iv.lower), float(iv.upper)
        ok &= (x >= lo) if iv.lower_closed else (x > lo)
        ok &= (x <= hi) if iv.upper_closed else (x < hi)
    return ok


def rd_flags_roster(
    roster: Roster, treated: Iterable[int], cutoffs: Sequence[Real], h: float, market: MarketSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized possibly/definitely flags for every student."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    treated = set(treated)
    inverse, keys = roster.types()
    possibly = np.zeros(len(roster), dtype=bool)
    definitely = np.zeros(len(roster), dtype=bool)
    for k, (prefs, quals) in enumerate(keys):
        boxes = type_boxes(prefs, quals, treated, cutoffs, h, market)
        if not boxes.rd:
            continue
        rows = np.flatnonzero(inverse == k)
        scores = roster.scores[rows]
        pos = np.zeros(rows.size, dtype=bool)
        for _, region in boxes.rd:
            pos |= _inside(region, scores)
        cover = np.zeros(rows.size, dtype=bool)
        for region in boxes.lottery:
            cover |= _inside(region, scores)
        possibly[rows] = pos
        definitely[rows] = pos & ~cover
    return possibly, definitely


def rd_flags(
    student: StudentProfile, treated: Iterable[int], cutoffs: Sequence[Real], h: float, market: MarketSpec
) -> RdFlags:
    boxes = type_boxes(student.preferences, student.qualifiers, set(treated), cutoffs, h, market)
    x = student.scores
    witnesses = tuple(pair for pair, region in boxes.rd if region.contains(x))
    possibly = bool(witnesses)
    covered = any(region.contains(x) for region in boxes.lottery)
    return RdFlags(possibly, possibly and not covered, witnesses)


def linear_estimator_weights(design: np.ndarray, target: int) -> np.ndarray:
    """Observation weights ``w`` with ``w @ y`` equal to OLS coefficient ``target`` for any ``y``."""
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not 0 <= target < x.shape[1]:
        raise IndexError("target coefficient out of range")
    if x.shape[0] < x.shape[1] or np.linalg.matrix_rank(x) < x.shape[1]:
        raise SingularDesignError("design matrix is rank deficient")
    gram = x.T @ x
    e = np.zeros(x.shape[1])
    e[target] = 1.0
    return x @ np.linalg.solve(gram, e)


def regression_coefficient(design: np.ndarray, y: np.ndarray, target: int) -> float:
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    coef, _, rank, _ = np.linalg.lstsq(x, np.asarray(y, dtype=float), rcond=None)
    if rank < x.shape[1]:
        raise SingularDesignError("design matrix is rank deficient")
    return float(coef[target])


@dataclass(frozen=True)
class WeightBounds:
    upper: float
    lower: float
    flagged_counts: tuple[int, int]
    wrong_sign: np.ndarray = field(repr=False)
    inverted: bool = False
    negative: bool = False
    regression_upper: float | None = None
    regression_lower: float | None = None

    @property
    def n_wrong_sign(self) -> int:
        return int(self.wrong_sign.sum())

    def to_dict(self) -> dict:
        return {
            "upper": self.upper,
            "lower": self.lower,
            "n_possibly": self.flagged_counts[0],
            "n_definitely": self.flagged_counts[1],
            "n_wrong_sign": self.n_wrong_sign,
            "bounds_inverted": self.inverted,
            "negative_bound": self.negative,
            "regression_upper": self.regression_upper,
            "regression_lower": self.regression_lower,
        }


def rd_weight_bounds(
    weights: np.ndarray,
    treatment: np.ndarray,
    possibly: np.ndarray,
    definitely: np.ndarray,
    *,
    design: np.ndarray | None = None,
    target: int | None = None,
    sign_tolerance: float = 1e-12,
) -> WeightBounds:
    """Weighted sums of ``(2D - 1) * flag``; with a design, also via the indicator regression."""
    w = np.asarray(weights, dtype=float)
    d = np.asarray(treatment, dtype=float)
    up = np.asarray(possibly, dtype=float)
    lo = np.asarray(definitely, dtype=float)
    if not (w.shape == d.shape == up.shape == lo.shape):
        raise ValueError("weights, treatment and flags must be aligned")
    sign = 2 * d - 1
    upper = float(w @ (sign * up))
    lower = float(w @ (sign * lo))
    wrong = ((d == 1) & (w < -sign_tolerance)) | ((d == 0) & (w > sign_tolerance))
    reg_up = reg_lo = None
    if design is not None:
        if target is None:
            raise ValueError("regression path needs the target coefficient")
        reg_up = regression_coefficient(design, sign * up, target)
        reg_lo = regression_coefficient(design, sign * lo, target)
    return WeightBounds(
        upper,
        lower,
        (int(up.sum()), int(lo.sum())),
        wrong,
        inverted=upper < lower,
        negative=upper < 0 or lower < 0,
        regression_upper=reg_up,
        regression_lower=reg_lo,
    )
