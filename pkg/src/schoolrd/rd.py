"""Local-linear estimation of RD-driven contrasts between a test school and a less-preferred school.

For a pair ``(s1, s0)`` where ``s1`` admits on test ``t1``, the estimator keeps
students whose type and off-cutoff scores place them on the ``s1``/``s0``
margin, reweights outcomes by the inverse probability of losing the relevant
lotteries, and fits a uniform-kernel local line on each side of the cutoff.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from numbers import Real
from typing import Sequence

import numpy as np

from schoolrd.eligibility import (
    _lenient,
    _threshold,
    eligibility_set,
    lottery_event_probability,
    ranks_above_sure_wins,
    school_test_cutoff,
)
from schoolrd.market import (
    ConfigurationError,
    DegenerateError,
    MarketSpec,
    Roster,
    StudentProfile,
)

Z_95 = 1.959963984540054


class InsufficientDataError(DegenerateError):
    def __init__(self, side: str, n_side: int, reason: str):
        super().__init__(f"{side} side: {reason} (n={n_side})")
        self.side = side
        self.n_side = n_side


class ImpossibleEventError(ValueError):
    """A realized lottery outcome has probability zero under the cutoffs."""


@dataclass(frozen=True)
class BandwidthPolicy:
    """``h = kappa * N ** -exponent``, or a fixed value when ``fixed`` is set."""

    kappa: float = 1.0
    exponent: float = 0.3
    fixed: float | None = None

    def bandwidth(self, n: int) -> float:
        if self.fixed is not None:
            return self.fixed
        return self.kappa * n ** (-self.exponent)

    def flags(self) -> tuple[str, ...]:
        if self.fixed is not None:
            return ("fixed bandwidth: rate conditions not checked",)
        out = []
        if self.exponent >= 0.5:
            out.append("bandwidth shrinks at least as fast as N^-1/2: feasible and oracle fits may diverge")
        if self.exponent <= 0.2:
            out.append("bandwidth does not undersmooth: the interval ignores smoothing bias")
        return tuple(out)

    @classmethod
    def parse(cls, text: str) -> BandwidthPolicy:
        """Accept ``0.05``, ``N^-0.3`` or ``1.5*N^-0.3``."""
        text = text.replace(" ", "")
        m = re.fullmatch(r"(?:([0-9.eE+-]+)\*)?N\^-([0-9.eE+-]+)", text)
        try:
            if m:
                return cls(kappa=float(m.group(1) or 1.0), exponent=float(m.group(2)))
            value = float(text)
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse bandwidth {text!r}") from exc
        if value <= 0:
            raise ConfigurationError("bandwidth must be positive")
        return cls(fixed=value)


@dataclass(frozen=True)
class SelectionContext:
    market: MarketSpec
    pair: tuple[int, int]
    cutoffs: tuple
    h: float
    rho: Real
    test: int

    @classmethod
    def build(cls, market: MarketSpec, pair: tuple[int, int], cutoffs: Sequence[Real], h: float) -> SelectionContext:
        s1, s0 = pair
        if not 0 <= s1 < market.num_schools or not 0 <= s0 < market.num_schools or s1 == s0:
            raise ConfigurationError(f"invalid pair {pair}")
        if not market[s1].is_test:
            raise ConfigurationError(f"school {s1} must admit on a test score")
        if len(cutoffs) != market.num_schools:
            raise ConfigurationError(f"expected {market.num_schools} cutoffs")
        if h <= 0:
            raise ConfigurationError("bandwidth must be positive")
        rho = school_test_cutoff(market[s1], cutoffs)
        if not 0 < rho < 1:
            raise DegenerateError(f"school {s1}'s score cutoff {rho} is not interior")
        return cls(market, (s1, s0), tuple(cutoffs), h, rho, market[s1].index)


@dataclass(frozen=True)
class TypeSelection:
    """Everything in the selection rule that depends only on the type."""

    eligible: bool
    lower: tuple = ()
    upper: tuple = ()
    lower_closed: tuple = ()
    lose1: tuple[int, ...] = ()
    lose0: tuple[int, ...] = ()
    win0: int | None = None
    pi1: Real = 0
    pi0: Real = 0


def type_selection(prefs: Sequence[int], quals: Sequence[int], ctx: SelectionContext) -> TypeSelection:
    m, c, (s1, s0), t1, rho, h = ctx.market, ctx.cutoffs, ctx.pair, ctx.test, ctx.rho, ctx.h
    prefs = tuple(prefs)
    no = TypeSelection(False)
    if s1 not in prefs or s0 not in prefs or prefs.index(s1) > prefs.index(s0):
        return no
    if not ranks_above_sure_wins(s0, prefs, quals, c, m):
        return no
    # the type must face the pair's cutoff and have both schools reachable
    if _threshold(m[s1], quals[s1], c[s1]) != rho:
        return no
    if eligibility_set(s0, prefs, quals, c, m).empty or eligibility_set(s1, prefs, quals, c, m).empty:
        return no
    lenient1 = _lenient(s1, prefs, quals, c, m, t1)[0]
    if not rho + h < lenient1:
        return no
    t0 = m[s0].index if m[s0].is_test else None
    if t0 == t1 and not rho - h > _threshold(m[s0], quals[s0], c[s0]):
        return no
    if not rho <= _lenient(s0, prefs, quals, c, m, t1)[0]:
        return no
    lower, upper, lower_closed = [], [], []
    for t in range(m.num_tests):
        if t == t1:
            lower.append(0.0), upper.append(1.0), lower_closed.append(True)
        elif t == t0:
            lower.append(_threshold(m[s0], quals[s0], c[s0]))
            upper.append(_lenient(s0, prefs, quals, c, m, t)[0])
            lower_closed.append(True)
        else:
            lower.append(0.0)
            upper.append(_lenient(s0, prefs, quals, c, m, t)[0])
            lower_closed.append(False)
    lose1 = tuple(s for s in prefs[: prefs.index(s1)] if m[s].is_lottery)
    lose0 = tuple(s for s in prefs[: prefs.index(s0)] if m[s].is_lottery)
    win0 = s0 if m[s0].is_lottery and m[s0].index is not None else None
    pi1 = lottery_event_probability([], lose1, quals, c, m)
    pi0 = lottery_event_probability([s0] if m[s0].is_lottery else [], lose0, quals, c, m)
    return TypeSelection(True, tuple(lower), tuple(upper), tuple(lower_closed), lose1, lose0, win0, pi1, pi0)


@dataclass
class SelectionFrame:
    """Per-student selection, band and proxy ingredients for one roster."""

    selected: np.ndarray
    right: np.ndarray
    left: np.ndarray
    running: np.ndarray
    d1: np.ndarray
    d0: np.ndarray
    pi1: np.ndarray
    pi0: np.ndarray


def selection_frame(roster: Roster, ctx: SelectionContext) -> SelectionFrame:
    m = ctx.market
    n = len(roster)
    inverse, keys = roster.types()
    v = roster.priority_matrix(m)
    cut = np.asarray([float(x) for x in ctx.cutoffs])
    selected = np.zeros(n, dtype=bool)
    d1 = np.zeros(n, dtype=bool)
    d0 = np.zeros(n, dtype=bool)
    pi1 = np.zeros(n)
    pi0 = np.zeros(n)
    for k, (prefs, quals) in enumerate(keys):
        sel = type_selection(prefs, quals, ctx)
        if not sel.eligible:
            continue
        rows = np.flatnonzero(inverse == k)
        ok = np.ones(rows.size, dtype=bool)
        for t in range(m.num_tests):
            if t == ctx.test:
                continue
            r = roster.scores[rows, t]
            lo, hi = float(sel.lower[t]), float(sel.upper[t])
            ok &= (r >= lo) if sel.lower_closed[t] else (r > lo)
            ok &= r <= hi
        selected[rows] = ok
        lose1 = np.ones(rows.size, dtype=bool)
        for s in sel.lose1:
            lose1 &= v[rows, s] < cut[s]
        lose0 = np.ones(rows.size, dtype=bool)
        for s in sel.lose0:
            lose0 &= v[rows, s] < cut[s]
        if sel.win0 is not None:
            lose0 &= v[rows, sel.win0] > cut[sel.win0]
        d1[rows], d0[rows] = lose1, lose0
        pi1[rows], pi0[rows] = float(sel.pi1), float(sel.pi0)
    running = roster.scores[:, ctx.test] - float(ctx.rho)
    rho, h = float(ctx.rho), ctx.h
    score = roster.scores[:, ctx.test]
    right = (score >= rho) & (score <= rho + h)
    left = (score >= rho - h) & (score < rho)
    return SelectionFrame(selected, right, left, running, d1, d0, pi1, pi0)


def _ipw(d: np.ndarray, y: np.ndarray, pi: np.ndarray) -> np.ndarray:
    bad = d & (pi == 0)
    if bad.any():
        raise ImpossibleEventError(f"student {int(np.flatnonzero(bad)[0])} won a zero-probability lottery event")
    out = np.zeros_like(y, dtype=float)
    keep = d & (pi > 0)
    out[keep] = y[keep] / pi[keep]
    return out


def proxy_outcomes(frame: SelectionFrame, y: np.ndarray, side: int) -> np.ndarray:
    """Inverse-probability-weighted outcomes ``D Y / pi`` (0/0 read as 0)."""
    if side == 1:
        return _ipw(frame.d1, np.asarray(y, dtype=float), frame.pi1)
    return _ipw(frame.d0, np.asarray(y, dtype=float), frame.pi0)


# -- single-student views ----------------------------------------------------


def _one(student: StudentProfile, ctx: SelectionContext) -> SelectionFrame:
    return selection_frame(Roster.from_profiles([student], ctx.market), ctx)


def selection_indicator(student: StudentProfile, ctx: SelectionContext) -> int:
    """Whether the student sits on the pair's margin (the band itself is checked separately)."""
    return int(_one(student, ctx).selected[0])


def qualification_probability(student: StudentProfile, side: int, ctx: SelectionContext) -> float:
    """Probability over lotteries that the student loses everything ranked above the side's school.

    For ``side=0`` with a lottery ``s0`` this also requires winning ``s0``.
    """
    m, c, (s1, s0) = ctx.market, ctx.cutoffs, ctx.pair
    prefs = student.preferences
    target = s1 if side == 1 else s0
    upto = prefs.index(target) if target in prefs else len(prefs)
    losses = [s for s in prefs[:upto] if m[s].is_lottery]
    wins = [s0] if side == 0 and m[s0].is_lottery else []
    return float(lottery_event_probability(wins, losses, student.qualifiers, c, m))


def proxy_outcome(student: StudentProfile, y: float, side: int, ctx: SelectionContext) -> float:
    m, c, (s1, s0) = ctx.market, ctx.cutoffs, ctx.pair
    prefs = student.preferences
    target = s1 if side == 1 else s0
    upto = prefs.index(target) if target in prefs else len(prefs)
    roster = Roster.from_profiles([student], m)
    v = roster.priority_matrix(m)[0]
    d = all(v[s] < c[s] for s in prefs[:upto] if m[s].is_lottery)
    if side == 0 and m[s0].is_lottery and m[s0].index is not None:
        d = d and v[s0] > c[s0]
    pi = qualification_probability(student, side, ctx)
    if not d:
        return 0.0
    if pi == 0:
        raise ImpossibleEventError("lottery outcome has probability zero under these cutoffs")
    return float(y) / pi


# -- local linear fits -------------------------------------------------------


@dataclass(frozen=True)
class SideFit:
    intercept: float
    slope: float
    n: int
    sigma2: float


def local_linear_side(x: np.ndarray, y: np.ndarray, n_total: int, h: float, side: str = "+") -> SideFit:
    """Uniform-kernel least-squares line through ``(x, y)``; ``x`` is centred at the cutoff.

    ``sigma2`` is the scaled variance ``4 N h / n (mean(y^2) - b0^2)``, floored at 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n == 0:
        raise InsufficientDataError(side, 0, "empty band")
    if np.unique(x).size < 2:
        raise InsufficientDataError(side, n, "fewer than two distinct scores in the band")
    xbar, ybar = x.mean(), y.mean()
    dx = x - xbar
    sxx = float(dx @ dx)
    slope = float(dx @ (y - ybar)) / sxx
    intercept = float(ybar - slope * xbar)
    sigma2 = 4 * n_total * h / n * (float(np.mean(y * y)) - intercept**2)
    return SideFit(intercept, slope, n, max(sigma2, 0.0))


@dataclass(frozen=True)
class EstimateReport:
    tau_hat: float
    beta_plus: tuple[float, float]
    beta_minus: tuple[float, float]
    n_plus: int
    n_minus: int
    sigma2_hat: float
    se: float
    ci_95: tuple[float, float]
    h: float
    cutoff: float
    sigma2_plus: float
    sigma2_minus: float
    rate_flags: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "tau_hat": self.tau_hat,
            "beta_plus": list(self.beta_plus),
            "beta_minus": list(self.beta_minus),
            "n_plus": self.n_plus,
            "n_minus": self.n_minus,
            "sigma2_hat": self.sigma2_hat,
            "sigma2_plus": self.sigma2_plus,
            "sigma2_minus": self.sigma2_minus,
            "se": self.se,
            "ci_95": list(self.ci_95),
            "h": self.h,
            "cutoff": self.cutoff,
            "rate_flags": list(self.rate_flags),
        }


def _fit(frame: SelectionFrame, y1: np.ndarray, y0: np.ndarray, ctx: SelectionContext, n: int, flags) -> EstimateReport:
    wr = frame.selected & frame.right
    wl = frame.selected & frame.left
    plus = local_linear_side(frame.running[wr], y1[wr], n, ctx.h, "+")
    minus = local_linear_side(frame.running[wl], y0[wl], n, ctx.h, "-")
    tau = plus.intercept - minus.intercept
    sigma2 = plus.sigma2 + minus.sigma2
    se = math.sqrt(sigma2 / (n * ctx.h))
    return EstimateReport(
        tau_hat=tau,
        beta_plus=(plus.intercept, plus.slope),
        beta_minus=(minus.intercept, minus.slope),
        n_plus=plus.n,
        n_minus=minus.n,
        sigma2_hat=sigma2,
        se=se,
        ci_95=(tau - Z_95 * se, tau + Z_95 * se),
        h=ctx.h,
        cutoff=float(ctx.rho),
        sigma2_plus=plus.sigma2,
        sigma2_minus=minus.sigma2,
        rate_flags=tuple(flags),
    )


def estimate_rd_ate(
    roster: Roster,
    outcome: Sequence[float],
    pair: tuple[int, int],
    cutoffs: Sequence[Real],
    h: float,
    market: MarketSpec,
    *,
    policy: BandwidthPolicy | None = None,
) -> EstimateReport:
    """Feasible estimate from observed outcomes at the realized cutoffs."""
    ctx = SelectionContext.build(market, pair, cutoffs, h)
    frame = selection_frame(roster, ctx)
    y = np.asarray(outcome, dtype=float)
    if y.shape != (len(roster),):
        raise ConfigurationError("outcome length does not match the roster")
    flags = policy.flags() if policy else ()
    return _fit(frame, proxy_outcomes(frame, y, 1), proxy_outcomes(frame, y, 0), ctx, len(roster), flags)


def oracle_estimate(
    roster: Roster,
    potential: np.ndarray,
    pair: tuple[int, int],
    cutoffs: Sequence[Real],
    h: float,
    market: MarketSpec,
    *,
    policy: BandwidthPolicy | None = None,
) -> EstimateReport:
    """Infeasible benchmark: population cutoffs, proxies built from stored potential outcomes."""
    ctx = SelectionContext.build(market, pair, cutoffs, h)
    frame = selection_frame(roster, ctx)
    s1, s0 = pair
    flags = policy.flags() if policy else ()
    y1 = proxy_outcomes(frame, potential[:, s1], 1)
    y0 = proxy_outcomes(frame, potential[:, s0], 0)
    return _fit(frame, y1, y0, ctx, len(roster), flags)


def band_rows(roster: Roster, outcome: Sequence[float], pair: tuple[int, int], cutoffs, h, market):
    """Rows ``(index, score, proxy, selected, side)`` for every student inside either band."""
    ctx = SelectionContext.build(market, pair, cutoffs, h)
    frame = selection_frame(roster, ctx)
    y = np.asarray(outcome, dtype=float)
    y1, y0 = proxy_outcomes(frame, y, 1), proxy_outcomes(frame, y, 0)
    score = roster.scores[:, ctx.test]
    out = []
    for i in np.flatnonzero(frame.right | frame.left):
        side = "+" if frame.right[i] else "-"
        out.append((int(i), float(score[i]), float(y1[i] if side == "+" else y0[i]), int(frame.selected[i]), side))
    return out
