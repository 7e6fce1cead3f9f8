"""Student-proposing deferred acceptance and the cutoffs it induces."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from schoolrd.market import (
    OUTSIDE_OPTION,
    ConfigurationError,
    MarketSpec,
    Roster,
    StudentProfile,
    priority_score,
)

log = logging.getLogger(__name__)

Students = Union[Roster, Sequence[StudentProfile]]


@dataclass(frozen=True)
class MatchResult:
    assignment: np.ndarray
    cutoffs: np.ndarray
    rounds: int
    capacities: tuple[float, ...]

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=len(self.capacities))


def as_roster(students: Students, market: MarketSpec) -> Roster:
    if isinstance(students, Roster):
        return students
    return Roster.from_profiles(list(students), market)


def as_cutoffs(values: Sequence[float], market: MarketSpec) -> list:
    values = list(values)
    if len(values) != market.num_schools:
        raise ConfigurationError(f"expected {market.num_schools} cutoffs, got {len(values)}")
    if values[OUTSIDE_OPTION] != 0:
        raise ConfigurationError("the outside option's cutoff must be 0")
    if any(not 0 <= c <= 1 for c in values):
        raise ConfigurationError("cutoffs must lie in [0, 1]")
    return values


def run_da(market: MarketSpec, students: Students, n: int | None = None) -> MatchResult:
    """Run student-proposing deferred acceptance.

    Every stage, all currently unmatched students propose to their best school
    that has not yet rejected them; each school keeps its best ``q_s`` applicants
    (held plus new) by priority score and rejects the rest. Exact score ties are
    broken in favour of the lower student index.

    ``n`` sets the market size used for capacities ``floor(n * q*)`` and
    defaults to the number of students.
    """
    roster = as_roster(students, market)
    num = len(roster)
    n = num if n is None else n
    caps = market.capacities(n)
    v = roster.priority_matrix(market)
    prefs = roster.preferences
    _quick_check(roster, market)

    ptr = np.zeros(num, dtype=np.int64)
    assign = np.full(num, -1, dtype=np.int64)
    held = [np.empty(0, dtype=np.int64) for _ in market.schools]
    proposers = np.arange(num)
    max_rounds = max(1, num * market.num_schools)
    rounds = 0
    while proposers.size:
        rounds += 1
        if rounds > max_rounds:
            raise RuntimeError("deferred acceptance exceeded its round bound")
        choice = prefs[proposers, ptr[proposers]]
        assign[proposers] = choice
        rejected = []
        for s in np.unique(choice):
            new = proposers[choice == s]
            members = np.concatenate([held[s], new])
            cap = caps[s]
            if members.size > cap:
                keep = int(cap)
                order = np.lexsort((members, -v[members, s]))
                rejected.append(members[order[keep:]])
                members = members[order[:keep]]
            held[s] = members
        if rejected:
            proposers = np.concatenate(rejected)
            assign[proposers] = -1
            ptr[proposers] += 1
        else:
            proposers = np.empty(0, dtype=np.int64)

    cutoffs = _cutoffs_from(assign, v, caps)
    return MatchResult(assign, cutoffs, rounds, tuple(caps))


def _quick_check(roster: Roster, market: MarketSpec) -> None:
    # vectorized screen; the full per-row validator then names the culprit
    prefs = roster.preferences
    if not len(roster):
        return
    last = prefs[np.arange(len(roster)), (prefs >= 0).sum(axis=1) - 1]
    bad = (last != OUTSIDE_OPTION) | (prefs >= market.num_schools).any(axis=1)
    bad |= ((roster.scores < 0) | (roster.scores > 1)).any(axis=1)
    bad |= ((roster.lottery_draws < 0) | (roster.lottery_draws > 1)).any(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        roster.profile(i).validate(market, i)


def _cutoffs_from(assign: np.ndarray, v: np.ndarray, caps: Sequence[float]) -> np.ndarray:
    counts = np.bincount(assign, minlength=len(caps)) if assign.size else np.zeros(len(caps), int)
    out = np.zeros(len(caps))
    for s, cap in enumerate(caps):
        if math.isinf(cap) or counts[s] < cap:
            continue
        # a zero-seat school is filled by nobody: no score clears it
        out[s] = v[assign == s, s].min() if counts[s] else 1.0
    return out


def extract_cutoffs(
    result: MatchResult | np.ndarray, market: MarketSpec, students: Students, n: int | None = None
) -> np.ndarray:
    """Cutoff per school: lowest matched priority if the school is full, else 0."""
    roster = as_roster(students, market)
    assign = result.assignment if isinstance(result, MatchResult) else np.asarray(result)
    caps = market.capacities(len(roster) if n is None else n)
    return _cutoffs_from(assign, roster.priority_matrix(market), caps)


def assign_at_cutoffs(student: StudentProfile, cutoffs: Sequence[float], market: MarketSpec) -> int:
    """Favourite listed school whose cutoff the student's priority score clears."""
    for s in student.preferences:
        if s == OUTSIDE_OPTION or priority_score(student, market[s]) >= cutoffs[s]:
            return s
    return OUTSIDE_OPTION


def assign_all_at_cutoffs(roster: Roster, cutoffs: Sequence[float], market: MarketSpec) -> np.ndarray:
    """Vectorized :func:`assign_at_cutoffs` over a roster."""
    v = roster.priority_matrix(market)
    clears = v >= np.asarray(cutoffs, dtype=float)[None, :]
    clears[:, OUTSIDE_OPTION] = True
    prefs = roster.preferences
    rows = np.arange(len(roster))
    out = np.full(len(roster), -1, dtype=np.int64)
    for k in range(prefs.shape[1]):
        s = prefs[:, k]
        open_ = (out < 0) & (s >= 0)
        hit = open_ & clears[rows, np.where(s >= 0, s, 0)]
        out[hit] = s[hit]
    out[out < 0] = OUTSIDE_OPTION
    return out


def check_stability(
    result: MatchResult | np.ndarray, market: MarketSpec, students: Students, n: int | None = None
) -> list[tuple[int, int]]:
    """Brute-force scan for blocking pairs ``(student, school)``.

    A pair blocks if the student ranks the school above their assignment and
    the school either has a free seat or holds someone with a lower priority.
    """
    roster = as_roster(students, market)
    assign = result.assignment if isinstance(result, MatchResult) else np.asarray(result)
    caps = market.capacities(len(roster) if n is None else n)
    v = roster.priority_matrix(market)
    counts = np.bincount(assign, minlength=market.num_schools)
    worst = [v[assign == s, s].min() if counts[s] else math.inf for s in range(market.num_schools)]
    blocking = []
    for i in range(len(roster)):
        prefs = [int(s) for s in roster.preferences[i] if s >= 0]
        current = int(assign[i])
        better = prefs[: prefs.index(current)] if current in prefs else prefs
        for s in better:
            if counts[s] < caps[s] or v[i, s] > worst[s]:
                blocking.append((i, s))
    return blocking


@dataclass(frozen=True)
class ContinuumCutoffs:
    values: np.ndarray
    converged: bool
    disagreement: float
    repetitions: int
    draws: np.ndarray


def solve_continuum_cutoffs(
    market: MarketSpec,
    dgp,
    reference_n: int = 200_000,
    tolerance: float = 0.01,
    seed: int = 0,
    *,
    min_repetitions: int = 2,
    max_repetitions: int = 8,
) -> ContinuumCutoffs:
    """Approximate large-market cutoffs by running DA on big synthetic markets.

    Independent seeds are added until the cross-seed range of every cutoff is
    below ``tolerance``; the returned values are the cross-seed mean. If the
    repetition budget runs out first the result carries ``converged=False``.
    """
    from schoolrd.sim import generate_population

    draws = []
    spread = math.inf
    for rep in range(max_repetitions):
        pop = generate_population(dgp, reference_n, seed=(seed, rep))
        draws.append(run_da(market, pop.roster).cutoffs)
        if len(draws) >= min_repetitions:
            arr = np.array(draws)
            spread = float((arr.max(axis=0) - arr.min(axis=0)).max())
            if spread < tolerance:
                break
    arr = np.array(draws)
    converged = spread < tolerance
    if not converged:
        log.warning("continuum cutoffs did not settle: cross-seed range %.3g", spread)
    return ContinuumCutoffs(arr.mean(axis=0), converged, spread, len(draws), arr)
