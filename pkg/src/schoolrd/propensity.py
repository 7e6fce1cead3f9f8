"""Local assignment propensities on a coarsened score grid and the implied regression weights.

Scores on one test are cut into interior cells and bands of half-width ``h``
around each cutoff. Inside a band the student is treated as landing on either
side of the cutoff with probability 1/2; lotteries are integrated out exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from numbers import Real
from typing import Callable, Iterable, Sequence

import numpy as np

from schoolrd.eligibility import _threshold, assignment_probabilities
from schoolrd.market import ConfigurationError, DegenerateError, MarketSpec

ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII", "XIII")


class DegenerateDesignError(DegenerateError):
    """Treatment never deviates from its propensity."""


@dataclass(frozen=True)
class PartitionCell:
    label: str
    lower: float
    upper: float
    cutpoint: float | None = None

    @property
    def is_band(self) -> bool:
        return self.cutpoint is not None

    @property
    def midpoint(self) -> float:
        return self.cutpoint if self.cutpoint is not None else (self.lower + self.upper) / 2


@dataclass(frozen=True)
class BandPartition:
    """Alternating interior cells and cutoff bands on one test."""

    test: int
    cutpoints: tuple[float, ...]
    h: float

    def __post_init__(self) -> None:
        cuts = tuple(sorted(float(x) for x in self.cutpoints))
        object.__setattr__(self, "cutpoints", cuts)
        if self.h <= 0:
            raise ConfigurationError("bandwidth must be positive")
        if any(not 0 < x < 1 for x in cuts):
            raise ConfigurationError("band cutpoints must lie strictly inside (0, 1)")
        edges = (0.0,) + cuts + (1.0,)
        if any(b - a <= 2 * self.h for a, b in zip(cuts, cuts[1:])):
            raise ConfigurationError("bands overlap: h must be below half the smallest cutoff gap")
        if cuts and (cuts[0] - self.h < 0 or cuts[-1] + self.h > 1):
            raise ConfigurationError("a band sticks out of [0, 1]")
        if len(edges) - 1 + len(cuts) > len(ROMAN):
            raise ConfigurationError("too many cutpoints")

    @classmethod
    def from_cutoffs(
        cls,
        market: MarketSpec,
        c: Sequence[Real],
        test: int,
        h: float,
        census: Iterable[tuple[Sequence[int], Sequence[int]]],
    ) -> BandPartition:
        """Bands at every interior score cutoff any listed type faces on ``test``."""
        cuts = set()
        for prefs, quals in census:
            for s in prefs:
                school = market[s]
                if school.is_test and school.index == test:
                    r = _threshold(school, quals[s], c[s])
                    if 0 < r < 1:
                        cuts.add(float(r))
        return cls(test, tuple(cuts), h)

    @property
    def cells(self) -> tuple[PartitionCell, ...]:
        out = []
        lo = 0.0
        for x in self.cutpoints:
            out.append((lo, x - self.h, None))
            out.append((x - self.h, x + self.h, x))
            lo = x + self.h
        out.append((lo, 1.0, None))
        return tuple(PartitionCell(ROMAN[k], a, b, cut) for k, (a, b, cut) in enumerate(out))


def local_propensity(
    prefs: Sequence[int],
    quals: Sequence[int],
    cells: Sequence[PartitionCell],
    treated: Iterable[int],
    c: Sequence[Real],
    market: MarketSpec,
) -> float:
    """Probability of assignment into ``treated`` for a type whose scores fall in ``cells``.

    ``cells[t]`` is the cell of test ``t``. Tests are handled independently:
    each band contributes one fair coin shared by every school whose cutoff is
    the band's centre.
    """
    if len(cells) != market.num_tests:
        raise ConfigurationError(f"need one cell per test, got {len(cells)}")
    treated = set(treated)
    deterministic: dict[int, bool] = {}
    coin_of: dict[int, int] = {}
    coins: list[int] = []
    for s in prefs:
        school = market[s]
        if not school.is_test:
            continue
        cell = cells[school.index]
        r = float(_threshold(school, quals[s], c[s]))
        if cell.is_band and r == cell.cutpoint:
            if school.index not in coins:
                coins.append(school.index)
            coin_of[s] = school.index
            continue
        if cell.lower < r < cell.upper:
            raise ConfigurationError(
                f"cell {cell.label} on test {school.index} straddles school {s}'s cutoff {r}"
            )
        deterministic[s] = cell.midpoint >= r
    total = 0.0
    for heads in itertools.product((False, True), repeat=len(coins)):
        side = dict(zip(coins, heads))

        def qualifies(s: int) -> bool:
            return side[coin_of[s]] if s in coin_of else deterministic[s]

        probs = assignment_probabilities(prefs, quals, c, market, qualifies)
        total += float(sum(p for s, p in probs.items() if s in treated)) * 0.5 ** len(coins)
    return total


@dataclass(frozen=True)
class CellScore:
    cell: tuple[str, str]
    psi: float
    mass: float = 0.0
    effect: float = 0.0
    band: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.psi <= 1:
            raise ValueError("a propensity must lie in [0, 1]")


@dataclass(frozen=True)
class WeightDecomposition:
    weights: np.ndarray
    implied_tau: float
    band_share: float
    cells: tuple[CellScore, ...]


def weight_decomposition(cells: Sequence[CellScore], *, mass_tolerance: float = 1e-9) -> WeightDecomposition:
    """Cell weights ``P(v) psi (1 - psi)``, normalized, and the effect they imply."""
    cells = tuple(cells)
    mass = np.array([c.mass for c in cells], dtype=float)
    if abs(mass.sum() - 1) > mass_tolerance:
        raise ConfigurationError(f"cell masses sum to {mass.sum():.12g}, not 1")
    psi = np.array([c.psi for c in cells], dtype=float)
    raw = mass * psi * (1 - psi)
    if raw.sum() <= 0:
        raise DegenerateError("every cell has a degenerate propensity: no weight anywhere")
    w = raw / raw.sum()
    effects = np.array([c.effect for c in cells], dtype=float)
    band = np.array([c.band for c in cells])
    return WeightDecomposition(w, float(w @ effects), float(w[band].sum()), cells)


def propensity_regression_estimand(y: Sequence[float], treated: Sequence[float], psi: Sequence[float]) -> float:
    """Coefficient of ``Y`` on ``D - psi`` with no intercept."""
    y = np.asarray(y, dtype=float)
    resid = np.asarray(treated, dtype=float) - np.asarray(psi, dtype=float)
    denom = float(resid @ resid)
    if denom == 0:
        raise DegenerateDesignError("treatment equals its propensity for every observation")
    return float(resid @ y) / denom


def propensity_table(
    market: MarketSpec,
    c: Sequence[Real],
    census: Sequence[tuple[Sequence[int], Sequence[int]]],
    partition: BandPartition,
    treated: Iterable[int],
) -> np.ndarray:
    """``types x cells`` matrix of local propensities on a single-test market."""
    if market.num_tests != 1:
        raise ConfigurationError("propensity tables are tabulated for single-test markets")
    treated = set(treated)
    cells = partition.cells
    return np.array(
        [[local_propensity(p, q, (cell,), treated, c, market) for cell in cells] for p, q in census]
    )


def cell_scores(
    table: np.ndarray,
    partition: BandPartition,
    type_labels: Sequence[str],
    shares: Sequence[float],
    cdfs: Sequence[Callable[[float], float]],
    effects: np.ndarray | None = None,
) -> list[CellScore]:
    """Attach cell masses ``share * P(score in cell)`` (and optional effects) to a table."""
    out = []
    for k, label in enumerate(type_labels):
        for j, cell in enumerate(partition.cells):
            mass = shares[k] * (cdfs[k](cell.upper) - cdfs[k](cell.lower))
            eff = 0.0 if effects is None else float(effects[k, j])
            out.append(CellScore((label, cell.label), float(table[k, j]), float(mass), eff, cell.is_band))
    return out


def student_propensities(
    roster,
    market: MarketSpec,
    c: Sequence[Real],
    h: float,
    treated: Iterable[int],
) -> np.ndarray:
    """Local propensity of every student, with bands of half-width ``h`` on every test."""
    treated = set(treated)
    inverse, keys = roster.types()
    partitions = [BandPartition.from_cutoffs(market, c, t, h, keys) for t in range(market.num_tests)]
    cell_edges = [np.array([cell.upper for cell in p.cells]) for p in partitions]
    # cell index per student and test: first cell whose upper edge exceeds the score
    idx = np.zeros((len(roster), market.num_tests), dtype=np.int64)
    for t, edges in enumerate(cell_edges):
        idx[:, t] = np.minimum(np.searchsorted(edges, roster.scores[:, t], side="right"), len(edges) - 1)
    out = np.zeros(len(roster))
    memo: dict[tuple, float] = {}
    for i in range(len(roster)):
        key = (int(inverse[i]),) + tuple(int(j) for j in idx[i])
        if key not in memo:
            prefs, quals = keys[key[0]]
            cells = tuple(partitions[t].cells[j] for t, j in enumerate(key[1:]))
            memo[key] = local_propensity(prefs, quals, cells, treated, c, market)
        out[i] = memo[key]
    return out
