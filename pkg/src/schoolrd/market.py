"""Schools, students and priority scores.

School ids are the integers ``0..M`` in list order; school ``0`` is the
outside option. Test and lottery indices are zero-based.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

OUTSIDE_OPTION = 0


class ConfigurationError(ValueError):
    """A market, roster or run configuration is malformed."""


class DataError(ValueError):
    """An input row holds values the model cannot accept."""


class DegenerateError(RuntimeError):
    """An estimator or weighting scheme has no information to work with."""


class InvalidProfileError(ValueError):
    """A student profile is inconsistent with the market it is used in."""

    def __init__(self, student: int, reason: str):
        super().__init__(f"student {student}: {reason}")
        self.student = student
        self.reason = reason


class Kind(str, Enum):
    LOTTERY = "lottery"
    TEST = "test"


@dataclass(frozen=True)
class SchoolSpec:
    """One school.

    ``capacity_share`` is the seat count per student (``q*``); the finite
    market has ``floor(N * capacity_share)`` seats. ``index`` is the lottery
    used by a lottery school or the test used by a test-score school.
    """

    id: int
    capacity_share: float
    kind: Kind
    index: int | None
    qualifier_max: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.capacity_share >= 0:
            raise ConfigurationError(f"school {self.id}: capacity_share must be >= 0")
        if self.qualifier_max < 0:
            raise ConfigurationError(f"school {self.id}: qualifier_max must be >= 0")
        if self.index is None and not (self.id == OUTSIDE_OPTION and self.kind is Kind.LOTTERY):
            raise ConfigurationError(f"school {self.id}: missing {self.kind.value} index")

    @property
    def is_lottery(self) -> bool:
        return self.kind is Kind.LOTTERY

    @property
    def is_test(self) -> bool:
        return self.kind is Kind.TEST

    def capacity(self, n: int) -> float:
        if math.isinf(self.capacity_share):
            return math.inf
        # round() guards against float products like 100 * 0.29 = 28.999999999999996
        return float(math.floor(round(n * self.capacity_share, 9)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "capacity_share": "inf" if math.isinf(self.capacity_share) else self.capacity_share,
            "kind": self.kind.value,
            "index": self.index,
            "qualifier_max": self.qualifier_max,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SchoolSpec:
        try:
            share = d["capacity_share"]
            share = math.inf if share in ("inf", "Infinity", None) else float(share)
            return cls(
                id=int(d["id"]),
                capacity_share=share,
                kind=Kind(d["kind"]),
                index=None if d.get("index") is None else int(d["index"]),
                qualifier_max=int(d.get("qualifier_max", 0)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"bad school entry {d!r}: {exc}") from exc


@dataclass(frozen=True)
class MarketSpec:
    schools: tuple[SchoolSpec, ...]
    num_tests: int
    num_lotteries: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "schools", tuple(self.schools))
        if not self.schools:
            raise ConfigurationError("market has no schools")
        for pos, school in enumerate(self.schools):
            if school.id != pos:
                raise ConfigurationError(
                    f"school ids must be 0..M in order; position {pos} has id {school.id}"
                )
            if school.index is not None:
                bound = self.num_lotteries if school.is_lottery else self.num_tests
                if not 0 <= school.index < bound:
                    raise ConfigurationError(
                        f"school {school.id}: {school.kind.value} index {school.index} out of range"
                    )
        outside = self.schools[OUTSIDE_OPTION]
        if not (outside.is_lottery and math.isinf(outside.capacity_share)):
            raise ConfigurationError("school 0 must be a lottery school with infinite capacity")

    @property
    def num_schools(self) -> int:
        return len(self.schools)

    def __getitem__(self, school_id: int) -> SchoolSpec:
        return self.schools[school_id]

    def capacities(self, n: int) -> list[float]:
        return [s.capacity(n) for s in self.schools]

    def test_schools(self) -> list[SchoolSpec]:
        return [s for s in self.schools if s.is_test]

    def lottery_schools(self) -> list[SchoolSpec]:
        return [s for s in self.schools if s.is_lottery]

    def with_school(self, school: SchoolSpec) -> MarketSpec:
        return MarketSpec(self.schools + (school,), self.num_tests, self.num_lotteries)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schools": [s.to_dict() for s in self.schools],
            "num_tests": self.num_tests,
            "num_lotteries": self.num_lotteries,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MarketSpec:
        try:
            schools = [SchoolSpec.from_dict(s) for s in d["schools"]]
            return cls(tuple(schools), int(d["num_tests"]), int(d["num_lotteries"]))
        except KeyError as exc:
            raise ConfigurationError(f"market spec missing field {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> MarketSpec:
        if not Path(path).exists():
            raise ConfigurationError(f"market file not found: {path}")
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class StudentProfile:
    """Preferences, test scores, qualifiers and lottery draws of one student.

    ``qualifiers`` has one entry per school (``Q_s``). ``preferences`` lists
    acceptable schools from best to worst and ends with the outside option.
    """

    preferences: tuple[int, ...]
    scores: tuple[float, ...]
    qualifiers: tuple[int, ...]
    lottery_draws: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        for name in ("preferences", "scores", "qualifiers", "lottery_draws"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def prefers(self, a: int, b: int) -> bool:
        """True if school ``a`` is ranked strictly above ``b``.

        Unlisted schools rank below every listed one.
        """
        prefs = self.preferences
        if a not in prefs:
            return False
        if b not in prefs:
            return True
        return prefs.index(a) < prefs.index(b)

    def validate(self, market: MarketSpec, student: int = 0) -> None:
        prefs = self.preferences
        if len(set(prefs)) != len(prefs):
            raise InvalidProfileError(student, "duplicate school in preferences")
        if not prefs or prefs[-1] != OUTSIDE_OPTION:
            raise InvalidProfileError(student, "preferences must end with school 0")
        if any(not 0 <= s < market.num_schools for s in prefs):
            raise InvalidProfileError(student, "unknown school in preferences")
        if len(self.scores) != market.num_tests:
            raise InvalidProfileError(student, f"expected {market.num_tests} test scores")
        if any(not 0.0 <= r <= 1.0 for r in self.scores):
            raise InvalidProfileError(student, "test score outside [0, 1]")
        if len(self.qualifiers) != market.num_schools:
            raise InvalidProfileError(student, f"expected {market.num_schools} qualifiers")
        for school, q in zip(market.schools, self.qualifiers):
            if not 0 <= q <= school.qualifier_max:
                raise InvalidProfileError(student, f"qualifier {q} out of range at school {school.id}")
        if len(self.lottery_draws) != market.num_lotteries:
            raise InvalidProfileError(student, f"expected {market.num_lotteries} lottery draws")
        if any(not 0.0 <= u <= 1.0 for u in self.lottery_draws):
            raise InvalidProfileError(student, "lottery draw outside [0, 1]")

    @property
    def type_key(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return self.preferences, self.qualifiers


def priority_score(student: StudentProfile, school: SchoolSpec) -> float:
    """Lexicographic priority ``(Q_s + tie-breaker) / (qbar_s + 1)``; higher is better."""
    q = student.qualifiers[school.id]
    if school.index is None:
        return 1.0
    try:
        tie = student.scores[school.index] if school.is_test else student.lottery_draws[school.index]
    except IndexError:
        raise ConfigurationError(
            f"student has no {school.kind.value} {school.index} required by school {school.id}"
        ) from None
    return (q + tie) / (school.qualifier_max + 1)


@dataclass
class Roster:
    """Column-oriented student data, the form the vectorized paths work on.

    ``preferences`` is an ``N x K`` integer array padded with ``-1``.
    """

    preferences: np.ndarray
    scores: np.ndarray
    qualifiers: np.ndarray
    lottery_draws: np.ndarray
    ids: list[str] | None = None
    _type_cache: tuple[np.ndarray, list] | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return self.preferences.shape[0]

    @classmethod
    def from_profiles(cls, profiles: Sequence[StudentProfile], market: MarketSpec) -> Roster:
        n = len(profiles)
        width = max((len(p.preferences) for p in profiles), default=1)
        prefs = np.full((n, width), -1, dtype=np.int64)
        for i, p in enumerate(profiles):
            p.validate(market, i)
            prefs[i, : len(p.preferences)] = p.preferences
        return cls(
            preferences=prefs,
            scores=np.array([p.scores for p in profiles], dtype=float).reshape(n, market.num_tests),
            qualifiers=np.array([p.qualifiers for p in profiles], dtype=np.int64).reshape(
                n, market.num_schools
            ),
            lottery_draws=np.array([p.lottery_draws for p in profiles], dtype=float).reshape(
                n, market.num_lotteries
            ),
        )

    def profile(self, i: int) -> StudentProfile:
        row = self.preferences[i]
        return StudentProfile(
            preferences=tuple(int(s) for s in row[row >= 0]),
            scores=tuple(float(x) for x in self.scores[i]),
            qualifiers=tuple(int(q) for q in self.qualifiers[i]),
            lottery_draws=tuple(float(u) for u in self.lottery_draws[i]),
        )

    def profiles(self) -> list[StudentProfile]:
        return [self.profile(i) for i in range(len(self))]

    def validate(self, market: MarketSpec) -> None:
        n = len(self)
        if self.scores.shape != (n, market.num_tests):
            raise ConfigurationError(f"scores must have shape ({n}, {market.num_tests})")
        if self.qualifiers.shape != (n, market.num_schools):
            raise ConfigurationError(f"qualifiers must have shape ({n}, {market.num_schools})")
        if self.lottery_draws.shape != (n, market.num_lotteries):
            raise ConfigurationError(f"lottery draws must have shape ({n}, {market.num_lotteries})")
        for i in range(n):
            self.profile(i).validate(market, i)

    def priority_matrix(self, market: MarketSpec) -> np.ndarray:
        """``N x (M+1)`` matrix of priority scores."""
        v = np.ones((len(self), market.num_schools))
        for school in market.schools:
            if school.index is None:
                continue
            tie = self.scores[:, school.index] if school.is_test else self.lottery_draws[:, school.index]
            v[:, school.id] = (self.qualifiers[:, school.id] + tie) / (school.qualifier_max + 1)
        return v

    def types(self) -> tuple[np.ndarray, list[tuple[tuple[int, ...], tuple[int, ...]]]]:
        """Group students by ``(preferences, qualifiers)``.

        Returns the per-student type index and the list of distinct type keys.
        """
        if self._type_cache is None:
            combined = np.concatenate([self.preferences, self.qualifiers], axis=1)
            uniq, inverse = np.unique(combined, axis=0, return_inverse=True)
            k = self.preferences.shape[1]
            keys = []
            for row in uniq:
                prefs = tuple(int(s) for s in row[:k] if s >= 0)
                keys.append((prefs, tuple(int(q) for q in row[k:])))
            self._type_cache = (inverse.reshape(-1), keys)
        return self._type_cache

    def subset(self, mask: np.ndarray) -> Roster:
        return Roster(
            self.preferences[mask],
            self.scores[mask],
            self.qualifiers[mask],
            self.lottery_draws[mask],
            None if self.ids is None else [x for x, m in zip(self.ids, mask) if m],
        )


def _parse_preferences(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(">") if tok.strip())


def read_roster(
    path: str | Path,
    market: MarketSpec,
    *,
    seed: int | None = None,
    extra_columns: Iterable[str] = (),
) -> tuple[Roster, dict[str, np.ndarray]]:
    """Read a delimited student roster.

    Columns: ``id``, ``preferences`` (``>``-separated school ids),
    ``score_<t>``, ``q_<s>`` and optionally ``u_<l>``. Missing lottery columns
    are drawn from ``seed``. Columns named in ``extra_columns`` (e.g. an
    outcome ``y``) are returned as float arrays.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"roster file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    if "preferences" not in header:
        raise ConfigurationError(f"{path}: missing 'preferences' column")
    n = len(rows)
    has_draws = market.num_lotteries > 0 and all(f"u_{l}" in header for l in range(market.num_lotteries))
    if market.num_lotteries > 0 and not has_draws and seed is None:
        raise ConfigurationError(f"{path}: lottery draws absent and no seed given to generate them")
    profiles = []
    extras: dict[str, list[float]] = {c: [] for c in extra_columns}
    for line, row in enumerate(rows, start=2):
        try:
            prefs = _parse_preferences(row["preferences"])
            scores = tuple(float(row[f"score_{t}"]) for t in range(market.num_tests))
            quals = tuple(int(row.get(f"q_{s}") or 0) for s in range(market.num_schools))
            draws = (
                tuple(float(row[f"u_{l}"]) for l in range(market.num_lotteries)) if has_draws else ()
            )
            for c in extras:
                extras[c].append(float(row[c]))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{line}: {exc!r}") from exc
        profiles.append(StudentProfile(prefs, scores, quals, draws))
    if market.num_lotteries > 0 and not has_draws:
        rng = np.random.default_rng(seed)
        draws = rng.random((n, market.num_lotteries))
        profiles = [
            StudentProfile(p.preferences, p.scores, p.qualifiers, tuple(draws[i]))
            for i, p in enumerate(profiles)
        ]
    try:
        roster = Roster.from_profiles(profiles, market)
    except InvalidProfileError as exc:
        raise DataError(f"{path}:{exc.student + 2}: {exc.reason}") from exc
    roster.ids = [row.get("id") or str(i) for i, row in enumerate(rows)]
    return roster, {c: np.asarray(v, dtype=float) for c, v in extras.items()}


def write_roster(path: str | Path, roster: Roster, market: MarketSpec, **extra: np.ndarray) -> None:
    header = (
        ["id", "preferences"]
        + [f"score_{t}" for t in range(market.num_tests)]
        + [f"q_{s}" for s in range(market.num_schools)]
        + [f"u_{l}" for l in range(market.num_lotteries)]
        + list(extra)
    )
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(roster)):
            p = roster.profile(i)
            sid = roster.ids[i] if roster.ids else str(i)
            w.writerow(
                [sid, ">".join(map(str, p.preferences))]
                + [repr(x) for x in p.scores]
                + list(p.qualifiers)
                + [repr(u) for u in p.lottery_draws]
                + [repr(float(extra[c][i])) for c in extra]
            )
