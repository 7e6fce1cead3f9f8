"""Synthetic populations and the Monte Carlo experiments run against them."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial

from schoolrd.market import ConfigurationError, DegenerateError, MarketSpec, Roster
from schoolrd.matching import run_da
from schoolrd.rd import BandwidthPolicy, SelectionContext, estimate_rd_ate, oracle_estimate, type_selection

Seed = int | Sequence[int]


def rng_for(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed if isinstance(seed, int) else list(seed)))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("SCHOOLRD_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PolynomialDensity:
    """Density on [0, 1] given by monomial coefficients ``a_0 + a_1 x + ...``."""

    coefficients: tuple[float, ...]

    def __post_init__(self) -> None:
        coef = tuple(float(a) for a in self.coefficients)
        object.__setattr__(self, "coefficients", coef)
        if not coef:
            raise ConfigurationError("density needs at least one coefficient")
        poly = Polynomial(coef)
        total = poly.integ()(1.0) - poly.integ()(0.0)
        if abs(total - 1) > 1e-9:
            raise ConfigurationError(f"density integrates to {total:.12g}, not 1")
        if self._extremes()[0] <= 0:
            raise ConfigurationError("density must be positive on [0, 1]")

    def _extremes(self) -> tuple[float, float]:
        poly = Polynomial(self.coefficients)
        pts = [0.0, 1.0]
        if len(self.coefficients) > 2:
            pts += [r.real for r in poly.deriv().roots() if abs(r.imag) < 1e-12 and 0 <= r.real <= 1]
        vals = poly(np.array(pts))
        return float(vals.min()), float(vals.max())

    def pdf(self, x):
        return Polynomial(self.coefficients)(x)

    def cdf(self, x):
        x = np.clip(x, 0.0, 1.0)
        return Polynomial(self.coefficients).integ()(x)

    @property
    def upper_bound(self) -> float:
        return self._extremes()[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self.coefficients) == 1:
            return rng.random(n)
        bound = self.upper_bound
        out = np.empty(0)
        while out.size < n:
            need = n - out.size
            x = rng.random(int(need * bound) + 16)
            keep = x[rng.random(x.size) * bound < self.pdf(x)]
            out = np.concatenate([out, keep[:need]])
        return out


@dataclass(frozen=True)
class TypeSpec:
    label: str
    preferences: tuple[int, ...]
    qualifiers: tuple[int, ...]
    share: float
    densities: tuple[PolynomialDensity, ...]
    outcome_means: dict[int, tuple[float, ...]] = field(default_factory=dict)
    noise_sd: float = 1.0

    def mean(self, school: int, r: np.ndarray | float):
        coef = self.outcome_means.get(school, (0.0,))
        return Polynomial(coef)(r)


@dataclass(frozen=True)
class DgpSpec:
    """Finite mixture of student types with polynomial score densities and cubic outcome means.

    Tests are independent within a type; lotteries are independent uniforms.
    Mean outcomes depend on the score of ``outcome_test``.
    """

    market: MarketSpec
    types: tuple[TypeSpec, ...]
    noise: str = "gaussian"
    pareto_shape: float = 3.0
    outcome_test: int = 0

    def __post_init__(self) -> None:
        m = self.market
        if not self.types:
            raise ConfigurationError("a DGP needs at least one type")
        if abs(sum(t.share for t in self.types) - 1) > 1e-9:
            raise ConfigurationError("type shares must sum to 1")
        if self.noise not in ("gaussian", "pareto"):
            raise ConfigurationError(f"unknown noise law {self.noise!r}")
        if self.noise == "pareto" and self.pareto_shape <= 2:
            raise ConfigurationError("Pareto noise needs shape > 2 for a finite variance")
        if m.num_tests and not 0 <= self.outcome_test < m.num_tests:
            raise ConfigurationError("outcome_test out of range")
        for t in self.types:
            if len(t.densities) != m.num_tests:
                raise ConfigurationError(f"type {t.label}: need {m.num_tests} score densities")
            if len(t.qualifiers) != m.num_schools:
                raise ConfigurationError(f"type {t.label}: need one qualifier per school")
            if t.share < 0 or t.noise_sd < 0:
                raise ConfigurationError(f"type {t.label}: negative share or noise")
            if any(len(c) > 4 for c in t.outcome_means.values()):
                raise ConfigurationError(f"type {t.label}: mean outcomes must be at most cubic")
            if any(not 0 <= s < m.num_schools for s in t.outcome_means):
                raise ConfigurationError(f"type {t.label}: outcome mean for unknown school")

    def to_dict(self) -> dict[str, Any]:
        return {
            "market": self.market.to_dict(),
            "noise": self.noise,
            "pareto_shape": self.pareto_shape,
            "outcome_test": self.outcome_test,
            "types": [
                {
                    "label": t.label,
                    "preferences": list(t.preferences),
                    "qualifiers": list(t.qualifiers),
                    "share": t.share,
                    "densities": [list(d.coefficients) for d in t.densities],
                    "outcome_means": {str(s): list(c) for s, c in t.outcome_means.items()},
                    "noise_sd": t.noise_sd,
                }
                for t in self.types
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DgpSpec:
        try:
            market = MarketSpec.from_dict(d["market"])
            types = tuple(
                TypeSpec(
                    label=str(t["label"]),
                    preferences=tuple(int(s) for s in t["preferences"]),
                    qualifiers=tuple(int(q) for q in t.get("qualifiers", [0] * market.num_schools)),
                    share=float(t["share"]),
                    densities=tuple(PolynomialDensity(tuple(c)) for c in t["densities"]),
                    outcome_means={int(s): tuple(float(x) for x in c) for s, c in t.get("outcome_means", {}).items()},
                    noise_sd=float(t.get("noise_sd", 1.0)),
                )
                for t in d["types"]
            )
            return cls(
                market=market,
                types=types,
                noise=d.get("noise", "gaussian"),
                pareto_shape=float(d.get("pareto_shape", 3.0)),
                outcome_test=int(d.get("outcome_test", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"malformed DGP: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> DgpSpec:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"DGP file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{exc.lineno}: {exc.msg}") from exc


@dataclass
class Population:
    roster: Roster
    potential: np.ndarray
    type_ids: np.ndarray

    def observed(self, assignment: np.ndarray) -> np.ndarray:
        return self.potential[np.arange(len(self.roster)), assignment]


def _noise(dgp: DgpSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if dgp.noise == "gaussian":
        return rng.standard_normal(n)
    a = dgp.pareto_shape
    raw = rng.pareto(a, n)
    mean = 1 / (a - 1)
    var = a / ((a - 1) ** 2 * (a - 2))
    return (raw - mean) / math.sqrt(var)


def generate_population(dgp: DgpSpec, n: int, seed: Seed) -> Population:
    """``n`` i.i.d. students with every potential outcome stored; deterministic per seed."""
    if n < 0:
        raise ConfigurationError("population size must be non-negative")
    m = dgp.market
    rng = rng_for(seed)
    shares = np.array([t.share for t in dgp.types])
    type_ids = rng.choice(len(dgp.types), size=n, p=shares / shares.sum())
    width = max(len(t.preferences) for t in dgp.types)
    prefs = np.full((n, width), -1, dtype=np.int64)
    quals = np.zeros((n, m.num_schools), dtype=np.int64)
    scores = np.zeros((n, m.num_tests))
    potential = np.zeros((n, m.num_schools))
    for k, t in enumerate(dgp.types):
        rows = np.flatnonzero(type_ids == k)
        prefs[rows, : len(t.preferences)] = t.preferences
        quals[rows] = t.qualifiers
        for j, dens in enumerate(t.densities):
            scores[rows, j] = dens.sample(rows.size, rng)
    draws = rng.random((n, m.num_lotteries))
    eps = _noise(dgp, n * m.num_schools, rng).reshape(n, m.num_schools) if n else np.zeros((0, m.num_schools))
    for k, t in enumerate(dgp.types):
        rows = np.flatnonzero(type_ids == k)
        r = scores[rows, dgp.outcome_test] if m.num_tests else np.zeros(rows.size)
        for s in range(m.num_schools):
            potential[rows, s] = t.mean(s, r) + t.noise_sd * eps[rows, s]
    roster = Roster(prefs, scores, quals, draws)
    return Population(roster, potential, type_ids)


@dataclass(frozen=True)
class RdTruth:
    tau: float
    right_limit: float
    left_limit: float
    type_weights: tuple[float, ...]


def rd_truth(dgp: DgpSpec, pair: tuple[int, int], c: Sequence[float]) -> RdTruth:
    """Population RD estimand at ``rho(c)`` for the pair, from the DGP's analytic means.

    Each selected type is weighted by its share, its running-score density at
    the cutoff and the probability its other scores satisfy the selection box.
    """
    m = dgp.market
    s1, s0 = pair
    ctx = SelectionContext.build(m, pair, c, 1e-12)
    if m[s1].index != dgp.outcome_test:
        raise ConfigurationError("outcome means must depend on the pair's running score")
    rho = float(ctx.rho)
    weights = []
    for t in dgp.types:
        sel = type_selection(t.preferences, t.qualifiers, ctx)
        if not sel.eligible:
            weights.append(0.0)
            continue
        w = t.share * float(t.densities[ctx.test].pdf(rho))
        for j, dens in enumerate(t.densities):
            if j != ctx.test:
                w *= float(dens.cdf(float(sel.upper[j])) - dens.cdf(float(sel.lower[j])))
        weights.append(w)
    total = sum(weights)
    if total <= 0:
        raise DegenerateError("no type is selected at the cutoff")
    right = sum(w * float(t.mean(s1, rho)) for w, t in zip(weights, dgp.types)) / total
    left = sum(w * float(t.mean(s0, rho)) for w, t in zip(weights, dgp.types)) / total
    return RdTruth(right - left, right, left, tuple(w / total for w in weights))


# -- experiments ---------------------------------------------------------------


@dataclass
class ExperimentReport:
    name: str
    grid: dict[str, Any]
    metrics: dict[str, Any]
    passed: bool | None
    tolerances: dict[str, Any]
    seed: int
    replications: list[dict[str, Any]] = field(default_factory=list)
    runtime: float = 0.0

    def to_dict(self, *, include_runtime: bool = False) -> dict[str, Any]:
        out = {
            "experiment": self.name,
            "grid": self.grid,
            "metrics": self.metrics,
            "tolerances": self.tolerances,
            "passed": self.passed,
            "seed": self.seed,
        }
        if include_runtime:
            out["runtime_seconds"] = self.runtime
        return out


def _parallel(fn: Callable[[int], Any], count: int, threads: int | None) -> list[Any]:
    threads = threads or default_threads()
    if threads <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


def loglog_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    return float(np.polyfit(np.log(ns), np.log(values), 1)[0])


def experiment_cutoff_convergence(
    dgp: DgpSpec,
    n_grid: Sequence[int],
    reps: int,
    c: Sequence[float],
    *,
    seed: int = 0,
    slope_band: tuple[float, float] = (-0.6, -0.4),
    threads: int | None = None,
) -> ExperimentReport:
    """Median over replications of ``max_s |C_N,s - c_s|``, and its log-log slope in ``N``."""
    start = time.perf_counter()
    c_arr = np.asarray([float(x) for x in c])
    rows, medians = [], []
    for j, n in enumerate(n_grid):

        def one(rep: int, n=n, j=j) -> float:
            pop = generate_population(dgp, n, (seed, j, rep))
            return float(np.abs(run_da(dgp.market, pop.roster).cutoffs - c_arr).max())

        devs = _parallel(one, reps, threads)
        rows += [{"n": n, "rep": r, "max_deviation": d} for r, d in enumerate(devs)]
        medians.append(float(np.median(devs)))
    degenerate = any(md == 0 for md in medians)
    # a slope needs two sizes and nonzero deviations
    slope = None if degenerate or len(n_grid) < 2 else loglog_slope(n_grid, medians)
    passed = None if slope is None else slope_band[0] <= slope <= slope_band[1]
    return ExperimentReport(
        "cutoffs",
        {"n": list(n_grid), "reps": reps},
        {"median_max_deviation": medians, "slope": slope, "degenerate": degenerate},
        passed,
        {"slope": list(slope_band)},
        seed,
        rows,
        time.perf_counter() - start,
    )


def _feasible_and_oracle(dgp, pair, n, h, c, seed, policy, *, want_oracle: bool):
    pop = generate_population(dgp, n, seed)
    res = run_da(dgp.market, pop.roster)
    y = pop.observed(res.assignment)
    feas = estimate_rd_ate(pop.roster, y, pair, res.cutoffs, h, dgp.market, policy=policy)
    orac = oracle_estimate(pop.roster, pop.potential, pair, c, h, dgp.market, policy=policy) if want_oracle else None
    return feas, orac


def experiment_coverage(
    dgp: DgpSpec,
    pair: tuple[int, int],
    n: int,
    policy: BandwidthPolicy,
    reps: int,
    c: Sequence[float],
    *,
    seed: int = 0,
    coverage_band: tuple[float, float] = (0.90, 0.98),
    bias_ratio: float = 0.5,
    threads: int | None = None,
) -> ExperimentReport:
    """Empirical coverage of the 95% interval for the known RD estimand."""
    start = time.perf_counter()
    truth = rd_truth(dgp, pair, c).tau
    h = policy.bandwidth(n)

    def one(rep: int):
        feas, _ = _feasible_and_oracle(dgp, pair, n, h, c, (seed, rep), policy, want_oracle=False)
        lo, hi = feas.ci_95
        return {"rep": rep, "tau_hat": feas.tau_hat, "se": feas.se, "covered": bool(lo <= truth <= hi)}

    rows = _parallel(one, reps, threads)
    coverage = float(np.mean([r["covered"] for r in rows]))
    bias = float(np.mean([r["tau_hat"] for r in rows]) - truth)
    mean_se = float(np.mean([r["se"] for r in rows]))
    passed = coverage_band[0] <= coverage <= coverage_band[1] and abs(bias) < bias_ratio * mean_se
    return ExperimentReport(
        "coverage",
        {"n": n, "h": h, "policy": {"kappa": policy.kappa, "exponent": policy.exponent, "fixed": policy.fixed}, "reps": reps},
        {"truth": truth, "coverage": coverage, "bias": bias, "mean_se": mean_se, "rate_flags": list(policy.flags())},
        passed,
        {"coverage": list(coverage_band), "bias_over_se": bias_ratio},
        seed,
        rows,
        time.perf_counter() - start,
    )


def experiment_oracle_gap(
    dgp: DgpSpec,
    pair: tuple[int, int],
    n_grid: Sequence[int],
    policy: BandwidthPolicy,
    reps: int,
    c: Sequence[float],
    *,
    seed: int = 0,
    threads: int | None = None,
) -> ExperimentReport:
    """Quantiles of ``sqrt(N h) |feasible - oracle|`` per ``N``; the median should not grow."""
    start = time.perf_counter()
    rows, quantiles = [], []
    for j, n in enumerate(n_grid):
        h = policy.bandwidth(n)

        def one(rep: int, n=n, h=h, j=j):
            feas, orac = _feasible_and_oracle(dgp, pair, n, h, c, (seed, j, rep), policy, want_oracle=True)
            return math.sqrt(n * h) * abs(feas.tau_hat - orac.tau_hat)

        gaps = _parallel(one, reps, threads)
        rows += [{"n": n, "rep": r, "scaled_gap": g} for r, g in enumerate(gaps)]
        quantiles.append({q: float(np.quantile(gaps, q)) for q in (0.25, 0.5, 0.75, 0.9)})
    medians = [qs[0.5] for qs in quantiles]
    passed = all(b <= a for a, b in zip(medians, medians[1:]))
    return ExperimentReport(
        "oracle-gap",
        {"n": list(n_grid), "policy": {"kappa": policy.kappa, "exponent": policy.exponent}, "reps": reps},
        {"median_scaled_gap": medians, "quantiles": [{str(k): v for k, v in qs.items()} for qs in quantiles]},
        passed,
        {"median": "non-increasing in N"},
        seed,
        rows,
        time.perf_counter() - start,
    )
