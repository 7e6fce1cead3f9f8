"""Identification and estimation of school effects under deferred-acceptance assignment.

The package covers four layers:

* ``market`` / ``matching``: priority scores, student-proposing deferred
  acceptance, cutoffs and the large-market cutoff solver.
* ``eligibility``: exact eligibility regions and the classification of every
  pairwise school contrast as lottery-driven, RD-driven or unidentified.
* ``propensity`` / ``diagnostic``: local propensity scores, the
  propensity-regression estimand and the RD-weight bounds for linear
  estimators.
* ``rd`` / ``sim``: the local-linear estimator for RD-driven contrasts and the
  Monte Carlo harness that checks it.
"""

from schoolrd.market import (
    ConfigurationError,
    MarketSpec,
    Roster,
    SchoolSpec,
    StudentProfile,
    priority_score,
)
from schoolrd.validate import validate_market
from schoolrd.matching import (
    ContinuumCutoffs,
    MatchResult,
    assign_at_cutoffs,
    check_stability,
    extract_cutoffs,
    run_da,
    solve_continuum_cutoffs,
)
from schoolrd.eligibility import (
    ContrastReport,
    Interval,
    Region,
    Variation,
    eligibility_set,
    enumerate_identified_ates,
    identified_contrast_region,
)
from schoolrd.rd import EstimateReport, estimate_rd_ate, oracle_estimate

__all__ = [
    "ConfigurationError",
    "ContinuumCutoffs",
    "ContrastReport",
    "EstimateReport",
    "Interval",
    "MarketSpec",
    "MatchResult",
    "Region",
    "Roster",
    "SchoolSpec",
    "StudentProfile",
    "Variation",
    "assign_at_cutoffs",
    "check_stability",
    "eligibility_set",
    "enumerate_identified_ates",
    "estimate_rd_ate",
    "extract_cutoffs",
    "identified_contrast_region",
    "oracle_estimate",
    "priority_score",
    "run_da",
    "solve_continuum_cutoffs",
    "validate_market",
]

__version__ = "0.1.0"
