"""Command-line entry point: ``schoolrd <subcommand> ...``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error, 3 data
error, 4 degenerate estimation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from schoolrd import worked_example
from schoolrd.diagnostic import linear_estimator_weights, rd_flags_roster, rd_weight_bounds, regression_coefficient
from schoolrd.eligibility import Variation, eligibility_set, enumerate_identified_ates, fmt_number
from schoolrd.market import ConfigurationError, DataError, DegenerateError, InvalidProfileError, MarketSpec, read_roster
from schoolrd.matching import as_cutoffs, run_da, solve_continuum_cutoffs
from schoolrd.propensity import (
    BandPartition,
    cell_scores,
    propensity_table,
    student_propensities,
    weight_decomposition,
)
from schoolrd.rd import BandwidthPolicy, ImpossibleEventError, band_rows, estimate_rd_ate
from schoolrd.validate import validate_market

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE = 0, 1, 2, 3, 4

log = logging.getLogger("schoolrd")


# -- output helpers ------------------------------------------------------------


def fmt_float(x: float) -> str:
    return f"{x:.12g}"


def _clean(obj: Any) -> Any:
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isinf(x) or math.isnan(x):
            return str(x)
        return float(fmt_float(x))
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    return str(obj)


def dump_json(obj: Any) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


class Outputs:
    """Collects artifacts and writes them only once the command has succeeded."""

    def __init__(self, directory: str | None):
        self.directory = Path(directory) if directory else None
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def flush(self) -> None:
        if self.directory is None:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            (self.directory / name).write_text(text, encoding="utf-8")


# -- argument parsing helpers ----------------------------------------------------


def parse_number(text: str) -> Fraction | float:
    text = text.strip()
    try:
        return Fraction(text) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"cannot parse number {text!r}") from exc


def parse_cutoffs(text: str, market: MarketSpec) -> list:
    values = [parse_number(t) for t in text.split(",")]
    if any(isinstance(v, Fraction) for v in values):
        values = [Fraction(v) if not isinstance(v, Fraction) else v for v in values]
    return as_cutoffs(values, market)


def parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse school list {text!r}") from exc


def parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse number list {text!r}") from exc


def load_json(path: str, what: str) -> Any:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: {exc.msg}") from exc


def load_census(path: str, market: MarketSpec) -> tuple[list[str], list[tuple[tuple[int, ...], tuple[int, ...]]]]:
    data = load_json(path, "census")
    labels, census = [], []
    for k, entry in enumerate(data):
        try:
            prefs = tuple(int(s) for s in entry["preferences"])
            quals = tuple(int(q) for q in entry.get("qualifiers", [0] * market.num_schools))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"{path}: entry {k}: {exc!r}") from exc
        labels.append(str(entry.get("label", k)))
        census.append((prefs, quals))
    return labels, census


def need_seed(args) -> int:
    if args.seed is None:
        raise ConfigurationError("--seed is required for this command")
    return args.seed


def threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    try:
        return max(1, int(os.environ.get("SCHOOLRD_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("SCHOOLRD_THREADS must be an integer")


# -- eligibility tables ----------------------------------------------------------


def _region_text(region) -> str:
    return "empty" if region.empty else str(region)


def eligibility_tables(market: MarketSpec, c, labels, census) -> tuple[str, str, str]:
    schools = list(range(market.num_schools))
    e_rows = []
    for label, (prefs, quals) in zip(labels, census):
        e_rows.append([label] + [_region_text(eligibility_set(s, prefs, quals, c, market)) for s in schools])
    e_text = csv_text(["type"] + [f"E_{s}" for s in schools], e_rows)

    reports, summary = enumerate_identified_ates(market, c, census)
    by_key = {(r.type_key, frozenset(r.pair)): r for r in reports}
    pairs = [(a, b) for a in schools for b in schools if a < b]
    x_rows = []
    for label, (prefs, quals) in zip(labels, census):
        row = [label]
        for a, b in pairs:
            rep = by_key.get(((tuple(prefs), tuple(quals)), frozenset((a, b))))
            row.append("unranked" if rep is None else _region_text(rep.region))
        x_rows.append(row)
    x_text = csv_text(["type"] + [f"({a},{b})" for a, b in pairs], x_rows)

    long_rows = []
    label_of = {(tuple(p), tuple(q)): l for l, (p, q) in zip(labels, census)}
    for r in reports:
        cut = "" if r.rd_cutoff is None else f"{r.rd_cutoff[0]}:{fmt_number(r.rd_cutoff[1])}"
        long_rows.append(
            [label_of[r.type_key], r.pair[0], r.pair[1], _region_text(r.region), fmt_number(r.region.measure), r.variation.value, cut]
        )
    long_text = csv_text(["type", "preferred", "other", "region", "measure", "variation", "rd_cutoff"], long_rows)
    summary_text = dump_json(
        {
            "lottery_driven": summary.lottery,
            "rd_driven": summary.rd,
            "unidentified": summary.unidentified,
            "lottery_measure": fmt_number(summary.lottery_measure),
            "rd_measure": fmt_number(summary.rd_measure),
        }
    )
    return e_text, x_text, long_text + "\n" + summary_text


def cmd_eligibility(args, out: Outputs) -> str:
    if args.worked_example:
        market = worked_example.market()
        c = list(worked_example.CUTOFFS)
        labels, census = list(worked_example.TYPE_LABELS), worked_example.census()
    else:
        if not (args.market and args.cutoffs and args.census):
            raise ConfigurationError("eligibility needs --market, --cutoffs and --census (or --worked-example)")
        market = MarketSpec.load(args.market)
        c = parse_cutoffs(args.cutoffs, market)
        labels, census = load_census(args.census, market)
    e_text, x_text, long_text = eligibility_tables(market, c, labels, census)
    out.add("eligibility.csv", e_text)
    out.add("contrasts.csv", x_text)
    out.add("contrasts_long.txt", long_text)
    return e_text + "\n" + x_text


# -- propensity ---------------------------------------------------------------


def _propensity_inputs(args):
    if args.worked_example:
        dgp = worked_example.dgp()
        return dgp, list(worked_example.CUTOFFS), set(worked_example.TREATED)
    if not (args.dgp and args.cutoffs and args.treated):
        raise ConfigurationError("propensity needs --dgp, --cutoffs and --treated (or --worked-example)")
    from schoolrd.sim import DgpSpec

    dgp = DgpSpec.load(args.dgp)
    return dgp, parse_cutoffs(args.cutoffs, dgp.market), set(parse_ints(args.treated))


def cmd_propensity(args, out: Outputs) -> str:
    dgp, c, treated = _propensity_inputs(args)
    market = dgp.market
    labels = [t.label for t in dgp.types]
    census = [(t.preferences, t.qualifiers) for t in dgp.types]
    grid = parse_floats(args.h_grid) if args.h_grid else [args.h]
    text = []
    curve = []
    for k, h in enumerate(grid):
        part = BandPartition.from_cutoffs(market, c, 0, h, census)
        table = propensity_table(market, c, census, part, treated)
        cells = cell_scores(table, part, labels, [t.share for t in dgp.types], [t.densities[0].cdf for t in dgp.types])
        dec = weight_decomposition(cells)
        curve.append({"h": h, "band_weight_share": dec.band_share})
        rows = [[label] + [float(x) for x in table[i]] for i, label in enumerate(labels)]
        ptext = csv_text(["type"] + [cell.label for cell in part.cells], rows)
        wrows = [[c_.cell[0], c_.cell[1], c_.psi, c_.mass, float(w), int(c_.band)] for c_, w in zip(dec.cells, dec.weights)]
        wtext = csv_text(["type", "cell", "psi", "mass", "weight", "band"], wrows)
        suffix = "" if len(grid) == 1 else f"_h{k}"
        out.add(f"propensity{suffix}.csv", ptext)
        out.add(f"weights{suffix}.csv", wtext)
        if k == 0:
            text.append(ptext)
    out.add("band_weight_curve.json", dump_json(curve))
    text.append(dump_json(curve))
    return "\n".join(text)


# -- matching -----------------------------------------------------------------


def _load_roster(args, market, extra=()):
    if not args.roster:
        raise ConfigurationError("--roster is required")
    return read_roster(args.roster, market, seed=args.seed, extra_columns=extra)


def cmd_match(args, out: Outputs) -> str:
    market = MarketSpec.load(args.market)
    roster, _ = _load_roster(args, market)
    res = run_da(market, roster)
    ids = roster.ids or [str(i) for i in range(len(roster))]
    out.add("assignment.csv", csv_text(["id", "school"], [[i, int(s)] for i, s in zip(ids, res.assignment)]))
    report = {"cutoffs": res.cutoffs.tolist(), "rounds": res.rounds, "counts": res.counts().tolist()}
    text = dump_json(report)
    out.add("cutoffs.json", text)
    return text


def _load_dgp(name: str):
    from schoolrd.sim import DgpSpec

    if name == "worked-example":
        return worked_example.dgp(), [float(x) for x in worked_example.CUTOFFS]
    if name == "coverage":
        return worked_example.coverage_dgp(), list(worked_example.COVERAGE_CUTOFFS)
    if name == "coverage-null":
        return worked_example.coverage_dgp(null=True), list(worked_example.COVERAGE_CUTOFFS)
    data = load_json(name, "DGP")
    dgp = DgpSpec.from_dict(data)
    cut = data.get("cutoffs")
    return dgp, None if cut is None else [float(parse_number(str(x))) for x in cut]


def cmd_cutoffs(args, out: Outputs) -> str:
    if args.continuum:
        if not args.dgp:
            raise ConfigurationError("--continuum needs --dgp")
        seed = need_seed(args)
        dgp, _ = _load_dgp(args.dgp)
        res = solve_continuum_cutoffs(dgp.market, dgp, args.reference_n, args.tolerance, seed)
        report = {
            "cutoffs": res.values.tolist(),
            "converged": res.converged,
            "cross_seed_range": res.disagreement,
            "repetitions": res.repetitions,
        }
    else:
        market = MarketSpec.load(args.market) if args.market else None
        if market is None:
            raise ConfigurationError("cutoffs needs --market and --roster, or --continuum --dgp")
        roster, _ = _load_roster(args, market)
        report = {"cutoffs": run_da(market, roster).cutoffs.tolist()}
    text = dump_json(report)
    out.add("cutoffs.json", text)
    return text


# -- RD estimation and diagnostics --------------------------------------------------


def _cutoffs_for(args, market, roster):
    if args.cutoffs:
        return parse_cutoffs(args.cutoffs, market)
    return run_da(market, roster).cutoffs.tolist()


def cmd_estimate(args, out: Outputs) -> str:
    market = MarketSpec.load(args.market)
    roster, extra = _load_roster(args, market, extra=(args.outcome,))
    pair = tuple(parse_ints(args.pair))
    if len(pair) != 2:
        raise ConfigurationError("--pair takes two school ids, e.g. 1,0")
    policy = BandwidthPolicy.parse(args.h)
    h = policy.bandwidth(len(roster))
    c = _cutoffs_for(args, market, roster)
    y = extra[args.outcome]
    report = estimate_rd_ate(roster, y, pair, c, h, market, policy=policy)
    text = dump_json(report.to_dict())
    out.add("estimate.json", text)
    rows = band_rows(roster, y, pair, c, h, market)
    ids = roster.ids or [str(i) for i in range(len(roster))]
    out.add("band.csv", csv_text(["id", "score", "proxy_outcome", "selected", "side"], [[ids[i], s, p, j, side] for i, s, p, j, side in rows]))
    return text


def cmd_diagnose(args, out: Outputs) -> str:
    market = MarketSpec.load(args.market)
    roster, extra = _load_roster(args, market, extra=(args.outcome,))
    treated = set(parse_ints(args.treated))
    c = _cutoffs_for(args, market, roster)
    assign = run_da(market, roster).assignment if not args.assignment_column else None
    if assign is None:
        _, more = read_roster(args.roster, market, seed=args.seed, extra_columns=(args.assignment_column,))
        assign = more[args.assignment_column].astype(int)
    d = np.isin(assign, list(treated)).astype(float)
    if args.spec == "propensity":
        psi = student_propensities(roster, market, c, args.h, treated)
        design = (d - psi)[:, None]
    else:
        design = np.column_stack([np.ones(len(roster)), d, roster.scores])
    target = 0 if args.spec == "propensity" else 1
    w = linear_estimator_weights(design, target)
    possibly, definitely = rd_flags_roster(roster, treated, c, args.h, market)
    bounds = rd_weight_bounds(w, d, possibly, definitely, design=design, target=target)
    y = extra[args.outcome]
    report = bounds.to_dict() | {"tau_hat": float(w @ y), "spec": args.spec, "h": args.h}
    text = dump_json(report)
    out.add("weight_bounds.json", text)
    ids = roster.ids or [str(i) for i in range(len(roster))]
    out.add(
        "flags.csv",
        csv_text(
            ["id", "treated", "weight", "possibly", "definitely", "wrong_sign"],
            [[ids[i], int(d[i]), float(w[i]), int(possibly[i]), int(definitely[i]), int(bounds.wrong_sign[i])] for i in range(len(roster))],
        ),
    )
    return text


# -- simulation -----------------------------------------------------------------


def cmd_simulate(args, out: Outputs) -> str:
    from schoolrd import sim

    seed = need_seed(args)
    dgp, cut = _load_dgp(args.dgp)
    grid = load_json(args.grid, "grid") if args.grid else {}
    if "cutoffs" in grid:
        cut = [float(parse_number(str(x))) for x in grid["cutoffs"]]
    if cut is None:
        res = solve_continuum_cutoffs(dgp.market, dgp, seed=seed)
        cut = res.values.tolist()
    reps = args.reps
    n_threads = threads(args)
    policy = BandwidthPolicy.parse(grid.get("h", "N^-0.3"))
    pair = tuple(grid.get("pair", worked_example.COVERAGE_PAIR))
    if args.experiment == "cutoffs":
        rep = sim.experiment_cutoff_convergence(dgp, grid.get("n", [1000, 10000, 100000]), reps, cut, seed=seed, threads=n_threads)
    elif args.experiment == "coverage":
        rep = sim.experiment_coverage(dgp, pair, int(grid.get("n", 20000)), policy, reps, cut, seed=seed, threads=n_threads)
    else:
        rep = sim.experiment_oracle_gap(dgp, pair, grid.get("n", [4000, 16000, 64000]), policy, reps, cut, seed=seed, threads=n_threads)
    text = dump_json(rep.to_dict())
    out.add("report.json", text)
    if rep.replications:
        header = list(rep.replications[0])
        out.add("replications.csv", csv_text(header, [[r[k] for k in header] for r in rep.replications]))
    return text


def cmd_validate(args, out: Outputs) -> str:
    dgp = None
    cut = None
    if args.dgp:
        dgp, cut = _load_dgp(args.dgp)
        market = dgp.market
    elif args.market:
        market = MarketSpec.load(args.market)
    else:
        raise ConfigurationError("validate needs --market or --dgp")
    if args.cutoffs:
        cut = parse_cutoffs(args.cutoffs, market)
    report = validate_market(market, dgp, cut)
    text = dump_json(report.to_dict())
    out.add("validation.json", text)
    return text


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="schoolrd", description="School-choice RD and lottery identification toolkit")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $SCHOOLRD_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, market=True, roster=False):
        sp.add_argument("--out", default=None, help="directory for output artifacts")
        sp.add_argument("--seed", type=int, default=None)
        if market:
            sp.add_argument("--market", default=None)
        if roster:
            sp.add_argument("--roster", default=None)

    sp = sub.add_parser("match", help="run deferred acceptance on a roster")
    common(sp, roster=True)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("cutoffs", help="realized or large-market cutoffs")
    common(sp, roster=True)
    sp.add_argument("--continuum", action="store_true")
    sp.add_argument("--dgp", default=None)
    sp.add_argument("--reference-n", type=int, default=200_000)
    sp.add_argument("--tolerance", type=float, default=0.01)
    sp.set_defaults(func=cmd_cutoffs)

    sp = sub.add_parser("eligibility", help="eligibility regions and identified contrasts")
    common(sp)
    sp.add_argument("--example-paper", "--worked-example", dest="worked_example", action="store_true")
    sp.add_argument("--cutoffs", default=None)
    sp.add_argument("--census", default=None)
    sp.set_defaults(func=cmd_eligibility)

    sp = sub.add_parser("propensity", help="local propensity table and regression weights")
    common(sp, market=False)
    sp.add_argument("--example-paper", "--worked-example", dest="worked_example", action="store_true")
    sp.add_argument("--dgp", default=None)
    sp.add_argument("--cutoffs", default=None)
    sp.add_argument("--treated", default=None)
    sp.add_argument("--h", type=float, default=0.05)
    sp.add_argument("--h-grid", default=None, help="comma-separated bandwidths")
    sp.set_defaults(func=cmd_propensity)

    sp = sub.add_parser("diagnose", help="RD-weight bounds for a linear estimator")
    common(sp, roster=True)
    sp.add_argument("--treated", required=True)
    sp.add_argument("--h", type=float, required=True)
    sp.add_argument("--cutoffs", default=None)
    sp.add_argument("--outcome", default="y")
    sp.add_argument("--assignment-column", default=None)
    sp.add_argument("--spec", choices=("propensity", "ols"), default="propensity")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("estimate-rd", help="local-linear estimate for an RD-driven pair")
    common(sp, roster=True)
    sp.add_argument("--pair", required=True)
    sp.add_argument("--h", default="N^-0.3")
    sp.add_argument("--cutoffs", default=None)
    sp.add_argument("--outcome", default="y")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="Monte Carlo experiments")
    common(sp, market=False)
    sp.add_argument("--experiment", choices=("cutoffs", "coverage", "oracle-gap"), required=True)
    sp.add_argument("--dgp", default="worked-example", help="DGP file or builtin name")
    sp.add_argument("--grid", default=None)
    sp.add_argument("--reps", type=int, default=200)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("validate", help="check a market/DGP against regularity conditions")
    common(sp)
    sp.add_argument("--dgp", default=None)
    sp.add_argument("--cutoffs", default=None)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv: Sequence[str] | None = None, *, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Outputs(args.out)
    try:
        text = args.func(args, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidProfileError, ImpossibleEventError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DegenerateError as exc:
        print(f"degenerate estimation: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"error: {exc!r}", file=sys.stderr)
        return EXIT_FAILURE
    out.flush()
    stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
