"""Command-line front end: ``simulate``, ``estimate`` and ``balance``.

Exit codes: 0 success, 1 usage or data error, 2 when some estimator failed
(or was flagged in a simulation) while the others completed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time

import numpy as np

from . import __version__
from .data import BasisSpec, ingest_csv, write_csv
from .errors import EstimationError, SchemaError
from .glm import fit_ps
from .inference import bootstrap, iv_sandwich_se
from .simulation import (
    DEFAULT_ESTIMATORS,
    SCENARIOS,
    default_threads,
    generate,
    run_table,
    scenario_config,
    tables_to_csv,
    tables_to_json,
)
from .tsiv import ALL_METHODS, IvProblem, estimate_iv, fit_iv_models, instrument_strength

log = logging.getLogger("datacomb")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _list(value: str):
    return [v for v in value.replace(",", " ").split() if v]


def _estimators(values):
    names = []
    for v in values:
        names += _list(v)
    names = [n.lower() for n in names]
    bad = [n for n in names if n not in ALL_METHODS]
    if bad:
        raise UsageError("unknown estimator(s): %s (choose from %s)" % (", ".join(bad), ", ".join(ALL_METHODS)))
    return tuple(dict.fromkeys(names))


def _clean(obj):
    """Replace non-finite floats by None and arrays by lists."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dump(report, path):
    text = json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="datacomb", description="Data-combination estimators for two-sample moment problems.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="Monte Carlo bias/sd tables for the two-sample IV design")
    s.add_argument("--scenario", default="table1", help="one of: %s" % ", ".join(SCENARIOS))
    s.add_argument("--reps", type=int, default=200)
    s.add_argument("--n1", type=int)
    s.add_argument("--n0", type=int)
    s.add_argument("--iv-coef", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--estimators", nargs="+", default=[",".join(DEFAULT_ESTIMATORS)])
    s.add_argument("--out", required=True, help="JSON path; the CSV table goes next to it")
    s.add_argument("--include-h2", action="store_true")
    s.add_argument("--clip-weights", action="store_true")
    s.add_argument("--threads", type=int)
    s.add_argument("--export-sample", metavar="CSV", help="also write replicate 0 as a merged CSV")
    s.add_argument("--timing", action="store_true", help="record wall-clock seconds in the report")

    e = sub.add_parser("estimate", help="run estimators on a merged CSV")
    e.add_argument("--data", required=True)
    e.add_argument("--t-col", default="t")
    e.add_argument("--y-col", required=True)
    e.add_argument("--x-col", required=True)
    e.add_argument("--instrument", required=True)
    e.add_argument("--exog", nargs="*", default=[])
    e.add_argument("--ps-terms", nargs="+")
    e.add_argument("--or-terms", nargs="+")
    e.add_argument("--estimator", nargs="+", default=[",".join(DEFAULT_ESTIMATORS)])
    e.add_argument("--bootstrap", type=int, default=0, metavar="B")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--include-h2", action="store_true")
    e.add_argument("--clip-weights", action="store_true")
    e.add_argument("--threads", type=int)
    e.add_argument("--out", help="JSON report path (default stdout)")
    e.add_argument("--timing", action="store_true")

    b = sub.add_parser("balance", help="covariate balance of IPW-weighted auxiliary means")
    b.add_argument("--data", required=True)
    b.add_argument("--t-col", default="t")
    b.add_argument("--ps-terms", nargs="+", required=True)
    b.add_argument("--exclude", nargs="*", default=[], help="columns that are not common variables")
    b.add_argument("--out", help="JSON path (default stdout); a CSV goes next to it")
    return p


def _csv_path(json_path):
    return (json_path[:-5] if json_path.endswith(".json") else json_path) + ".csv"


def cmd_simulate(args) -> int:
    if args.scenario not in SCENARIOS:
        raise UsageError("invalid scenario %r (choose from %s)" % (args.scenario, ", ".join(SCENARIOS)))
    if args.reps < 2:
        raise UsageError("--reps must be at least 2")
    estimators = _estimators(args.estimators)
    try:
        config = scenario_config(args.scenario, args.seed, n1=args.n1, n0=args.n0, iv_coef=args.iv_coef)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.export_sample:
        write_csv(generate(config, 0), args.export_sample)
    t0 = time.perf_counter()
    tables = run_table(
        config, estimators, args.reps, threads=args.threads,
        include_h2=args.include_h2, clip_weights=args.clip_weights,
    )
    report = {
        "command": "simulate",
        "version": __version__,
        "seed": args.seed,
        "options": {"include_h2": args.include_h2, "clip_weights": args.clip_weights, "estimators": list(estimators)},
    }
    report.update(tables_to_json(tables, config, args.scenario))
    if args.timing:
        report["timing_seconds"] = time.perf_counter() - t0
    _dump(report, args.out)
    with open(_csv_path(args.out), "w", encoding="utf-8", newline="") as fh:
        fh.write(tables_to_csv(tables))
    flagged = any(s.flagged for t in tables.values() for s in t.summaries.values())
    return EXIT_PARTIAL if flagged else EXIT_OK


def _default_terms(problem):
    return ["1", problem.instrument, *problem.exog]


def cmd_estimate(args) -> int:
    estimators = _estimators(args.estimator)
    if args.bootstrap < 0 or args.bootstrap == 1:
        raise UsageError("--bootstrap must be 0 or at least 2")
    exog = [c for v in args.exog for c in _list(v)]
    sample = ingest_csv(args.data, args.t_col, None, [args.x_col], [args.y_col])
    problem = IvProblem(sample, args.instrument, tuple(exog), args.y_col, args.x_col)
    ps_terms = args.ps_terms or _default_terms(problem)
    or_terms = args.or_terms or _default_terms(problem)
    ps_spec, or_spec = BasisSpec.parse(ps_terms), BasisSpec.parse(or_terms)
    threads = default_threads() if args.threads is None else args.threads

    t0 = time.perf_counter()
    fits = fit_iv_models(problem, ps_spec, or_spec, estimators, args.include_h2, args.clip_weights)
    results = estimate_iv(problem, estimators, fits=fits, clip_weights=args.clip_weights)
    coef_names = ["x:" + args.x_col] + list(exog)
    out = {}
    for name, res in results.items():
        entry = {"converged": res.ok, "error": res.error, "diagnostics": res.diagnostics}
        if res.ok:
            entry["estimate"] = res.beta
            if res.mu is not None:
                entry["mu3"] = res.mu.mu3
            try:
                entry["sandwich_se"] = iv_sandwich_se(problem, res, fits)
            except (EstimationError, ValueError) as exc:
                entry["sandwich_se"] = None
                entry["sandwich_error"] = str(exc)
            if args.bootstrap:
                entry["bootstrap"] = _bootstrap_one(sample, args, name, ps_spec, or_spec, threads)
        out[name] = entry

    report = {
        "command": "estimate",
        "version": __version__,
        "seed": args.seed,
        "config": {
            "data": args.data,
            "t_col": args.t_col,
            "y_col": args.y_col,
            "x_col": args.x_col,
            "instrument": args.instrument,
            "exog": exog,
            "ps_terms": list(ps_spec.labels),
            "or_terms": list(or_spec.labels),
            "estimators": list(estimators),
            "bootstrap": args.bootstrap,
            "include_h2": args.include_h2,
            "clip_weights": args.clip_weights,
        },
        "n1": sample.n1,
        "n0": sample.n0,
        "coefficients": coef_names,
        "instrument_strength": instrument_strength(problem),
        "estimators": out,
        "notes": ["sandwich SEs come from stacked estimating equations including the working-model fits"],
    }
    if args.timing:
        report["timing_seconds"] = time.perf_counter() - t0
    _dump(report, args.out)
    return EXIT_PARTIAL if any(not r.ok for r in results.values()) else EXIT_OK


def _bootstrap_one(sample, args, name, ps_spec, or_spec, threads):
    def estimator(smp):
        prob = IvProblem(smp, args.instrument, tuple(c for v in args.exog for c in _list(v)), args.y_col, args.x_col)
        r = estimate_iv(prob, (name,), ps_spec, or_spec, args.include_h2, args.clip_weights)[name]
        if not r.ok:
            raise EstimationError(r.error or "failed")
        return r.beta

    try:
        return bootstrap(sample, estimator, args.bootstrap, args.seed, threads).to_dict()
    except EstimationError as exc:
        return {"error": str(exc)}


def balance_table(sample, ps_spec, columns=None):
    """Primary mean, raw auxiliary mean and IPW-weighted auxiliary mean per
    common variable, each with a standard error."""
    ps = fit_ps(sample, ps_spec)
    prim, aux = sample.primary, sample.auxiliary
    w = ps.pi_hat[aux] / (1.0 - ps.pi_hat[aux])
    w = w / w.sum()
    rows = []
    for name in columns or sample.u_names:
        x = sample.ucol(name)
        xp, xa = x[prim], x[aux]
        wm = float(w @ xa)
        rows.append({
            "variable": name,
            "primary_mean": float(xp.mean()),
            "primary_se": float(xp.std(ddof=1) / math.sqrt(len(xp))),
            "auxiliary_mean": float(xa.mean()),
            "auxiliary_se": float(xa.std(ddof=1) / math.sqrt(len(xa))),
            "weighted_mean": wm,
            "weighted_se": float(math.sqrt(np.sum(w**2 * (xa - wm) ** 2))),
        })
    return rows


def cmd_balance(args) -> int:
    with open(args.data, newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    skip = {args.t_col, *args.exclude}
    columns = [h for h in header if h not in skip]
    sample = ingest_csv(args.data, args.t_col, columns, [], [])
    rows = balance_table(sample, BasisSpec.parse(args.ps_terms), columns)
    report = {"command": "balance", "version": __version__, "ps_terms": args.ps_terms, "rows": rows}
    _dump(report, args.out)
    if args.out not in (None, "-"):
        keys = list(rows[0])
        with open(_csv_path(args.out), "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(keys) + "\n")
            for r in rows:
                fh.write(",".join(r["variable"] if k == "variable" else repr(r[k]) for k in keys) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print("datacomb: error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"simulate": cmd_simulate, "estimate": cmd_estimate, "balance": cmd_balance}[args.command]
    try:
        return handler(args)
    except UsageError as exc:
        print("datacomb: error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, EstimationError, OSError, ValueError) as exc:
        print("datacomb: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
