"""Simulated two-sample IV data and the Monte Carlo driver for bias/sd tables.

Primary rows: Z0, Z1, Z2 ~ N(1, 1); (eps, e) bivariate normal with unit
variances and correlation 0.8; X = c Z0 + 0.6 Z1 - 0.5 Z2 + e and
Y = 0.5 X - 0.4 Z1 + 0.5 Z2 + eps, with X dropped.  Auxiliary rows:
Z0, Z1, Z2, e ~ N(0, 1) and X from the same equation, with Y absent.  The
true propensity score is expit(-1.5 + log(n1/n0) + Z0 + Z1 + Z2).
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import BasisSpec, MergedSample
from .tsiv import IvProblem, estimate_iv

log = logging.getLogger(__name__)

BETA_TRUE = 0.5
U_NAMES = ("z0", "z1", "z2", "w0", "w1", "w2")
CORRECT_TERMS = ("1", "z0", "z1", "z2")
MISSPECIFIED_TERMS = ("1", "w0", "w1", "w2")
DEFAULT_ESTIMATORS = ("tsiv", "ts2sls", "or", "ipw", "aipw", "lik")


@dataclass(frozen=True)
class DgpConfig:
    n1: int = 5000
    n0: int = 500
    iv_coef: float = 1.0
    ps_intercept_shift: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n1 < 10 or self.n0 < 10:
            raise ValueError("n1 and n0 must be at least 10")
        if not self.iv_coef > 0:
            raise ValueError("iv_coef must be positive")
        if self.ps_intercept_shift is None:
            object.__setattr__(self, "ps_intercept_shift", math.log(self.n1 / self.n0))

    @property
    def true_ps_coef(self) -> np.ndarray:
        """Logistic coefficients of the true PS on (1, Z0, Z1, Z2)."""
        return np.array([-1.5 + self.ps_intercept_shift, 1.0, 1.0, 1.0])


SCENARIOS = {
    "table1": dict(n1=5000, n0=500, iv_coef=1.0),
    "s1": dict(n1=5000, n0=500, iv_coef=0.8),
    "s2": dict(n1=5000, n0=500, iv_coef=0.6),
    "s3": dict(n1=500, n0=5000, iv_coef=1.0),
}


def scenario_config(name: str, seed: int = 0, **overrides) -> DgpConfig:
    if name not in SCENARIOS:
        raise ValueError("unknown scenario %r (choose from %s)" % (name, ", ".join(SCENARIOS)))
    kw = dict(SCENARIOS[name])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return DgpConfig(seed=seed, **kw)


@dataclass(frozen=True)
class ScenarioCell:
    """One cell of the 2 x 2 specification matrix."""

    ps_correct: bool
    or_correct: bool

    @property
    def name(self) -> str:
        return "%s PS, %s OR" % (
            "correct" if self.ps_correct else "misspecified",
            "correct" if self.or_correct else "misspecified",
        )

    @property
    def key(self) -> str:
        return "ps_%s/or_%s" % ("c" if self.ps_correct else "m", "c" if self.or_correct else "m")

    @property
    def ps_terms(self):
        return CORRECT_TERMS if self.ps_correct else MISSPECIFIED_TERMS

    @property
    def or_terms(self):
        return CORRECT_TERMS if self.or_correct else MISSPECIFIED_TERMS


SCENARIO_MATRIX = (
    ScenarioCell(True, True),
    ScenarioCell(True, False),
    ScenarioCell(False, True),
    ScenarioCell(False, False),
)


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent stream keyed by (seed, replicate index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(rep)])))


def transformed(z: np.ndarray) -> np.ndarray:
    z0, z1, z2 = z.T
    return np.column_stack([
        np.exp(-0.5 * z0) + 5.0,
        z1 / (1.0 + 0.1 * np.exp(z0)) + 10.0,
        np.exp(0.4 * z2) + 3.0,
    ])


def generate(config: DgpConfig, rep: int = 0) -> MergedSample:
    """Draw one merged sample (primary rows first)."""
    rng = replicate_rng(config.seed, rep)
    n1, n0, c = config.n1, config.n0, config.iv_coef

    z1s = rng.normal(1.0, 1.0, size=(n1, 3))
    eps = rng.standard_normal(n1)
    e1 = 0.8 * eps + 0.6 * rng.standard_normal(n1)
    x1 = c * z1s[:, 0] + 0.6 * z1s[:, 1] - 0.5 * z1s[:, 2] + e1
    y1 = 0.5 * x1 - 0.4 * z1s[:, 1] + 0.5 * z1s[:, 2] + eps

    z0s = rng.standard_normal((n0, 3))
    e0 = rng.standard_normal(n0)
    x0 = c * z0s[:, 0] + 0.6 * z0s[:, 1] - 0.5 * z0s[:, 2] + e0

    z = np.vstack([z1s, z0s])
    u = np.hstack([z, transformed(z)])
    t = np.r_[np.ones(n1, np.int8), np.zeros(n0, np.int8)]
    x = np.r_[np.full(n1, np.nan), x0]
    y = np.r_[y1, np.full(n0, np.nan)]
    return MergedSample(t, u, x, y, U_NAMES, ("x",), ("y",))


def generate_with_latent(config: DgpConfig, rep: int = 0):
    """Like :func:`generate` but also returns the primary-row X values."""
    rng = replicate_rng(config.seed, rep)
    n1, c = config.n1, config.iv_coef
    z1s = rng.normal(1.0, 1.0, size=(n1, 3))
    eps = rng.standard_normal(n1)
    e1 = 0.8 * eps + 0.6 * rng.standard_normal(n1)
    x1 = c * z1s[:, 0] + 0.6 * z1s[:, 1] - 0.5 * z1s[:, 2] + e1
    return generate(config, rep), x1


def default_threads() -> int:
    """Worker count from DATACOMB_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("DATACOMB_THREADS", "1")))
    except ValueError:
        return 1


def iv_problem(sample: MergedSample) -> IvProblem:
    return IvProblem(sample, "z0", ("z1", "z2"), "y", "x")


def run_replicate(config: DgpConfig, rep: int, cells, estimators, include_h2=False, clip_weights=False):
    """Generate replicate ``rep`` and run every estimator in every cell.

    Returns ``{cell_key: {estimator: (beta_error_or_nan, diagnostics)}}``.
    """
    sample = generate(config, rep)
    problem = iv_problem(sample)
    out = {}
    for cell in cells:
        res = estimate_iv(
            problem,
            estimators,
            BasisSpec.parse(cell.ps_terms),
            BasisSpec.parse(cell.or_terms),
            include_h2=include_h2,
            clip_weights=clip_weights,
        )
        out[cell.key] = {
            name: (float(r.beta[0]) - BETA_TRUE if r.ok else math.nan, r.diagnostics)
            for name, r in res.items()
        }
    return out


@dataclass
class EstimatorSummary:
    estimator: str
    bias: float
    sd: float
    n_ok: int
    n_fail: int
    flagged: bool

    @property
    def mc_se(self) -> float:
        """Monte Carlo standard error of the bias."""
        return self.sd / math.sqrt(self.n_ok) if self.n_ok > 1 else math.nan


@dataclass
class MonteCarloTable:
    """Bias/sd of the X coefficient for one specification cell."""

    config: DgpConfig
    cell: ScenarioCell
    reps: int
    errors: dict  # estimator -> array of beta - 0.5 (nan for failures)
    summaries: dict = field(default_factory=dict)
    min_lik_weight: float = math.nan

    def to_dict(self) -> dict:
        return {
            "cell": self.cell.key,
            "cell_name": self.cell.name,
            "reps": self.reps,
            "min_lik_weight": _jsonable(self.min_lik_weight),
            "estimators": {
                k: {
                    "bias": _jsonable(s.bias),
                    "sd": _jsonable(s.sd),
                    "n_ok": s.n_ok,
                    "n_fail": s.n_fail,
                    "flagged": s.flagged,
                }
                for k, s in self.summaries.items()
            },
        }


def _jsonable(v):
    return None if v is None or not math.isfinite(v) else float(v)


FAIL_FLAG = 0.2


def summarize(errors: np.ndarray, name: str) -> EstimatorSummary:
    errors = np.asarray(errors, float)
    ok = errors[np.isfinite(errors)]
    n_fail = len(errors) - len(ok)
    bias = float(np.mean(ok)) if len(ok) else math.nan
    sd = float(np.std(ok, ddof=1)) if len(ok) > 1 else math.nan
    return EstimatorSummary(name, bias, sd, len(ok), n_fail, n_fail > FAIL_FLAG * len(errors))


def run_table(
    config: DgpConfig,
    estimators=DEFAULT_ESTIMATORS,
    reps: int = 200,
    cells=SCENARIO_MATRIX,
    threads: int | None = None,
    include_h2=False,
    clip_weights=False,
) -> dict:
    """Monte Carlo over all ``cells`` on shared replicates.

    Each replicate draws from its own (seed, rep) stream, so results do not
    depend on ``threads``.  Returns ``{cell_key: MonteCarloTable}``.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    estimators = tuple(estimators)
    cells = tuple(cells)
    threads = default_threads() if threads is None else max(1, int(threads))
    job = lambda rep: run_replicate(config, rep, cells, estimators, include_h2, clip_weights)
    if threads == 1:
        results = [job(r) for r in range(reps)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(reps)))

    tables = {}
    for cell in cells:
        errs = {e: np.array([res[cell.key][e][0] for res in results]) for e in estimators}
        table = MonteCarloTable(config, cell, reps, errs)
        table.summaries = {e: summarize(errs[e], e) for e in estimators}
        if "lik" in estimators:
            w = [res[cell.key]["lik"][1].get("min_weight", math.nan) for res in results]
            w = np.array(w, float)
            table.min_lik_weight = float(np.min(w[np.isfinite(w)])) if np.any(np.isfinite(w)) else math.nan
        for e, s in table.summaries.items():
            if s.flagged:
                log.warning("%s: %s failed in %d of %d replicates", cell.key, e, s.n_fail, reps)
        tables[cell.key] = table
    return tables


def run_monte_carlo(
    config: DgpConfig,
    cell: ScenarioCell,
    estimators=DEFAULT_ESTIMATORS,
    reps: int = 200,
    seed: int | None = None,
    threads: int | None = None,
    include_h2=False,
    clip_weights=False,
) -> MonteCarloTable:
    """Bias/sd table for a single specification cell."""
    if seed is not None:
        config = DgpConfig(config.n1, config.n0, config.iv_coef, config.ps_intercept_shift, seed)
    return run_table(config, estimators, reps, (cell,), threads, include_h2, clip_weights)[cell.key]


def tables_to_json(tables: dict, config: DgpConfig, scenario: str | None = None) -> dict:
    return {
        "scenario": scenario,
        "config": {
            "n1": config.n1,
            "n0": config.n0,
            "iv_coef": config.iv_coef,
            "ps_intercept_shift": config.ps_intercept_shift,
            "seed": config.seed,
        },
        "beta_true": BETA_TRUE,
        "cells": [t.to_dict() for t in tables.values()],
    }


def tables_to_csv(tables: dict) -> str:
    """Estimators as rows, (bias, sd, failures) per cell as columns."""
    cells = list(tables.values())
    names = list(cells[0].summaries)
    header = ["estimator"]
    for t in cells:
        header += ["%s bias" % t.cell.key, "%s sd" % t.cell.key, "%s fail" % t.cell.key]
    lines = [",".join(header)]
    for e in names:
        row = [e]
        for t in cells:
            s = t.summaries[e]
            row += [repr(s.bias), repr(s.sd), str(s.n_fail)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
