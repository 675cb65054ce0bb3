"""Standard errors: two-sample stratified bootstrap with percentile intervals,
and sandwich variances from stacked per-row estimating equations."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .data import MergedSample
from .errors import EstimationError, SingularMatrixError
from .estimators import fd_jacobian
from .pieces import calibration_pieces
from .tsiv import IvEstimate, IvFits, IvProblem

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.5


@dataclass
class BootstrapReport:
    B: int
    estimates: np.ndarray  # successful replicates only, (B - failures) x k
    se: np.ndarray
    ci: np.ndarray  # k x 2
    failures: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "seed": self.seed,
            "failures": self.failures,
            "se": self.se.tolist(),
            "ci": self.ci.tolist(),
        }


def replicate_indices(sample: MergedSample, seed: int, b: int) -> np.ndarray:
    """Row indices of bootstrap replicate ``b``: n1 primary and n0 auxiliary
    rows drawn with replacement, each from its own sample."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(b)])))
    prim = np.flatnonzero(sample.primary)
    aux = np.flatnonzero(sample.auxiliary)
    return np.concatenate([rng.choice(prim, size=len(prim)), rng.choice(aux, size=len(aux))])


def bootstrap(sample: MergedSample, estimator, B: int, seed: int, threads: int = 1) -> BootstrapReport:
    """Stratified bootstrap of ``estimator`` (MergedSample -> k-vector).

    A replicate fails when the estimator raises EstimationError or returns a
    non-finite value; failures are counted and left out of the summaries.
    """
    if B < 2:
        raise ValueError("B must be at least 2")

    def one(b):
        try:
            val = np.atleast_1d(np.asarray(estimator(sample.take(replicate_indices(sample, seed, b))), float))
        except EstimationError as exc:
            log.debug("bootstrap replicate %d failed: %s", b, exc)
            return None
        return val if np.all(np.isfinite(val)) else None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]
    good = [r for r in results if r is not None]
    failures = B - len(good)
    if failures > MAX_FAILURE_SHARE * B:
        raise EstimationError("%d of %d bootstrap replicates failed" % (failures, B))
    est = np.vstack(good)
    se = est.std(axis=0, ddof=1) if len(good) > 1 else np.zeros(est.shape[1])
    ci = np.percentile(est, [2.5, 97.5], axis=0).T
    return BootstrapReport(B, est, se, ci, failures, seed)


def sandwich_cov(rows_fn, params_hat, jacobian=None) -> np.ndarray:
    """A^-1 B A^-T / n for per-row estimating functions.

    ``rows_fn(params)`` returns an (n, P) array whose column means vanish at
    ``params_hat``.  A is the Jacobian of the column means (central
    differences unless ``jacobian`` is given) and B the average outer
    product of the rows.
    """
    params_hat = np.asarray(params_hat, float)
    rows = np.asarray(rows_fn(params_hat), float)
    n = rows.shape[0]
    A = fd_jacobian(lambda p: rows_fn(p).mean(axis=0), params_hat) if jacobian is None else np.asarray(jacobian, float)
    Bm = rows.T @ rows / n
    try:
        lu = sla.lu_factor(A)
    except (sla.LinAlgError, ValueError):
        raise SingularMatrixError("sandwich Jacobian is singular") from None
    if np.linalg.cond(A) > 1e14:
        raise SingularMatrixError("sandwich Jacobian is singular")
    Ainv_B = sla.lu_solve(lu, Bm)
    return sla.lu_solve(lu, Ainv_B.T).T / n


def sandwich_se(rows_fn, params_hat, block=slice(None)) -> np.ndarray:
    """Standard errors for ``params_hat[block]``."""
    cov = sandwich_cov(rows_fn, params_hat)
    return np.sqrt(np.clip(np.diag(cov)[block], 0.0, None))


# ---------------------------------------------------------------- IV stacks


def _beta_rows(problem, t, u, y0, zc, mu3, beta):
    """T U {mu3_row . beta_x + Zc' beta_c - Y}, using E~(T) scaling."""
    fitted = mu3[None, :] * beta[0] + u * (zc @ beta[1:])[:, None] - u * y0[:, None]
    return t[:, None] * fitted


def iv_stack(problem: IvProblem, est: IvEstimate, fits: IvFits):
    """Per-row estimating functions for ``est`` stacked with its nuisance fits.

    Returns ``(rows_fn, params_hat, beta_slice)``; ``beta_slice`` indexes the
    coefficient block of the parameter vector.
    """
    s = problem.sample
    k = problem.k
    t = s.t.astype(float)
    aux = s.auxiliary
    u = problem.u
    zc = problem.zc
    x0 = np.where(aux, np.nan_to_num(problem.x), 0.0)
    y0 = np.where(s.primary, np.nan_to_num(problem.y), 0.0)
    ux = u * x0[:, None]
    m = est.method
    beta = np.asarray(est.beta, float)

    if m == "tsiv":
        params = np.r_[t.mean(), beta]

        def rows(p):
            pt, b = p[0], p[1:]
            lhs = (1 - t)[:, None] * u * (x0 * b[0] + zc @ b[1:])[:, None] / (1 - pt)
            return np.column_stack([t - pt, lhs - t[:, None] * u * y0[:, None] / pt])

        return rows, params, slice(1, 1 + k)

    if m == "ts2sls":
        from .tsiv import first_stage

        params = np.r_[first_stage(problem), beta]

        def rows(p):
            a, b = p[:k], p[k:]
            W = np.column_stack([u @ a, zc])
            r1 = (1 - t)[:, None] * u * (x0 - u @ a)[:, None]
            r2 = t[:, None] * W * (y0 - W @ b)[:, None]
            return np.column_stack([r1, r2])

        return rows, params, slice(k, 2 * k)

    mu3 = est.mu.mu3
    start = []
    if m in ("or", "aipw", "reg", "lik"):
        G = fits.orfit.design
        start.append(fits.orfit.alpha_hat)
    if m in ("ipw", "aipw"):
        F = fits.ps.design
        start.append(fits.ps.gamma_hat)
    if m in ("reg", "lik"):
        aug = fits.aug
        Fa = aug.f_values
        kept_psi = list(aug.aug_kept)
        pieces0 = fits.pieces
        start.append(aug.fit.gamma_hat)
    if m == "reg":
        d = pieces0.h.shape[1]
        eta0 = pieces0.tau_init(problem.ux())
        xi0 = pieces0.xi
        B0 = np.linalg.solve(xi0.T @ pieces0.zeta, xi0.T @ eta0)
        start.append(B0.ravel())
    if m == "lik":
        start += [fits.el.lambda_hat, fits.el.lambda_tilde[: pieces0.d1]]
    if m not in ("or", "ipw", "aipw", "reg", "lik"):
        raise ValueError("no stacked equations for %r" % m)
    sizes = [len(v) for v in start]
    params = np.concatenate(start + [mu3, beta])

    def split(p):
        out, i = [], 0
        for sz in sizes:
            out.append(p[i:i + sz])
            i += sz
        return out, p[i:i + k], p[i + k:i + 2 * k]

    def rows(p):
        parts, mu, b = split(p)
        cols = []
        it = iter(parts)
        if m in ("or", "aipw", "reg", "lik"):
            a = next(it)
            mhat = G @ a
            cols.append((1 - t)[:, None] * G * (x0 - mhat)[:, None])
        if m in ("ipw", "aipw"):
            g = next(it)
            pi = expit(F @ g)
            cols.append((t - pi)[:, None] * F)
            a_w = (1 - t) * pi / (1 - pi)
            if m == "ipw":
                cols.append(a_w[:, None] * (ux - mu))
            else:
                c = (1 - t) / (1 - pi) - 1.0
                cols.append(a_w[:, None] * (ux - mu) - c[:, None] * (u * mhat[:, None] - mu))
        if m in ("reg", "lik"):
            g = next(it)
            psi = (u * mhat[:, None])[:, kept_psi]
            D = np.hstack([Fa, psi])
            pi = expit(D @ g)
            cols.append((t - pi)[:, None] * D)
            pc = calibration_pieces(s.t, pi, Fa, u * mhat[:, None], pieces0.include_h2, kept=pieces0.kept)
            if m == "reg":
                Bm = next(it).reshape(d, k)
                eta = pc.tau_init(problem.ux())
                xi, zeta = pc.xi, pc.zeta
                resid = zeta @ Bm - eta  # (n, k)
                cols.append((xi[:, :, None] * resid[:, None, :]).reshape(len(t), -1))
                cols.append(eta - xi @ Bm - pi[:, None] * mu)
            else:
                lam = next(it)
                lam1 = next(it)
                h = pc.h
                om = pi + h @ lam
                r = np.where(s.t == 1, 1.0 / om, -1.0 / (1.0 - om))
                cols.append(h * r[:, None])
                omt = pi + pc.h1 @ lam1 + pc.h2 @ lam[pc.d1:]
                cols.append(pc.v * ((1 - t) / (1 - omt) - 1.0)[:, None])
                cols.append(((1 - t) * pi / (1 - omt))[:, None] * (ux - mu))
        if m == "or":
            cols.append(t[:, None] * (u * mhat[:, None] - mu))
        cols.append(_beta_rows(problem, t, u, y0, zc, mu, b))
        return np.hstack(cols)

    nb = len(params)
    return rows, params, slice(nb - k, nb)


def iv_sandwich_se(problem: IvProblem, est: IvEstimate, fits: IvFits) -> np.ndarray:
    """Sandwich standard errors of the coefficient vector for ``est``."""
    rows, params, sl = iv_stack(problem, est, fits)
    return sandwich_se(rows, params, sl)
