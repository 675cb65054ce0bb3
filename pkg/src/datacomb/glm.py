"""Working-model fits: logistic propensity score, linear outcome regression,
and the propensity score augmented with fitted outcome-regression columns."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .data import BasisSpec, DesignMatrix, MergedSample, build_design, select_independent, PRUNE_TOL
from .errors import ConvergenceError, SchemaError, SeparationError, SingularMatrixError

log = logging.getLogger(__name__)

SCORE_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
SEPARATION_NORM = 1e3
SEPARATION_FIT = 1e-4


def logistic_loglik(F, t, gamma):
    eta = F @ gamma
    return float(np.mean(t * eta - np.logaddexp(0.0, eta)))


@dataclass(frozen=True, eq=False)
class FittedPs:
    gamma_hat: np.ndarray
    pi_hat: np.ndarray
    score_residual_norm: float
    converged: bool
    iterations: int
    loglik: float
    design: np.ndarray
    labels: tuple = ()

    def score(self, t):
        """Average score E~[(T - pi) f(U)] at the fitted coefficients."""
        return self.design.T @ (np.asarray(t, float) - self.pi_hat) / len(self.pi_hat)


def _polish(F, t, gamma, pi, snorm, ll):
    """One extra Newton step once converged, kept only if the score shrinks.

    Newton converges quadratically, so this takes a score just under the
    tolerance down to rounding level at the cost of one solve.
    """
    n = len(t)
    H = (F * (pi * (1.0 - pi))[:, None]).T @ F / n
    try:
        cand = gamma + sla.cho_solve(sla.cho_factor(H), F.T @ (t - pi) / n)
    except (sla.LinAlgError, ValueError):
        return gamma, pi, snorm, ll
    pc = expit(F @ cand)
    sc = float(np.max(np.abs(F.T @ (t - pc) / n)))
    if sc < snorm:
        return cand, pc, sc, logistic_loglik(F, t, cand)
    return gamma, pi, snorm, ll


def fit_logistic(design, t, *, tol=SCORE_TOL, max_iter=MAX_ITER, gamma0=None, trace=None) -> FittedPs:
    """Logistic maximum likelihood by Newton-Raphson with step-halving.

    Parameters
    ----------
    design : DesignMatrix or array, shape (n, p)
    t : array of {0, 1}, shape (n,)
    gamma0 : optional starting coefficients (default zero).
    trace : optional list receiving (gamma, loglik) for each accepted iterate.

    Raises
    ------
    SeparationError
        Coefficient norm exceeds 1e3 while the score does not vanish, or
        every fitted probability lies within 1e-4 of its label.
    SingularMatrixError, ConvergenceError
    """
    labels = ()
    if isinstance(design, DesignMatrix):
        labels = design.column_labels
        F = design.values
    else:
        F = np.asarray(design, dtype=float)
    t = np.asarray(t, dtype=float)
    n, p = F.shape
    if t.shape != (n,):
        raise SchemaError("labels do not match design rows")
    if t.min() == t.max():
        raise SchemaError("both labels must be present")

    gamma = np.zeros(p) if gamma0 is None else np.array(gamma0, dtype=float)
    ll = logistic_loglik(F, t, gamma)
    if trace is not None:
        trace.append((gamma.copy(), ll))
    for it in range(max_iter + 1):
        pi = expit(F @ gamma)
        score = F.T @ (t - pi) / n
        snorm = float(np.max(np.abs(score)))
        if snorm < tol:
            gamma, pi, snorm, ll = _polish(F, t, gamma, pi, snorm, ll)
            if np.max(np.abs(t - pi)) < SEPARATION_FIT:
                # the score can vanish numerically on separated data before
                # the coefficients look large
                raise SeparationError("fitted probabilities are numerically 0 or 1 on every row")
            return FittedPs(gamma, pi, snorm, True, it, ll, F, labels)
        if np.linalg.norm(gamma) > SEPARATION_NORM:
            raise SeparationError(
                "logistic coefficients diverge (|gamma| = %.3g, score %.3g)"
                % (np.linalg.norm(gamma), snorm)
            )
        if it == max_iter:
            break
        w = pi * (1.0 - pi)
        H = (F * w[:, None]).T @ F / n
        try:
            step = sla.cho_solve(sla.cho_factor(H), score)
        except (sla.LinAlgError, ValueError):
            raise SingularMatrixError("logistic Hessian is singular") from None
        s = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = gamma + s * step
            ll_new = logistic_loglik(F, t, cand)
            if ll_new >= ll - 1e-13 * (1.0 + abs(ll)):
                break
            s *= 0.5
        else:
            raise ConvergenceError("step-halving failed in logistic fit")
        gamma, ll = cand, ll_new
        if trace is not None:
            trace.append((gamma.copy(), ll))
    raise ConvergenceError("logistic fit did not converge in %d iterations (score %.3g)" % (max_iter, snorm))


def fit_ps(sample: MergedSample, spec: BasisSpec, **kw) -> FittedPs:
    """Fit the propensity score P(T=1|U) with basis ``spec`` on all rows."""
    return fit_logistic(build_design(sample, spec, "all"), sample.t, **kw)


@dataclass(frozen=True, eq=False)
class FittedOr:
    alpha_hat: np.ndarray
    m_hat: np.ndarray
    design: np.ndarray
    labels: tuple
    kept_columns: tuple

    def normal_equations(self, sample: MergedSample, x=None) -> np.ndarray:
        aux = sample.auxiliary
        xv = _xvalues(sample, x)[aux]
        return self.design[aux].T @ (xv - self.m_hat[aux])


def _xvalues(sample, x):
    if isinstance(x, np.ndarray):
        return x
    return sample.xcol(x)


def fit_or_linear(sample: MergedSample, spec: BasisSpec, x=None) -> FittedOr:
    """Least-squares fit of E(X|U) = alpha' g(U) on the auxiliary rows.

    Fitted means are returned for all rows, since primary rows need them.
    ``x`` selects an auxiliary variable by name (default: the first one),
    or gives the outcome values directly as an array.
    """
    aux_design = build_design(sample, spec, "auxiliary")
    kept = aux_design.kept_columns
    if sample.n0 <= len(kept):
        raise SchemaError("auxiliary sample too small for %d regressors" % len(kept))
    G = spec.evaluate(sample.u, sample.u_names)[:, kept]
    xv = _xvalues(sample, x)
    aux = sample.auxiliary
    alpha, _, rank, _ = np.linalg.lstsq(G[aux], xv[aux], rcond=None)
    if rank < len(kept):
        raise SingularMatrixError("auxiliary outcome-regression design is rank deficient")
    return FittedOr(alpha, G @ alpha, G, aux_design.column_labels, kept)


@dataclass(frozen=True, eq=False)
class FittedAugPs:
    gamma_tilde: np.ndarray
    delta_tilde: np.ndarray
    pi_tilde: np.ndarray
    aug_regressors: np.ndarray
    aug_kept: tuple
    f_values: np.ndarray
    psi_values: np.ndarray  # every supplied column, including dropped ones
    fit: FittedPs

    @property
    def design(self):
        return self.fit.design

    def score_residuals(self, t, psi):
        """Max-norm of E~[(T - pi~) f] and E~[(T - pi~) psi] over all psi columns."""
        r = np.asarray(t, float) - self.pi_tilde
        n = len(r)
        e12 = np.max(np.abs(self.f_values.T @ r / n))
        psi = np.asarray(psi, float).reshape(n, -1)
        e13 = np.max(np.abs(psi.T @ r / n)) if psi.shape[1] else 0.0
        return float(e12), float(e13)


def fit_augmented_ps(sample, f_spec, psi_hat, *, tol=SCORE_TOL, start=None) -> FittedAugPs:
    """Logistic PS with fitted outcome-regression columns appended.

    ``f_spec`` is a BasisSpec with intercept (or an already built
    all-rows DesignMatrix); ``psi_hat`` holds one column per fitted
    outcome-regression function, aligned with the sample rows.  Columns of
    ``psi_hat`` in the span of f(U) (constants included) are dropped.
    ``start`` optionally warm-starts (gamma, delta) from a previous fit with
    the same retained columns.
    """
    t = sample.t if isinstance(sample, MergedSample) else np.asarray(sample)
    n = len(t)
    if isinstance(f_spec, DesignMatrix):
        fd = f_spec
    else:
        if not f_spec.includes_intercept:
            raise ValueError("augmented PS basis must include the intercept")
        fd = build_design(sample, f_spec, "all")
    F = fd.values
    psi = np.asarray(psi_hat, dtype=float).reshape(n, -1)
    if not np.all(np.isfinite(psi)):
        raise SchemaError("non-finite fitted outcome-regression values")
    p, m = F.shape[1], psi.shape[1]
    A = np.hstack([F, psi])
    groups = [[0], list(range(1, p)), list(range(p, p + m))] if fd.intercept else [list(range(p)), list(range(p, p + m))]
    kept = select_independent(A, groups, PRUNE_TOL)
    kept_psi = tuple(j - p for j in kept if j >= p)
    kept_f = [j for j in kept if j < p]
    if len(kept_f) != p:
        raise SingularMatrixError("base PS design is rank deficient")
    design = A[:, list(range(p)) + [p + j for j in kept_psi]]
    gamma0 = None
    if start is not None and len(start) == design.shape[1]:
        gamma0 = start
    fit = fit_logistic(design, t, tol=tol, gamma0=gamma0)
    return FittedAugPs(
        gamma_tilde=fit.gamma_hat[:p],
        delta_tilde=fit.gamma_hat[p:],
        pi_tilde=fit.pi_hat,
        aug_regressors=psi[:, list(kept_psi)],
        aug_kept=kept_psi,
        f_values=F,
        psi_values=psi,
        fit=fit,
    )
