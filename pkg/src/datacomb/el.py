"""Constrained concave maximisations behind the calibrated likelihood estimator.

Stage 1 maximises

    l(lam) = E~[ T log w(lam) + (1 - T) log(1 - w(lam)) ],  w = pi + h lam,

over the region w > 0 on primary rows and w < 1 on auxiliary rows.
Stage 2 holds the h2-block of the stage-1 solution fixed and maximises

    kappa(lam1) = E~[ (1 - T) {log(1 - w(lam1, lam2)) - log(1 - w_hat)} / pi + lam1' v ],

whose stationarity condition is E~[{(1 - T) / (1 - w) - 1} v] = 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConvergenceError, FeasibilityError, SingularMatrixError
from .pieces import CalibrationPieces

GRAD_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 50
MARGIN = 1e-12
BACKTRACK = 0.5


@dataclass(frozen=True, eq=False)
class ElState:
    lambda_hat: np.ndarray
    lambda_tilde: np.ndarray
    omega_hat: np.ndarray
    omega_tilde: np.ndarray
    p_hat: np.ndarray
    aux_weights: np.ndarray
    feasible: bool


def _feasible_l(omega, t):
    return bool(np.all(omega[t == 1] > MARGIN) and np.all(omega[t == 0] < 1.0 - MARGIN))


def l_objective(pieces: CalibrationPieces, lam) -> float:
    t = pieces.t
    omega = pieces.pi + pieces.h @ np.asarray(lam, float)
    if not _feasible_l(omega, t):
        return -np.inf
    prim = t == 1
    return float((np.log(omega[prim]).sum() + np.log1p(-omega[~prim]).sum()) / len(t))


def l_gradient(pieces: CalibrationPieces, lam) -> np.ndarray:
    t = pieces.t
    omega = pieces.pi + pieces.h @ np.asarray(lam, float)
    r = np.where(t == 1, 1.0 / omega, -1.0 / (1.0 - omega))
    return pieces.h.T @ r / len(t)


def l_hessian(pieces: CalibrationPieces, lam) -> np.ndarray:
    t = pieces.t
    omega = pieces.pi + pieces.h @ np.asarray(lam, float)
    c = np.where(t == 1, 1.0 / omega**2, 1.0 / (1.0 - omega) ** 2)
    return -(pieces.h * c[:, None]).T @ pieces.h / len(t)


def el_objective(pieces: CalibrationPieces, lam) -> float:
    """Empirical log-likelihood n^-1 sum log(1 - lam' xi_i).

    Differs from :func:`l_objective` by a constant.  The sign inside the log
    matches the parametrisation w = pi + h lam.
    """
    a = 1.0 - pieces.xi @ np.asarray(lam, float)
    if np.any(a <= 0):
        return -np.inf
    return float(np.mean(np.log(a)))


def _active_rows(omega, t, slack=1e-6):
    return np.flatnonzero(((t == 1) & (omega < slack)) | ((t == 0) & (omega > 1.0 - slack)))


def _polish(obj, grad, hess, x, g, trace):
    """One extra Newton step at convergence, kept if feasible and the
    gradient shrinks."""
    if x.size == 0:
        return x
    try:
        cand = x + sla.solve(-hess(x), g, assume_a="pos")
    except (sla.LinAlgError, ValueError):
        return x
    fc = obj(cand)
    if np.isfinite(fc) and np.max(np.abs(grad(cand))) < np.max(np.abs(g)):
        if trace is not None:
            trace.append((cand.copy(), fc))
        return cand
    return x


def _newton_ascent(obj, grad, hess, x0, label, trace=None, omega_of=None, t=None):
    x = np.array(x0, dtype=float)
    f = obj(x)
    if not np.isfinite(f):
        raise FeasibilityError("%s: starting point is infeasible" % label)
    if trace is not None:
        trace.append((x.copy(), f))
    for it in range(MAX_ITER + 1):
        g = grad(x)
        if x.size == 0 or np.max(np.abs(g)) < GRAD_TOL:
            return _polish(obj, grad, hess, x, g, trace), it
        if it == MAX_ITER:
            break
        H = hess(x)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", sla.LinAlgWarning)
                step = sla.solve(-H, g, assume_a="pos")
        except (sla.LinAlgError, sla.LinAlgWarning, ValueError):
            raise SingularMatrixError("%s: Hessian is singular" % label) from None
        if not np.all(np.isfinite(step)):
            raise SingularMatrixError("%s: Hessian is singular" % label)
        s = 1.0
        for _ in range(MAX_HALVINGS):
            cand = x + s * step
            fc = obj(cand)
            if np.isfinite(fc) and fc >= f - 1e-14 * (1.0 + abs(f)):
                break
            s *= BACKTRACK
        else:
            active = None if omega_of is None else _active_rows(omega_of(x), t)
            raise FeasibilityError(
                "%s: no feasible ascent step after %d halvings" % (label, MAX_HALVINGS),
                active=active,
            )
        x, f = cand, fc
        if trace is not None:
            trace.append((x.copy(), f))
    active = None if omega_of is None else _active_rows(omega_of(x), t)
    raise ConvergenceError(
        "%s did not converge (gradient %.3g); active constraints: %s"
        % (label, float(np.max(np.abs(grad(x)))), "none" if active is None else list(active[:10]))
    )


def maximize_l(pieces: CalibrationPieces, trace=None):
    """Stage-1 maximiser lambda_hat and w(U; lambda_hat).

    Newton ascent from lambda = 0 (feasible because 0 < pi < 1) with
    step-halving that keeps every iterate strictly feasible.
    """
    d = pieces.h.shape[1]
    lam, _ = _newton_ascent(
        lambda x: l_objective(pieces, x),
        lambda x: l_gradient(pieces, x),
        lambda x: l_hessian(pieces, x),
        np.zeros(d),
        "stage-1 likelihood",
        trace,
        lambda x: pieces.pi + pieces.h @ x,
        pieces.t,
    )
    return lam, pieces.pi + pieces.h @ lam


def _kappa_parts(pieces, lambda_hat):
    d1 = pieces.d1
    base = pieces.pi + pieces.h2 @ lambda_hat[d1:]
    omega_hat = pieces.pi + pieces.h @ lambda_hat
    return base, omega_hat


def kappa_objective(pieces: CalibrationPieces, lambda_hat, lam1) -> float:
    base, omega_hat = _kappa_parts(pieces, lambda_hat)
    omega = base + pieces.h1 @ np.asarray(lam1, float)
    aux = pieces.t == 0
    if np.any(omega[aux] >= 1.0 - MARGIN):
        return -np.inf
    n = len(pieces.t)
    term = (np.log1p(-omega[aux]) - np.log1p(-omega_hat[aux])) / pieces.pi[aux]
    return float(term.sum() / n + np.asarray(lam1) @ pieces.v.mean(axis=0))


def kappa_gradient(pieces: CalibrationPieces, lambda_hat, lam1) -> np.ndarray:
    """Negative of the stage-2 residual E~[{(1 - T)/(1 - w) - 1} v]."""
    return -kappa_residual(pieces, lambda_hat, lam1)


def kappa_residual(pieces: CalibrationPieces, lambda_hat, lam1) -> np.ndarray:
    base, _ = _kappa_parts(pieces, lambda_hat)
    omega = base + pieces.h1 @ np.asarray(lam1, float)
    c = (1 - pieces.t) / (1.0 - omega) - 1.0
    return pieces.v.T @ c / len(pieces.t)


def kappa_hessian(pieces: CalibrationPieces, lambda_hat, lam1) -> np.ndarray:
    base, _ = _kappa_parts(pieces, lambda_hat)
    omega = base + pieces.h1 @ np.asarray(lam1, float)
    c = (1 - pieces.t) * pieces.pi / (1.0 - omega) ** 2
    return -(pieces.v * c[:, None]).T @ pieces.v / len(pieces.t)


def maximize_kappa(pieces: CalibrationPieces, lambda_hat, trace=None):
    """Stage-2 maximiser, warm-started at the h1-block of ``lambda_hat``.

    Returns ``(lambda_tilde1, omega_tilde)``.
    """
    lambda_hat = np.asarray(lambda_hat, float)
    d1 = pieces.d1
    base, _ = _kappa_parts(pieces, lambda_hat)
    lam1, _ = _newton_ascent(
        lambda x: kappa_objective(pieces, lambda_hat, x),
        lambda x: kappa_gradient(pieces, lambda_hat, x),
        lambda x: kappa_hessian(pieces, lambda_hat, x),
        lambda_hat[:d1],
        "stage-2 likelihood",
        trace,
        lambda x: base + pieces.h1 @ x,
        pieces.t,
    )
    return lam1, base + pieces.h1 @ lam1


def solve_el(pieces: CalibrationPieces) -> ElState:
    """Run both stages and collect the implied weights."""
    lambda_hat, omega_hat = maximize_l(pieces)
    lam1, omega_tilde = maximize_kappa(pieces, lambda_hat)
    lambda_tilde = np.concatenate([lam1, lambda_hat[pieces.d1:]])
    return el_weights(pieces, lambda_hat, lambda_tilde, omega_hat, omega_tilde)


def el_weights(pieces, lambda_hat, lambda_tilde, omega_hat=None, omega_tilde=None) -> ElState:
    """Empirical-likelihood probabilities and stage-2 auxiliary weights.

    p_i = n^-1 / (1 - lambda_hat' xi_i); the stage-2 weights are
    n^-1 / (1 - w(U_i; lambda_tilde)) on auxiliary rows.
    """
    n = pieces.n
    lambda_hat = np.asarray(lambda_hat, float)
    lambda_tilde = np.asarray(lambda_tilde, float)
    if omega_hat is None:
        omega_hat = pieces.pi + pieces.h @ lambda_hat
    if omega_tilde is None:
        omega_tilde = pieces.pi + pieces.h @ lambda_tilde
    p_hat = 1.0 / (n * (1.0 - pieces.xi @ lambda_hat))
    aux = pieces.t == 0
    feasible = _feasible_l(omega_hat, pieces.t) and bool(np.all(omega_tilde[aux] < 1.0))
    w = np.where(aux, 1.0 / (n * (1.0 - omega_tilde)), 0.0)
    return ElState(lambda_hat, lambda_tilde, omega_hat, omega_tilde, p_hat, w, feasible)
