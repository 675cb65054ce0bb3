"""Estimators of theta defined by E{Phi(X, U; theta) | T = 1} = 0 when X is
observed only in the auxiliary sample.

The ladder runs from outcome regression (OR) and inverse probability
weighting (IPW), through AIPW (NP and SP variants), to the calibrated
regression (REG) and calibrated likelihood (LIK) estimators built on an
augmented propensity score, plus an auxiliary-to-study tilting (AST)
comparator.  ``solve_setting2`` handles separable restrictions
E{Phi1(Y, U; theta) - Phi0(X, U; theta) | T = 1} = 0.

Every estimator that weights auxiliary rows reduces, for fixed fitted
models, to ``sum_i a_i Phi(X_i, U_i; theta) = 0`` over auxiliary rows; the
``*_row_weights`` helpers return those ``a_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .data import DesignMatrix, MergedSample, build_design
from .el import solve_el
from .errors import ConvergenceError, SingularMatrixError
from .glm import FittedAugPs, FittedPs, fit_augmented_ps
from .pieces import WEIGHT_FLOOR, CalibrationPieces, apply_weight_floor, calibration_pieces

log = logging.getLogger(__name__)

ROOT_TOL = 1e-8
MAX_NEWTON = 100
MAX_OUTER = 50

__all__ = [
    "MomentModel",
    "SeparableMomentModel",
    "CalibrationPieces",
    "EstimateResult",
    "plugin_psi",
    "newton_root",
    "solve_or",
    "solve_ipw",
    "solve_aipw",
    "solve_aipw_general",
    "solve_calibrated_reg",
    "solve_calibrated_lik",
    "solve_ast",
    "solve_setting2",
    "ipw_row_weights",
    "reg_row_weights",
    "lik_row_weights",
]


@dataclass(frozen=True)
class MomentModel:
    """Vectorised moment function Phi(x, u; theta).

    ``phi(x, u, theta)`` takes x of shape (m, q), u of shape (m, p) and
    returns (m, k).  ``jacobian(x, u, theta, w)`` returns the weighted sum
    sum_i w_i dPhi_i/dtheta' as a (k, k) matrix; when omitted, central
    differences are used.
    """

    phi: Callable
    dim_theta: int
    jacobian: Callable | None = None

    def values(self, sample: MergedSample, theta, rows=None) -> np.ndarray:
        """Phi on ``rows`` (default auxiliary rows), zero-filled to (n, k)."""
        if rows is None:
            rows = sample.auxiliary
        out = np.zeros((sample.n, self.dim_theta))
        out[rows] = np.asarray(self.phi(sample.x[rows], sample.u[rows], theta), float).reshape(-1, self.dim_theta)
        return out


@dataclass(frozen=True)
class SeparableMomentModel:
    """Phi1(y, u; theta) on primary rows and Phi0(x, u; theta) on auxiliary rows."""

    phi1: Callable
    phi0: Callable
    dim_theta: int

    @property
    def phi0_model(self) -> MomentModel:
        return MomentModel(self.phi0, self.dim_theta)

    def primary_mean(self, sample: MergedSample, theta) -> np.ndarray:
        """E~{T Phi1(Y, U; theta)}."""
        prim = sample.primary
        vals = np.asarray(self.phi1(sample.y[prim], sample.u[prim], theta), float).reshape(-1, self.dim_theta)
        return vals.sum(axis=0) / sample.n


@dataclass
class EstimateResult:
    theta_hat: np.ndarray
    estimator_tag: str
    converged: bool
    iterations: int
    residual: float
    diagnostics: dict = field(default_factory=dict)


def plugin_psi(moment: MomentModel, sample: MergedSample, m_hat) -> Callable:
    """Fitted OR function psi_theta(U) = Phi(m_hat(U), U; theta).

    Exact for moment functions affine in x, where a conditional-mean model
    of X given U induces the OR model for Phi.
    """
    m = np.asarray(m_hat, float).reshape(sample.n, -1)

    def psi(theta):
        return np.asarray(moment.phi(m, sample.u, theta), float).reshape(sample.n, -1)

    return psi


def fd_jacobian(fun, theta, step=None):
    """Central differences with step 1e-6 (1 + |theta_j|)."""
    theta = np.asarray(theta, float)
    f0 = np.asarray(fun(theta), float)
    J = np.empty((f0.size, theta.size))
    for j in range(theta.size):
        hj = (1e-6 if step is None else step) * (1.0 + abs(theta[j]))
        e = np.zeros_like(theta)
        e[j] = hj
        J[:, j] = (np.asarray(fun(theta + e)) - np.asarray(fun(theta - e))) / (2 * hj)
    return J


def newton_root(fun, theta0, jac=None, tol=ROOT_TOL, max_iter=MAX_NEWTON, label="estimating equation"):
    """Solve ``fun(theta) = 0`` by Newton's method with step-halving.

    Returns ``(theta, iterations, residual_maxnorm)``.
    """
    theta = np.array(theta0, dtype=float)
    F = np.asarray(fun(theta), float)
    for it in range(max_iter + 1):
        res = float(np.max(np.abs(F)))
        if res < tol:
            return theta, it, res
        if it == max_iter:
            break
        J = fd_jacobian(fun, theta) if jac is None else np.asarray(jac(theta), float)
        try:
            lu = sla.lu_factor(J, check_finite=True)
            if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * max(1.0, np.max(np.abs(J))):
                raise sla.LinAlgError
            step = -sla.lu_solve(lu, F)
        except (sla.LinAlgError, ValueError):
            raise SingularMatrixError("%s: singular Jacobian" % label) from None
        norm0 = np.linalg.norm(F)
        s = 1.0
        for _ in range(30):
            cand = theta + s * step
            Fc = np.asarray(fun(cand), float)
            if np.all(np.isfinite(Fc)) and np.linalg.norm(Fc) < norm0 * (1 - 1e-4 * s) + 1e-15:
                break
            s *= 0.5
        theta, F = cand, Fc
    raise ConvergenceError("%s did not converge (residual %.3g)" % (label, res))


def _weighted_root(moment, sample, a, theta0, label, extra=None):
    """Root of sum_i a_i Phi_i(theta) (+ extra(theta)) over auxiliary rows."""
    aux = sample.auxiliary
    xa, ua, wa = sample.x[aux], sample.u[aux], a[aux]

    def fun(theta):
        val = wa @ np.asarray(moment.phi(xa, ua, theta), float).reshape(-1, moment.dim_theta)
        return val if extra is None else val + extra(theta)

    jac = None
    if moment.jacobian is not None and extra is None:
        jac = lambda theta: np.asarray(moment.jacobian(xa, ua, theta, wa), float)
    return newton_root(fun, theta0, jac, label=label)


def _start(moment, theta0):
    return np.zeros(moment.dim_theta) if theta0 is None else np.asarray(theta0, float)


def _pi_diagnostics(pi, t, n_clipped=0):
    aux = np.asarray(t) == 0
    return {
        "min_pi": float(pi.min()),
        "max_pi": float(pi.max()),
        "max_inverse_weight": float(np.max(1.0 / (1.0 - pi[aux]))),
        "n_clipped": int(n_clipped),
    }


# ----------------------------------------------------------------- OR / IPW / AIPW


def solve_or(sample: MergedSample, moment: MomentModel, psi_hat: Callable, theta0=None) -> EstimateResult:
    """Solve sum over primary rows of psi_theta(U_i) = 0."""
    prim = sample.primary
    n = sample.n

    def fun(theta):
        return psi_hat(theta)[prim].sum(axis=0) / n

    theta, it, res = newton_root(fun, _start(moment, theta0), label="OR equation")
    return EstimateResult(theta, "or", True, it, res)


def ipw_row_weights(pi, t) -> np.ndarray:
    """a_i = (1 - T_i) pi_i / {n (1 - pi_i)}."""
    t = np.asarray(t)
    return (1 - t) * pi / (len(t) * (1.0 - pi))


def solve_ipw(
    sample: MergedSample,
    moment: MomentModel,
    ps: FittedPs | np.ndarray,
    theta0=None,
    clip_weights=False,
    floor=WEIGHT_FLOOR,
) -> EstimateResult:
    """Solve E~[(1 - T) pi(U) Phi / {1 - pi(U)}] = 0."""
    pi = ps.pi_hat if isinstance(ps, FittedPs) else np.asarray(ps, float)
    pi, nclip = apply_weight_floor(pi, sample.t, floor, clip_weights)
    a = ipw_row_weights(pi, sample.t)
    theta, it, res = _weighted_root(moment, sample, a, _start(moment, theta0), "IPW equation")
    return EstimateResult(theta, "ipw", True, it, res, _pi_diagnostics(pi, sample.t, nclip))


def _aipw_fun(sample, moment, pi, psi_hat, variant):
    t = sample.t.astype(float)
    n = sample.n
    a = ipw_row_weights(pi, sample.t)
    aux = sample.auxiliary
    xa, ua, wa = sample.x[aux], sample.u[aux], a[aux]
    aug = t if variant == "NP" else pi

    def fun(theta):
        psi = psi_hat(theta)
        val = wa @ (np.asarray(moment.phi(xa, ua, theta), float).reshape(-1, moment.dim_theta) - psi[aux])
        return val + aug @ psi / n

    return fun


def solve_aipw(
    sample: MergedSample,
    moment: MomentModel,
    ps: FittedPs | np.ndarray,
    psi_hat: Callable,
    variant: str = "NP",
    theta0=None,
    clip_weights=False,
    floor=WEIGHT_FLOOR,
) -> EstimateResult:
    """AIPW estimator; NP augments with T psi, SP with pi psi."""
    variant = variant.upper()
    if variant not in ("NP", "SP"):
        raise ValueError("variant must be 'NP' or 'SP'")
    pi = ps.pi_hat if isinstance(ps, FittedPs) else np.asarray(ps, float)
    pi, nclip = apply_weight_floor(pi, sample.t, floor, clip_weights)
    fun = _aipw_fun(sample, moment, pi, psi_hat, variant)
    theta, it, res = newton_root(fun, _start(moment, theta0), label="AIPW-%s equation" % variant)
    return EstimateResult(theta, "aipw_" + variant.lower(), True, it, res, _pi_diagnostics(pi, sample.t, nclip))


def solve_aipw_general(sample, moment, ps, h: Callable, theta0=None) -> EstimateResult:
    """E~[(1-T) pi Phi/(1-pi) - {(1-T)/(1-pi) - 1} h_theta(U)] = 0 for any h."""
    pi = ps.pi_hat if isinstance(ps, FittedPs) else np.asarray(ps, float)
    t = sample.t
    n = sample.n
    a = ipw_row_weights(pi, t)
    c = ((1 - t) / (1.0 - pi) - 1.0) / n

    def fun(theta):
        return a @ moment.values(sample, theta) - c @ h(theta)

    theta, it, res = newton_root(fun, _start(moment, theta0), label="AIPW equation")
    return EstimateResult(theta, "aipw_general", True, it, res)


# ----------------------------------------------------------------- calibrated


def reg_row_weights(pieces: CalibrationPieces) -> tuple:
    """Row weights for the calibrated regression estimator.

    Returns ``(a, w, kappa)`` with calibration weights
    w_i = n^-1 (1 - pi_i)^-1 [1 - kappa' h_i / (1 - pi_i)] on auxiliary rows,
    kappa = E~(zeta xi')^-1 E~(xi), and a_i = w_i pi_i.
    """
    n = pieces.n
    xi, zeta = pieces.xi, pieces.zeta
    A = zeta.T @ xi / n
    try:
        kappa = sla.solve(A, xi.mean(axis=0))
    except (sla.LinAlgError, ValueError):
        raise SingularMatrixError("E~(xi zeta') is singular") from None
    if not np.all(np.isfinite(kappa)) or np.linalg.cond(A) > 1e14:
        raise SingularMatrixError("E~(xi zeta') is singular")
    aux = pieces.t == 0
    q = 1.0 - pieces.pi
    w = np.where(aux, (1.0 - pieces.h @ kappa / q) / (n * q), 0.0)
    return w * pieces.pi, w, kappa


def lik_row_weights(pieces: CalibrationPieces):
    """Row weights for the calibrated likelihood estimator.

    Returns ``(a, state)`` with a_i = pi_i / {n (1 - w(U_i; lambda~))} on
    auxiliary rows and the solved ElState.
    """
    state = solve_el(pieces)
    return state.aux_weights * pieces.pi, state


def _aug_design(sample, f_spec):
    if isinstance(f_spec, DesignMatrix):
        return f_spec
    return build_design(sample, f_spec, "all")


@dataclass
class _Calibrated:
    aug: FittedAugPs
    pieces: CalibrationPieces
    a: np.ndarray
    extra: dict


def _calibrate(sample, fd, psi_cols, method, include_h2, clip_weights, floor, start):
    aug = fit_augmented_ps(sample, fd, psi_cols, start=start)
    pi, nclip = apply_weight_floor(aug.pi_tilde, sample.t, floor, clip_weights)
    pieces = calibration_pieces(sample.t, pi, fd.values, aug.psi_values, include_h2)
    extra = _pi_diagnostics(pi, sample.t, nclip)
    if method == "reg":
        a, w, kappa = reg_row_weights(pieces)
        extra["min_weight"] = float(w[sample.auxiliary].min())
        extra["n_negative_weights"] = int(np.sum(w[sample.auxiliary] < 0))
    elif method == "lik":
        a, state = lik_row_weights(pieces)
        extra["max_weight"] = float(state.aux_weights.max())
        extra["min_weight"] = float(state.aux_weights[sample.auxiliary].min())
        extra["el_state"] = state
    elif method == "ast":
        a, chi = ast_row_weights(sample.t, aug)
        extra["chi"] = chi
    else:
        raise ValueError(method)
    return _Calibrated(aug, pieces, a, extra)


def _alternate(sample, moment, f_spec, psi_hat, method, include_h2, theta0, clip_weights, floor, primary_term=None):
    """Alternate between the augmented PS fit at the current theta and the
    theta update with the implied row weights held fixed."""
    fd = _aug_design(sample, f_spec)
    if not fd.intercept:
        raise ValueError("augmented PS basis must include the intercept")
    theta = _start(moment, theta0)
    start = None
    extra = primary_term
    for outer in range(1, MAX_OUTER + 1):
        cal = _calibrate(sample, fd, psi_hat(theta), method, include_h2, clip_weights, floor, start)
        start = cal.aug.fit.gamma_hat
        new, _, _ = _weighted_root(moment, sample, cal.a, theta, "%s equation" % method.upper(), extra)
        step = new - theta
        theta = new
        if np.max(np.abs(step)) <= 1e-10 * (1.0 + np.max(np.abs(theta))):
            break
    else:
        raise ConvergenceError("%s alternation did not converge in %d iterations" % (method.upper(), MAX_OUTER))

    # joint residual at the final theta with everything refitted
    cal = _calibrate(sample, fd, psi_hat(theta), method, include_h2, clip_weights, floor, start)
    psi = psi_hat(theta)
    e12, e13 = cal.aug.score_residuals(sample.t, psi)
    eq = cal.a @ moment.values(sample, theta)
    if extra is not None:
        eq = eq + extra(theta)
    res = float(max(e12, e13, np.max(np.abs(eq))))
    converged = res < ROOT_TOL
    if not converged:
        raise ConvergenceError("%s joint residual %.3g above tolerance" % (method.upper(), res))
    diag = dict(cal.extra)
    diag.update(score_residual_f=e12, score_residual_psi=e13, outer_iterations=outer)
    return theta, outer, res, diag, cal


def solve_calibrated_reg(
    sample, moment, f_spec, psi_hat, include_h2=False, theta0=None, clip_weights=False, floor=WEIGHT_FLOOR
) -> EstimateResult:
    """Calibrated regression estimator.

    Solves E~{tau_init(theta) - beta~(theta)' xi~} = 0, alternating with the
    augmented PS fit whose extra regressors are psi_theta(U).
    """
    theta, it, res, diag, cal = _alternate(
        sample, moment, f_spec, psi_hat, "reg", include_h2, theta0, clip_weights, floor
    )
    diag["pieces"] = cal.pieces
    return EstimateResult(theta, "reg", True, it, res, diag)


def solve_calibrated_lik(
    sample, moment, f_spec, psi_hat, include_h2=False, theta0=None, clip_weights=False, floor=WEIGHT_FLOOR
) -> EstimateResult:
    """Calibrated likelihood estimator.

    Solves E~[(1 - T) pi~(U) Phi / {1 - w(U; lambda~)}] = 0 with lambda~ from
    the two-stage empirical-likelihood problem, alternating with the
    augmented PS fit.
    """
    theta, it, res, diag, cal = _alternate(
        sample, moment, f_spec, psi_hat, "lik", include_h2, theta0, clip_weights, floor
    )
    diag["pieces"] = cal.pieces
    return EstimateResult(theta, "lik", True, it, res, diag)


def ast_chi(t, aug: FittedAugPs, tol=ROOT_TOL, max_iter=MAX_NEWTON):
    """Tilting parameter chi solving E~[{(1-T)/w_AST - 1} pi~ psi] = 0.

    Newton with step-halving from chi = 0 over the retained augmented
    regressors.
    """
    t = np.asarray(t)
    psi = aug.aug_regressors
    m = psi.shape[1]
    if m == 0:
        return np.zeros(0), aug.pi_tilde
    n = len(t)
    lin0 = aug.f_values @ aug.gamma_tilde + psi @ aug.delta_tilde
    pit = aug.pi_tilde

    def residual(chi):
        p = expit(lin0 + psi @ chi)
        return psi.T @ (((1 - t) / (1.0 - p) - 1.0) * pit) / n

    def jac(chi):
        p = expit(lin0 + psi @ chi)
        c = (1 - t) * p / (1.0 - p) * pit
        return (psi * c[:, None]).T @ psi / n

    chi, _, _ = newton_root(residual, np.zeros(m), jac, tol=tol, max_iter=max_iter, label="AST tilting")
    return chi, expit(lin0 + psi @ chi)


def ast_row_weights(t, aug: FittedAugPs):
    """a_i = (1 - T_i) pi~_i / {n w_AST(U_i)} with w_AST = 1 - expit(... + chi' psi)."""
    t = np.asarray(t)
    chi, p = ast_chi(t, aug)
    return (1 - t) * aug.pi_tilde / (len(t) * (1.0 - p)), chi


def solve_ast(sample, moment, f_spec, psi_hat, theta0=None, clip_weights=False, floor=WEIGHT_FLOOR) -> EstimateResult:
    """Auxiliary-to-study tilting comparator on the augmented PS."""
    theta, it, res, diag, cal = _alternate(
        sample, moment, f_spec, psi_hat, "ast", False, theta0, clip_weights, floor
    )
    return EstimateResult(theta, "ast", True, it, res, diag)


# ----------------------------------------------------------------- setting II


def solve_setting2(
    sample: MergedSample,
    moment: SeparableMomentModel,
    method: str,
    *,
    ps: FittedPs | np.ndarray | None = None,
    psi_hat: Callable | None = None,
    f_spec=None,
    include_h2=False,
    theta0=None,
    clip_weights=False,
    floor=WEIGHT_FLOOR,
) -> EstimateResult:
    """Separable restrictions: E~{T Phi1} minus the setting-I equation in Phi0.

    ``psi_hat`` is the fitted OR function for Phi0.  OR and AIPW need it,
    IPW and AIPW need ``ps``, REG and LIK need ``f_spec`` and ``psi_hat``.
    """
    method = method.lower()
    m0 = moment.phi0_model
    n = sample.n
    theta0 = _start(m0, theta0)
    prim_term = lambda theta: -moment.primary_mean(sample, theta)

    if method == "or":
        prim = sample.primary

        def fun(theta):
            return moment.primary_mean(sample, theta) - psi_hat(theta)[prim].sum(axis=0) / n

        theta, it, res = newton_root(fun, theta0, label="setting-II OR equation")
        return EstimateResult(theta, "or", True, it, res)
    if method == "ipw":
        pi = ps.pi_hat if isinstance(ps, FittedPs) else np.asarray(ps, float)
        pi, nclip = apply_weight_floor(pi, sample.t, floor, clip_weights)
        a = ipw_row_weights(pi, sample.t)
        # sign flipped so the weighted Phi0 term enters positively
        theta, it, res = _weighted_root(m0, sample, a, theta0, "setting-II IPW equation", prim_term)
        return EstimateResult(theta, "ipw", True, it, res, _pi_diagnostics(pi, sample.t, nclip))
    if method in ("aipw", "aipw_np"):
        pi = ps.pi_hat if isinstance(ps, FittedPs) else np.asarray(ps, float)
        pi, nclip = apply_weight_floor(pi, sample.t, floor, clip_weights)
        inner = _aipw_fun(sample, m0, pi, psi_hat, "NP")

        def fun(theta):
            return moment.primary_mean(sample, theta) - inner(theta)

        theta, it, res = newton_root(fun, theta0, label="setting-II AIPW equation")
        return EstimateResult(theta, "aipw_np", True, it, res, _pi_diagnostics(pi, sample.t, nclip))
    if method in ("reg", "lik"):
        theta, it, res, diag, cal = _alternate(
            sample, m0, f_spec, psi_hat, method, include_h2, theta0, clip_weights, floor, prim_term
        )
        return EstimateResult(theta, method, True, it, res, diag)
    raise ValueError("unknown method %r" % method)
