"""Two-sample IV estimators for Y = beta X + beta_c' Z_c + eps, with Y
observed in the primary sample and X only in the auxiliary sample.

With U = (Z, Z_c')' and mu1 = E(UY|T=1), mu2 = E(U Z_c'|T=1),
mu3 = E(UX|T=1), the coefficient vector is beta_dagger = (mu3, mu2)^-1 mu1.
mu1 and mu2 are primary-sample averages; mu3 needs X from the auxiliary
sample and is estimated by any of the data-combination methods.  Here
Phi = UX - mu3 is affine in the unknown, so the augmented PS regressors
m_hat(U) U do not depend on it and every estimator is closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .data import BasisSpec, MergedSample, build_design
from .el import ElState, solve_el
from .errors import EstimationError, SchemaError, SingularMatrixError
from .estimators import ast_row_weights, ipw_row_weights, reg_row_weights
from .glm import FittedAugPs, FittedOr, FittedPs, fit_augmented_ps, fit_or_linear, fit_ps
from .pieces import WEIGHT_FLOOR, CalibrationPieces, apply_weight_floor, calibration_pieces

log = logging.getLogger(__name__)

IDENTITY_TOL = 1e-8
MU3_METHODS = ("tsivpooled", "or", "ipw", "aipw", "reg", "lik", "ast")
ALL_METHODS = ("tsiv", "ts2sls", "or", "ipw", "aipw", "reg", "lik", "ast")


@dataclass(frozen=True, eq=False)
class IvProblem:
    """Columns of a merged sample arranged for the IV model.

    ``u`` stacks the instrument first, then the exogenous columns; no
    intercept is added (include a constant column among ``exog`` if wanted).
    """

    sample: MergedSample
    instrument: str
    exog: tuple = ()
    y_name: str | None = None
    x_name: str | None = None

    def __post_init__(self):
        exog = tuple(self.exog)
        object.__setattr__(self, "exog", exog)
        if self.instrument in exog:
            raise SchemaError("instrument %r also listed as exogenous" % self.instrument)
        if len(set(exog)) != len(exog):
            raise SchemaError("duplicate exogenous columns")
        for name in (self.instrument,) + exog:
            if name not in self.sample.u_names:
                raise SchemaError("unknown common column %r" % name)

    @property
    def k(self) -> int:
        return 1 + len(self.exog)

    @property
    def u(self) -> np.ndarray:
        return np.column_stack([self.sample.ucol(c) for c in (self.instrument,) + self.exog])

    @property
    def zc(self) -> np.ndarray:
        if not self.exog:
            return np.zeros((self.sample.n, 0))
        return np.column_stack([self.sample.ucol(c) for c in self.exog])

    @property
    def y(self) -> np.ndarray:
        return self.sample.ycol(self.y_name)

    @property
    def x(self) -> np.ndarray:
        return self.sample.xcol(self.x_name)

    def ux(self) -> np.ndarray:
        """U X on auxiliary rows, zero on primary rows."""
        aux = self.sample.auxiliary
        out = np.zeros((self.sample.n, self.k))
        out[aux] = self.u[aux] * self.x[aux, None]
        return out


@dataclass
class MuEstimates:
    mu1: np.ndarray
    mu2: np.ndarray
    mu3: np.ndarray
    method_tag: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def matrix(self) -> np.ndarray:
        """(mu3, mu2) assembled columnwise, k x k."""
        return np.column_stack([self.mu3, self.mu2])


def estimate_mu12(problem: IvProblem):
    """Primary-sample averages mu1 = E~(TUY)/E~(T), mu2 = E~(TUZc')/E~(T)."""
    prim = problem.sample.primary
    if prim.sum() < problem.k:
        raise SchemaError("primary sample smaller than dim(U)")
    u = problem.u[prim]
    mu1 = u.T @ problem.y[prim] / len(u)
    mu2 = u.T @ problem.zc[prim] / len(u)
    return mu1, mu2


@dataclass
class IvFits:
    """Working-model fits shared by the mu3 estimators."""

    ps: FittedPs | None = None
    orfit: FittedOr | None = None
    aug: FittedAugPs | None = None
    pieces: CalibrationPieces | None = None
    el: ElState | None = None
    errors: dict = field(default_factory=dict)

    def psi(self, problem) -> np.ndarray:
        """Augmented regressors m_hat(U) U."""
        return self.orfit.m_hat[:, None] * problem.u


_NEEDS = {
    "tsiv": (),
    "ts2sls": (),
    "tsivpooled": (),
    "or": ("or",),
    "ipw": ("ps",),
    "aipw": ("ps", "or"),
    "reg": ("or", "aug"),
    "lik": ("or", "aug", "el"),
    "ast": ("or", "aug"),
}


def fit_iv_models(
    problem: IvProblem,
    ps_spec: BasisSpec | None,
    or_spec: BasisSpec | None,
    methods=ALL_METHODS,
    include_h2=False,
    clip_weights=False,
    floor=WEIGHT_FLOOR,
) -> IvFits:
    """Fit only what ``methods`` need; failures are stored per component."""
    needs = set()
    for m in methods:
        needs.update(_NEEDS[m])
    fits = IvFits()
    sample = problem.sample
    if "ps" in needs or "aug" in needs:
        if ps_spec is None:
            raise ValueError("PS terms required")
    if "or" in needs and or_spec is None:
        raise ValueError("OR terms required")
    if "ps" in needs:
        try:
            fits.ps = fit_ps(sample, ps_spec)
        except EstimationError as exc:
            fits.errors["ps"] = exc
    if "or" in needs:
        try:
            fits.orfit = fit_or_linear(sample, or_spec, problem.x_name)
        except EstimationError as exc:
            fits.errors["or"] = exc
    if "aug" in needs and fits.orfit is not None:
        try:
            fd = build_design(sample, ps_spec, "all")
            fits.aug = fit_augmented_ps(sample, fd, fits.psi(problem))
            pi, nclip = apply_weight_floor(fits.aug.pi_tilde, sample.t, floor, clip_weights)
            fits.pieces = calibration_pieces(sample.t, pi, fd.values, fits.aug.psi_values, include_h2)
            fits.errors["aug_clipped"] = nclip
        except EstimationError as exc:
            fits.errors["aug"] = exc
    if "el" in needs and fits.pieces is not None:
        try:
            fits.el = solve_el(fits.pieces)
        except EstimationError as exc:
            fits.errors["el"] = exc
    return fits


def _require(fits, name):
    obj = {"ps": fits.ps, "or": fits.orfit, "aug": fits.pieces, "el": fits.el}[name]
    if obj is None:
        err = fits.errors.get(name) or fits.errors.get("aug")
        if isinstance(err, EstimationError):
            raise type(err)(str(err))
        raise EstimationError("%s fit unavailable" % name)
    return obj


def _pi_summary(pi, t, nclip=0):
    aux = np.asarray(t) == 0
    return {
        "min_pi": float(pi.min()),
        "max_pi": float(pi.max()),
        "max_inverse_weight": float(np.max(1.0 / (1.0 - pi[aux]))),
        "n_clipped": int(nclip),
    }


def reg_mu3(problem: IvProblem, pieces: CalibrationPieces):
    """Calibrated regression mu3 in ratio form E~(eta - beta'xi)/E~(rho - kappa'xi).

    Returns ``(ratio_form, simplified_form, denominator)`` where the
    simplified form divides by E~(T) instead.
    """
    t = problem.sample.t
    eta = pieces.tau_init(problem.ux())
    rho = pieces.odds_weight * pieces.pi
    xi, zeta = pieces.xi, pieces.zeta
    n = pieces.n
    A = xi.T @ zeta / n
    try:
        lu = sla.lu_factor(A)
    except (sla.LinAlgError, ValueError):
        raise SingularMatrixError("E~(xi zeta') is singular") from None
    if np.linalg.cond(A) > 1e14:
        raise SingularMatrixError("E~(xi zeta') is singular")
    beta = sla.lu_solve(lu, xi.T @ eta / n)
    kappa = sla.lu_solve(lu, xi.T @ rho / n)
    num = (eta - xi @ beta).mean(axis=0)
    den = float(np.mean(rho - xi @ kappa))
    return num / den, num / np.mean(t), den


def estimate_mu3(
    problem: IvProblem,
    method: str,
    fits: IvFits | None = None,
    clip_weights=False,
    floor=WEIGHT_FLOOR,
) -> MuEstimates:
    """mu3 = E(UX|T=1) by one of ``MU3_METHODS``."""
    method = method.lower()
    if method not in MU3_METHODS:
        raise ValueError("unknown mu3 method %r" % method)
    sample = problem.sample
    t = sample.t
    n = sample.n
    aux = sample.auxiliary
    ux = problem.ux()
    mu1, mu2 = estimate_mu12(problem)
    pt = float(np.mean(t))
    diag = {}
    fits = fits or IvFits()

    if method == "tsivpooled":
        mu3 = ux[aux].mean(axis=0)
    elif method == "or":
        orfit = _require(fits, "or")
        prim = sample.primary
        mu3 = (problem.u[prim] * orfit.m_hat[prim, None]).mean(axis=0)
    elif method in ("ipw", "aipw"):
        ps = _require(fits, "ps")
        pi, nclip = apply_weight_floor(ps.pi_hat, t, floor, clip_weights)
        diag.update(_pi_summary(pi, t, nclip))
        a = ipw_row_weights(pi, t)
        if method == "ipw":
            mu3 = a @ ux / a.sum()
        else:
            orfit = _require(fits, "or")
            c = ((1 - t) / (1.0 - pi) - 1.0) / n
            mu3 = (a @ ux - c @ fits.psi(problem)) / pt
    elif method == "reg":
        pieces = _require(fits, "aug")
        ratio, simple, den = reg_mu3(problem, pieces)
        gap = abs(den - pt)
        diag["denominator_identity_gap"] = gap
        if gap > IDENTITY_TOL:
            log.warning("REG denominator identity off by %.3g", gap)
        _, w, _ = reg_row_weights(pieces)
        diag.update(_pi_summary(pieces.pi, t, fits.errors.get("aug_clipped", 0)))
        diag["min_weight"] = float(w[aux].min())
        diag["n_negative_weights"] = int(np.sum(w[aux] < 0))
        mu3 = simple
    elif method == "lik":
        pieces = _require(fits, "aug")
        state = _require(fits, "el")
        a = state.aux_weights * pieces.pi
        gap = abs(a.sum() - pt)
        diag["denominator_identity_gap"] = float(gap)
        if gap > IDENTITY_TOL:
            log.warning("LIK denominator identity off by %.3g", gap)
        diag.update(_pi_summary(pieces.pi, t, fits.errors.get("aug_clipped", 0)))
        diag["max_weight"] = float(state.aux_weights[aux].max())
        diag["min_weight"] = float(state.aux_weights[aux].min())
        mu3 = a @ ux / pt
    else:  # ast
        _require(fits, "aug")
        a, chi = ast_row_weights(t, fits.aug)
        diag.update(_pi_summary(fits.aug.pi_tilde, t))
        mu3 = a @ ux / a.sum()
    return MuEstimates(mu1, mu2, np.asarray(mu3, float), method, diag)


def beta_from_mu(mu: MuEstimates) -> np.ndarray:
    """beta_dagger = (mu3, mu2)^-1 mu1; the first entry is the coefficient on X."""
    M = mu.matrix
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > 1e12:
        raise SingularMatrixError("(mu3, mu2) is singular; instrument signal too weak")
    return np.linalg.solve(M, mu.mu1)


def tsiv_classic(problem: IvProblem) -> np.ndarray:
    """{n0^-1 sum_aux U (X, Zc')}^-1 {n1^-1 sum_prim U Y}."""
    aux = problem.sample.auxiliary
    u = problem.u[aux]
    M = u.T @ np.column_stack([problem.x[aux], problem.zc[aux]]) / len(u)
    mu1, _ = estimate_mu12(problem)
    if np.linalg.cond(M) > 1e12:
        raise SingularMatrixError("auxiliary moment matrix is singular")
    return np.linalg.solve(M, mu1)


def first_stage(problem: IvProblem) -> np.ndarray:
    """Least-squares coefficients of X on U over auxiliary rows."""
    aux = problem.sample.auxiliary
    alpha, _, rank, _ = np.linalg.lstsq(problem.u[aux], problem.x[aux], rcond=None)
    if rank < problem.k:
        raise SingularMatrixError("first-stage design is rank deficient")
    return alpha


def ts2sls(problem: IvProblem) -> np.ndarray:
    """First stage X on U (auxiliary), second stage Y on (X_hat, Zc) (primary)."""
    alpha = first_stage(problem)
    prim = problem.sample.primary
    W = np.column_stack([problem.u[prim] @ alpha, problem.zc[prim]])
    beta, _, rank, _ = np.linalg.lstsq(W, problem.y[prim], rcond=None)
    if rank < problem.k:
        raise SingularMatrixError("second-stage design is rank deficient")
    return beta


def instrument_strength(problem: IvProblem) -> float:
    """|corr(X, Z)| on the auxiliary sample (weak-instrument proxy)."""
    aux = problem.sample.auxiliary
    z = problem.sample.ucol(problem.instrument)[aux]
    x = problem.x[aux]
    if np.std(z) == 0 or np.std(x) == 0:
        return 0.0
    return float(abs(np.corrcoef(x, z)[0, 1]))


@dataclass
class IvEstimate:
    method: str
    beta: np.ndarray | None
    mu: MuEstimates | None = None
    converged: bool = True
    error: str | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.converged and self.beta is not None and bool(np.all(np.isfinite(self.beta)))


def estimate_iv(
    problem: IvProblem,
    methods=ALL_METHODS,
    ps_spec: BasisSpec | None = None,
    or_spec: BasisSpec | None = None,
    include_h2=False,
    clip_weights=False,
    fits: IvFits | None = None,
) -> dict:
    """Run each method; failures are recorded per method, never raised."""
    methods = tuple(m.lower() for m in methods)
    for m in methods:
        if m not in ALL_METHODS:
            raise ValueError("unknown estimator %r" % m)
    if fits is None:
        fits = fit_iv_models(problem, ps_spec, or_spec, methods, include_h2, clip_weights)
    out = {}
    for m in methods:
        try:
            if m == "tsiv":
                out[m] = IvEstimate(m, tsiv_classic(problem))
            elif m == "ts2sls":
                out[m] = IvEstimate(m, ts2sls(problem))
            else:
                mu = estimate_mu3(problem, m, fits, clip_weights)
                out[m] = IvEstimate(m, beta_from_mu(mu), mu, diagnostics=dict(mu.diagnostics))
        except EstimationError as exc:
            out[m] = IvEstimate(m, None, converged=False, error="%s: %s" % (type(exc).__name__, exc))
    return out
