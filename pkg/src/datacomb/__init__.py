"""Estimation with data combination: moment restrictions whose variables
are split between a primary and an auxiliary sample."""

__version__ = "0.1.0"

from .data import BasisSpec, DesignMatrix, MergedSample, build_design, ingest_csv, write_csv
from .el import ElState, solve_el
from .errors import (
    ConvergenceError,
    EstimationError,
    FeasibilityError,
    SchemaError,
    SeparationError,
    SingularMatrixError,
    WeightFloorError,
)
from .estimators import (
    EstimateResult,
    MomentModel,
    SeparableMomentModel,
    plugin_psi,
    solve_aipw,
    solve_aipw_general,
    solve_ast,
    solve_calibrated_lik,
    solve_calibrated_reg,
    solve_ipw,
    solve_or,
    solve_setting2,
)
from .glm import FittedAugPs, FittedOr, FittedPs, fit_augmented_ps, fit_logistic, fit_or_linear, fit_ps
from .inference import BootstrapReport, bootstrap, sandwich_cov, sandwich_se
from .pieces import CalibrationPieces, calibration_pieces
from .tsiv import IvProblem, MuEstimates, beta_from_mu, estimate_iv, estimate_mu12, estimate_mu3, ts2sls, tsiv_classic

__all__ = [
    "__version__",
    "BasisSpec",
    "DesignMatrix",
    "MergedSample",
    "build_design",
    "ingest_csv",
    "write_csv",
    "ElState",
    "solve_el",
    "ConvergenceError",
    "EstimationError",
    "FeasibilityError",
    "SchemaError",
    "SeparationError",
    "SingularMatrixError",
    "WeightFloorError",
    "EstimateResult",
    "MomentModel",
    "SeparableMomentModel",
    "plugin_psi",
    "solve_aipw",
    "solve_aipw_general",
    "solve_ast",
    "solve_calibrated_lik",
    "solve_calibrated_reg",
    "solve_ipw",
    "solve_or",
    "solve_setting2",
    "FittedAugPs",
    "FittedOr",
    "FittedPs",
    "fit_augmented_ps",
    "fit_logistic",
    "fit_or_linear",
    "fit_ps",
    "BootstrapReport",
    "bootstrap",
    "sandwich_cov",
    "sandwich_se",
    "CalibrationPieces",
    "calibration_pieces",
    "IvProblem",
    "MuEstimates",
    "beta_from_mu",
    "estimate_iv",
    "estimate_mu12",
    "estimate_mu3",
    "ts2sls",
    "tsiv_classic",
]
