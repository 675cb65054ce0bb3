import numpy as np

from datacomb.data import BasisSpec, build_design
from datacomb.glm import fit_augmented_ps, fit_or_linear
from datacomb.pieces import calibration_pieces

from conftest import toy_sample


def toy_pieces(n1=40, n0=40, seed=0, include_h2=False, shift=0.5):
    """Calibration pieces from an augmented PS fit on a toy sample."""
    s = toy_sample(n1=n1, n0=n0, seed=seed, shift=shift)
    spec = BasisSpec.parse(["1", "u0", "u1"])
    fd = build_design(s, spec)
    m = fit_or_linear(s, BasisSpec.parse(["1", "u0"])).m_hat
    psi = np.column_stack([m * s.u[:, 0], m * s.u[:, 1]])
    aug = fit_augmented_ps(s, fd, psi)
    pieces = calibration_pieces(s.t, aug.pi_tilde, fd.values, aug.psi_values, include_h2)
    return s, aug, pieces
