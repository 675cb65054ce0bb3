"""Per-row ingredients shared by the calibrated regression and likelihood
estimators: the calibration variables v, the vector h, and the derived
xi / zeta columns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import select_independent, PRUNE_TOL
from .errors import WeightFloorError

WEIGHT_FLOOR = 1e-6


def apply_weight_floor(pi, t, floor=WEIGHT_FLOOR, clip=False):
    """Check ``1 - pi >= floor`` on auxiliary rows.

    Returns ``(pi_used, n_clipped)``.  Without ``clip`` a breach raises
    WeightFloorError; with it the offending values are pulled to ``1 - floor``.
    """
    pi = np.asarray(pi, dtype=float)
    bad = (np.asarray(t) == 0) & (1.0 - pi < floor)
    nbad = int(bad.sum())
    if nbad == 0:
        return pi, 0
    if not clip:
        raise WeightFloorError(
            "%d auxiliary rows have 1 - pi < %g (min 1 - pi = %.3g)"
            % (nbad, floor, float(np.min(1.0 - pi[bad])))
        )
    pi = pi.copy()
    pi[bad] = 1.0 - floor
    return pi, nbad


@dataclass(frozen=True, eq=False)
class CalibrationPieces:
    """Calibration quantities evaluated at the current fitted augmented PS.

    ``h`` stacks ``h1 = pi * v`` (first ``d1`` columns) and, when
    ``include_h2`` is set, ``h2 = pi (1 - pi) (f, psi)``.  Redundant columns
    are removed, keeping the leading ``pi`` column of ``v``.
    """

    t: np.ndarray
    pi: np.ndarray
    v: np.ndarray
    h: np.ndarray
    d1: int
    include_h2: bool
    kept: tuple = ()

    @property
    def n(self):
        return len(self.t)

    @property
    def h1(self):
        return self.h[:, : self.d1]

    @property
    def h2(self):
        return self.h[:, self.d1:]

    @property
    def odds_weight(self):
        """(1 - T) / (1 - pi), zero on primary rows."""
        return (1 - self.t) / (1.0 - self.pi)

    @property
    def xi(self):
        return ((self.odds_weight - 1.0) / self.pi)[:, None] * self.h

    @property
    def zeta(self):
        return (self.odds_weight / self.pi)[:, None] * self.h

    def tau_init(self, phi):
        """(1 - T) pi Phi / (1 - pi) for per-row moment values ``phi`` (n, k).

        Primary rows contribute zero whatever ``phi`` holds there.
        """
        phi = np.where((self.t == 0)[:, None], np.asarray(phi, float).reshape(self.n, -1), 0.0)
        return (self.odds_weight * self.pi)[:, None] * phi


def calibration_pieces(t, pi_tilde, f_values, psi, include_h2=False, kept=None) -> CalibrationPieces:
    """Assemble v and h, dropping redundant columns.

    ``kept`` fixes the retained columns of the unpruned h (as recorded on a
    previous result) instead of selecting them afresh.
    """
    t = np.asarray(t)
    pi = np.asarray(pi_tilde, dtype=float)
    n = len(t)
    psi = np.asarray(psi, dtype=float).reshape(n, -1)
    F = np.asarray(f_values, dtype=float).reshape(n, -1)
    v = np.hstack([pi[:, None], pi[:, None] * psi])
    h1 = pi[:, None] * v
    blocks = [h1]
    if include_h2:
        blocks.append((pi * (1.0 - pi))[:, None] * np.hstack([F, psi]))
    h = np.hstack(blocks)
    dv = v.shape[1]
    groups = [[0], list(range(1, dv))]
    if include_h2:
        groups.append(list(range(dv, h.shape[1])))
    if kept is None:
        kept = select_independent(h, groups, PRUNE_TOL)
    kept = list(kept)
    kept1 = [j for j in kept if j < dv]
    return CalibrationPieces(
        t=t,
        pi=pi,
        v=v[:, kept1],
        h=h[:, kept],
        d1=len(kept1),
        include_h2=include_h2,
        kept=tuple(kept),
    )
