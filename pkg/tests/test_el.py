import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import root

from datacomb.el import (
    el_objective,
    el_weights,
    kappa_hessian,
    kappa_residual,
    l_gradient,
    l_objective,
    maximize_kappa,
    maximize_l,
    solve_el,
)
from datacomb.pieces import CalibrationPieces

from helpers import toy_pieces


def test_zero_h_gives_zero_lambda():
    t = np.r_[np.ones(10), np.zeros(10)]
    pi = np.linspace(0.2, 0.8, 20)
    pc = CalibrationPieces(t, pi, np.zeros((20, 0)), np.zeros((20, 0)), 0, False)
    lam, omega = maximize_l(pc)
    assert lam.size == 0
    np.testing.assert_array_equal(omega, pi)


def test_lambda_matches_first_order_oracle():
    _, _, pc = toy_pieces(n1=20, n0=20, seed=3, include_h2=True)
    lam, _ = maximize_l(pc)
    sol = root(lambda x: l_gradient(pc, x), np.zeros(pc.h.shape[1]), method="hybr", options={"xtol": 1e-13})
    assert sol.success
    np.testing.assert_allclose(lam, sol.x, atol=1e-5)


def test_el_and_l_differ_by_constant():
    _, _, pc = toy_pieces(include_h2=True)
    rng = np.random.default_rng(0)
    lam_hat, _ = maximize_l(pc)
    diffs = []
    while len(diffs) < 20:
        lam = lam_hat + rng.normal(scale=0.05, size=lam_hat.shape)
        a, b = el_objective(pc, lam), l_objective(pc, lam)
        if np.isfinite(a) and np.isfinite(b):
            diffs.append(a - b)
    assert np.ptp(diffs) < 1e-10


def test_el_probabilities():
    _, _, pc = toy_pieces(include_h2=True)
    st_ = solve_el(pc)
    assert abs(st_.p_hat.sum() - 1) < 1e-8
    assert np.max(np.abs(st_.p_hat @ pc.xi)) < 1e-8
    zero = el_weights(pc, np.zeros(pc.h.shape[1]), np.zeros(pc.h.shape[1]))
    np.testing.assert_allclose(zero.p_hat, 1 / pc.n)


def test_weight_reexpression():
    """p_i (1-T) pi/(1-pi) equals n^-1 (1-T) pi / (1 - w(U; lambda_hat)) rowwise."""
    _, _, pc = toy_pieces(include_h2=True)
    st_ = solve_el(pc)
    lhs = st_.p_hat * pc.odds_weight * pc.pi
    rhs = (1 - pc.t) * pc.pi / (pc.n * (1 - st_.omega_hat))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("include_h2", [False, True])
def test_stage2_calibration_and_feasibility(include_h2):
    s, _, pc = toy_pieces(include_h2=include_h2)
    st_ = solve_el(pc)
    aux = s.auxiliary
    assert st_.feasible
    assert np.all(st_.omega_hat[~aux] > 0) and np.all(st_.omega_hat[aux] < 1)
    assert np.all(st_.omega_tilde[aux] < 1)
    assert np.all(st_.aux_weights[aux] >= 0)
    np.testing.assert_allclose(st_.aux_weights[aux] @ pc.v[aux], pc.v.mean(axis=0), atol=1e-8)
    assert np.max(np.abs(kappa_residual(pc, st_.lambda_hat, st_.lambda_tilde[: pc.d1]))) < 1e-8
    H = kappa_hessian(pc, st_.lambda_hat, st_.lambda_tilde[: pc.d1])
    assert np.max(np.linalg.eigvalsh(H)) <= 1e-10


def test_stage2_fixed_point():
    _, _, pc = toy_pieces(include_h2=True)
    lam_hat, _ = maximize_l(pc)
    lam1, _ = maximize_kappa(pc, lam_hat)
    # restarting from a point that already solves the stage-2 condition stays there
    start = np.concatenate([lam1, lam_hat[pc.d1:]])
    again, _ = maximize_kappa(pc, start)
    np.testing.assert_allclose(again, lam1, atol=1e-12)


def test_iterates_feasible_and_increasing():
    _, _, pc = toy_pieces(include_h2=True, shift=1.0)
    trace = []
    lam_hat, _ = maximize_l(pc, trace=trace)
    vals = [f for _, f in trace]
    assert all(b >= a - 1e-14 for a, b in zip(vals, vals[1:]))
    for lam, _ in trace:
        om = pc.pi + pc.h @ lam
        assert np.all(om[pc.t == 1] > 0) and np.all(om[pc.t == 0] < 1)
    trace2 = []
    lam1, _ = maximize_kappa(pc, lam_hat, trace=trace2)
    for lam, _ in trace2:
        om = pc.pi + pc.h1 @ lam + pc.h2 @ lam_hat[pc.d1:]
        assert np.all(om[pc.t == 0] < 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_stage1_invariant_to_column_scaling(seed, c):
    _, _, pc = toy_pieces(seed=seed % 50, include_h2=True)
    j = seed % pc.h.shape[1]
    h2 = pc.h.copy()
    h2[:, j] *= c
    pc2 = CalibrationPieces(pc.t, pc.pi, pc.v, h2, pc.d1, True)
    _, om1 = maximize_l(pc)
    _, om2 = maximize_l(pc2)
    np.testing.assert_allclose(om1, om2, atol=1e-8)
