from __future__ import annotations

import math

import numpy as np
import pytest

from mfbsde.field import solve_fbode
from mfbsde.oracle import OracleConfig, OracleDivergence, cross_check, pair_residual, solve_expectation_system
from mfbsde.problem import preset_example1, zero_spec
from mfbsde.riccati import eval_P, solve_riccati


def test_zero_problem():
    path = solve_expectation_system(zero_spec(), 0.0, np.linspace(0, 1, 11))
    assert path.status == "converged" and np.all(path.xbar == 0) and np.all(path.ybar == 0)


def test_converges_and_agrees_with_fbode(ex3):
    tg = np.linspace(0, 1, 201)
    path = solve_expectation_system(ex3, 0.5, tg)
    assert path.status == "converged" and path.fixed_point_gap < 1e-7
    P = solve_riccati(ex3, steps=200)
    tr = solve_fbode(ex3, P, 0.0, 0.5)
    assert np.max(np.abs(path.xbar - tr.nu)) < 1e-4
    assert np.max(np.abs(path.ybar - (eval_P(P, tg) * tr.nu[:, None] + tr.phi))) < 1e-4


def test_cross_check_with_field(ex3, ex3_field):
    path = solve_expectation_system(ex3, 0.5, ex3_field.Phi.tgrid)
    assert cross_check(ex3, ex3_field.P, ex3_field.Phi, path) < 1e-3
    assert path.to_csv().splitlines()[0] == "t,xbar,ybar_1"


def test_example1a_is_not_a_contraction():
    s = preset_example1(1.0, 1.0, 1.0, math.pi / 4)
    try:
        path = solve_expectation_system(s, 0.0, np.linspace(0, s.T, 101))
    except OracleDivergence:
        return
    assert not path.converged
    assert path.status in ("non_contraction", "multiple_fixed_points") and path.fixed_point_gap > 1e-3


def test_closed_form_pair_residual():
    s = preset_example1(1.0, 1.0, 1.0, math.pi / 4)
    steps = 200
    dt = s.T / steps
    fwd, bwd, term = pair_residual(s, math.sin, lambda t: math.cos(t), steps)
    assert np.max(np.abs(fwd)) <= 5 * dt and np.max(np.abs(bwd)) <= 5 * dt
    assert np.max(np.abs(term)) < 1e-6


def test_divergence_raises():
    s = zero_spec().replace(b2=lambda t: np.array([50.0]), f1=lambda t: np.array([-50.0]), K=50.0)
    with pytest.raises(OracleDivergence):
        solve_expectation_system(s, 1.0, np.linspace(0, 1, 9), OracleConfig(max_halvings=1, max_iter=200))
