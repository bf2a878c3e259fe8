from __future__ import annotations

import numpy as np
import pytest

from mfbsde.problem import LQCoefficients, preset_example1, preset_example3, zero_spec
from mfbsde.riccati import RiccatiBlowup, eval_dP, eval_P, riccati_residual, solve_riccati


@pytest.mark.parametrize("lam, theta", [(0.0, 0.0), (0.5, 0.25), (1.0, 1.0)])
def test_linear_closed_form(lam, theta):
    s = preset_example1(-1.0, lam, theta, 1.5)
    sol = solve_riccati(s, steps=300)
    t = np.linspace(0, 1.5, 97)
    assert np.max(np.abs(eval_P(sol, t)[:, 0] - ((1 - theta) + (1 - lam) * (1.5 - t)))) <= 1e-10


def test_quadratic_closed_form():
    s = preset_example3(LQCoefficients(A=0, B=1, R=1, Q=0, G=1, T=1.0))
    sol = solve_riccati(s, steps=1000)
    assert np.max(np.abs(sol.Pvals[:, 0] - 1 / (1 + 1 - sol.tgrid))) <= 1e-8


def test_interpolation_exact_at_nodes_and_cubic_better():
    s = preset_example3(LQCoefficients(A=0, B=1, R=1, Q=0, G=1, T=1.0))
    lin = solve_riccati(s, steps=20)
    cub = lin.with_interp("cubic")
    assert np.array_equal(eval_P(lin, lin.tgrid), lin.Pvals)
    assert np.allclose(eval_P(cub, lin.tgrid), lin.Pvals, atol=1e-15, rtol=0)
    mid = 0.5 * (lin.tgrid[:-1] + lin.tgrid[1:])
    exact = 1 / (2 - mid)
    assert np.max(np.abs(eval_P(cub, mid)[:, 0] - exact)) < 0.01 * np.max(np.abs(eval_P(lin, mid)[:, 0] - exact))
    assert np.allclose(eval_dP(cub, mid)[:, 0], 1 / (2 - mid) ** 2, rtol=1e-4)


def test_residual_is_small(ex3):
    sol = solve_riccati(ex3, steps=200)
    for t in (0.1, 0.5, 0.9):
        assert np.all(np.abs(riccati_residual(sol, ex3, t)) < 1e-4)
    with pytest.raises(ValueError):
        riccati_residual(sol, ex3, 0.0)


def test_blowup():
    s = zero_spec(T=2.0).replace(b2=lambda t: np.array([-1.0]), h1=np.array([1.0]))
    solve_riccati(s, steps=200)  # P' = P^2 backwards from 1 stays bounded: P = 1/(1 + T - t)
    bad = zero_spec(T=2.0).replace(b2=lambda t: np.array([1.0]), h1=np.array([1.0]))
    with pytest.raises(RiccatiBlowup, match="riccati-blowup at t="):
        solve_riccati(bad, steps=400)


def test_vector_case_and_csv():
    s = zero_spec(n=2).replace(f1=lambda t: np.array([1.0, 2.0]), h1=np.array([0.5, 0.0]))
    sol = solve_riccati(s, steps=10)
    assert np.allclose(sol.Pvals[0], [1.5, 2.0])
    lines = sol.to_csv().splitlines()
    assert lines[0] == "t,P_1,P_2" and len(lines) == 12
