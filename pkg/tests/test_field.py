from __future__ import annotations

import numpy as np
import pytest

from mfbsde.field import (SolverConfig, build_field, eval_dPhi, eval_Phi, phi_pde_residual, solve_fbode,
                          solve_fbode_batch, solve_variational)
from mfbsde.problem import preset_example2
from mfbsde.riccati import eval_P, solve_riccati


def test_example1b_zero_field(ex1b, ex1b_field):
    fs = ex1b_field.Phi
    assert np.max(np.abs(eval_Phi(fs, 0.3, np.array([0.0])))) < 1e-12
    tr = solve_fbode(ex1b, ex1b_field.P, 0.0, 0.0)
    assert tr.converged and np.max(np.abs(tr.nu)) == 0 and np.max(np.abs(tr.phi)) == 0


def test_fbode_satisfies_mean_system(ex3):
    """Trajectory means (nu, P nu + phi) solve the closed system of means."""
    P = solve_riccati(ex3, steps=400)
    tr = solve_fbode(ex3, P, 0.0, 0.7)
    tg = tr.tgrid
    y = eval_P(P, tg) * tr.nu[:, None] + tr.phi
    dt = tg[1] - tg[0]
    mid = 0.5 * (tg[1:] + tg[:-1])
    xm, ym = 0.5 * (tr.nu[1:] + tr.nu[:-1]), 0.5 * (y[1:] + y[:-1])
    fwd = np.diff(tr.nu) / dt - np.array([ex3.eval_b1(t) * x + ex3.eval_b2(t) @ yy + ex3.eval_b0(t, x, yy)
                                         for t, x, yy in zip(mid, xm, ym)])
    assert np.max(np.abs(fwd)) < 1e-4
    assert np.allclose(y[-1], ex3.h1 * tr.nu[-1] + ex3.eval_h2(np.array([tr.nu[-1]]))[0], atol=1e-12)


def test_batch_matches_single(ex3):
    P = solve_riccati(ex3, steps=100)
    tg, nu, phi = solve_fbode_batch(ex3, P, 0.2, [-0.5, 0.5])
    single = solve_fbode(ex3, P, 0.2, 0.5)
    assert np.allclose(nu[1], single.nu, atol=1e-9) and np.allclose(phi[1], single.phi, atol=1e-9)


@pytest.mark.parametrize("nu0", [-0.8, 0.3])
def test_variational_matches_finite_difference(ex3, nu0):
    P = solve_riccati(ex3, steps=100)
    cfg = SolverConfig(tol=1e-12)
    tr = solve_fbode(ex3, P, 0.25, nu0, cfg)
    gn, gp = solve_variational(ex3, P, tr, cfg)
    h = 1e-4
    a = solve_fbode(ex3, P, 0.25, nu0 + h, cfg)
    b = solve_fbode(ex3, P, 0.25, nu0 - h, cfg)
    fd_phi = (a.phi[0] - b.phi[0]) / (2 * h)
    assert abs(gp[0, 0] - fd_phi[0]) <= 1e-3 * max(1e-8, abs(fd_phi[0]))
    assert np.allclose(gn, (a.nu - b.nu) / (2 * h), atol=1e-6)
    assert gn[0] == pytest.approx(1.0)


def test_field_matches_pointwise_solves(ex3, ex3_field):
    fs, P = ex3_field.Phi, ex3_field.P
    for k in (0, 20):
        t = float(fs.tgrid[k])
        for nu in (-1.0, 0.6):
            tr = solve_fbode(ex3, P, t, nu)
            assert np.allclose(eval_Phi(fs, t, np.array([nu]))[0], tr.phi[0], atol=1e-6)
    d = eval_dPhi(fs, 0.3, np.array([0.1]))[0, 0]
    e = (eval_Phi(fs, 0.3, np.array([0.1 + 1e-3])) - eval_Phi(fs, 0.3, np.array([0.1 - 1e-3])))[0, 0] / 2e-3
    assert d == pytest.approx(e, rel=1e-3)


def test_phi_pde_residual_first_order(ex3):
    res = []
    for steps in (20, 40):
        P = solve_riccati(ex3, steps=steps)
        fs = build_field(ex3, P, np.linspace(0, 1, steps + 1), np.linspace(-1, 1, 21))
        res.append(np.max(np.abs(phi_pde_residual(fs, ex3, P, 0.5, np.linspace(-0.9, 0.9, 7)))))
    assert res[1] <= 0.6 * res[0]
    _, flag = phi_pde_residual(fs, ex3, P, 0.0, np.array([0.0]), return_flag=True)
    assert flag
    with pytest.raises(ValueError):
        phi_pde_residual(fs, ex3, P, 1.0, np.array([0.0]))
    with pytest.raises(ValueError):
        phi_pde_residual(fs, ex3, P, 0.5, np.array([5.0]))


def test_workers_are_deterministic(ex3):
    P = solve_riccati(ex3, steps=20)
    tg, ng = np.linspace(0, 1, 21), np.linspace(-1, 1, 11)
    a = build_field(ex3, P, tg, ng, SolverConfig(workers=1))
    b = build_field(ex3, P, tg, ng, SolverConfig(workers=3))
    assert np.array_equal(a.Phi, b.Phi) and np.array_equal(a.dPhi, b.dPhi)
    assert a.to_csv().splitlines()[0] == "t,nu,Phi_1,dPhi_1"


def test_build_field_validates_grids(ex3):
    P = solve_riccati(ex3, steps=10)
    with pytest.raises(ValueError):
        build_field(ex3, P, np.linspace(0, 1, 11), np.array([0.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        build_field(ex3, P, np.linspace(0, 0.5, 11), np.linspace(-1, 1, 5))


def test_example2_field_lipschitz():
    s = preset_example2(-1.0, 0.5, 0.5, 0.5, 1.0)
    P = solve_riccati(s, steps=50)
    fs = build_field(s, P, np.linspace(0, 1, 51), np.linspace(-1, 1, 21))
    assert np.isfinite(fs.lip_estimate) and fs.lip_estimate <= 10
