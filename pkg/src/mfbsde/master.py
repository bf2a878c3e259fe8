"""Decoupling field ``U(t, x, nu) = P_t x + Phi(t, nu)`` and the master-equation residual."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .field import FieldSolution, eval_dPhi, eval_Phi, phi_pde_residual, time_step
from .problem import ProblemSpec
from .riccati import RiccatiSolution, eval_P, riccati_residual


@dataclass(frozen=True)
class MasterField:
    P: RiccatiSolution
    Phi: FieldSolution

    @property
    def T(self) -> float:
        return self.P.T


@dataclass(frozen=True)
class StencilConfig:
    """Finite-difference steps; ``None`` takes the field grid spacing."""

    dt: float | None = None
    richardson: bool = False


def eval_U(mf: MasterField, t, x, nu) -> np.ndarray:
    """``P_t x + Phi(t, nu)``; ``x`` and ``nu`` broadcast, output has a trailing n axis."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    x, nu = np.broadcast_arrays(x, nu)
    return eval_P(mf.P, t) * x[..., None] + eval_Phi(mf.Phi, t, nu)


def mean_value(mf: MasterField, t, nu) -> np.ndarray:
    """``E[U(t, eta, nu)]`` for any ``eta`` with mean ``nu``, by linearity in x."""
    nu = np.asarray(nu, dtype=float)
    return eval_P(mf.P, t) * nu[..., None] + eval_Phi(mf.Phi, t, nu)


def recover_Z(mf: MasterField, spec: ProblemSpec, t, x, nu) -> np.ndarray:
    """``Z = P_t (outer) sigma(t, x, U, nu, E[U])`` with shape ``(..., n, d)``."""
    x = np.asarray(x, dtype=float)
    nu = np.broadcast_to(np.asarray(nu, dtype=float), x.shape)
    U = eval_U(mf, t, x, nu)
    sig = spec.eval_sigma(t, x, U, nu, mean_value(mf, t, nu))
    return eval_P(mf.P, t)[..., :, None] * sig[..., None, :]


def _dt(mf: MasterField, stencil: StencilConfig | None) -> float:
    if stencil is not None and stencil.dt is not None:
        return stencil.dt
    return time_step(mf.Phi)


def master_residual(mf: MasterField, spec: ProblemSpec, t: float, x, nu,
                    stencil: StencilConfig | None = None) -> np.ndarray:
    """Residual of the master equation at ``(t, x, nu)``.

    ``d_t U`` is a central difference; ``d_xx U`` vanishes identically, so the
    diffusion term drops.  The mean of U enters through :func:`mean_value`.
    """
    dt = _dt(mf, stencil)
    T0, T = mf.Phi.tgrid[0], mf.T
    if t - dt < T0 - 1e-12 or t + dt > T + 1e-12:
        raise ValueError(f"t={t} is not interior for step {dt}")
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < mf.Phi.nugrid[0]) or np.any(nu > mf.Phi.nugrid[-1]):
        raise ValueError("nu outside the field grid")
    x, nu = np.broadcast_arrays(np.asarray(x, dtype=float), nu)

    def dtU(h):
        return (eval_U(mf, t + h, x, nu) - eval_U(mf, t - h, x, nu)) / (2 * h)

    if stencil is not None and stencil.richardson:
        d_t = (4 * dtU(dt) - dtU(2 * dt)) / 3 if t - 2 * dt >= T0 - 1e-12 and t + 2 * dt <= T + 1e-12 else dtU(dt)
    else:
        d_t = dtU(dt)

    Pt = eval_P(mf.P, t)
    U = eval_U(mf, t, x, nu)
    ybar = mean_value(mf, t, nu)
    b1, b2, f1, f2 = spec.eval_b1(t), spec.eval_b2(t), spec.eval_f1(t), spec.eval_f2(t)
    b0 = spec.eval_b0(t, nu, ybar)
    f0 = spec.eval_f0(t, nu, ybar)
    drift_x = b1 * x + U @ b2 + b0
    drift_nu = b1 * nu + ybar @ b2 + b0
    return (d_t + Pt * drift_x[..., None] + eval_dPhi(mf.Phi, t, nu) * drift_nu[..., None]
            + f1 * x[..., None] + U @ f2.T + f0)


def decomposition_gap(mf: MasterField, spec: ProblemSpec, t: float, x, nu) -> float:
    """max |master - x * riccati - phi| with matching central differences."""
    dt = time_step(mf.Phi)
    x, nu = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(nu, dtype=float))
    m = master_residual(mf, spec, t, x, nu)
    r = riccati_residual(mf.P, spec, t, dt)
    p = phi_pde_residual(mf.Phi, spec, mf.P, t, nu)
    return float(np.max(np.abs(m - x[..., None] * r - p)))


@dataclass
class ResidualMap:
    t: np.ndarray
    x: np.ndarray
    nu: np.ndarray
    res: np.ndarray  # (..., n)

    @property
    def max(self) -> float:
        return float(np.max(np.abs(self.res)))

    @property
    def mean(self) -> float:
        return float(np.mean(np.abs(self.res)))

    def to_csv(self) -> str:
        n = self.res.shape[-1]
        buf = io.StringIO()
        buf.write("t,x,nu," + ",".join(f"res_{i + 1}" for i in range(n)) + "\n")
        for t, x, v, r in zip(self.t.ravel(), self.x.ravel(), self.nu.ravel(), self.res.reshape(-1, n)):
            buf.write(f"{t:.17g},{x:.17g},{v:.17g}," + ",".join(f"{q:.17g}" for q in r) + "\n")
        buf.write(f"# max={self.max:.17g} mean={self.mean:.17g}\n")
        return buf.getvalue()


def residual_map(mf: MasterField, spec: ProblemSpec, xs, t_index=None, nu_index=None) -> ResidualMap:
    """Master residual over interior time nodes, the given x values and interior nu nodes."""
    tg, ng = mf.Phi.tgrid, mf.Phi.nugrid
    t_index = np.arange(1, len(tg) - 1) if t_index is None else np.asarray(t_index)
    nu_index = np.arange(1, len(ng) - 1) if nu_index is None else np.asarray(nu_index)
    xs = np.asarray(xs, dtype=float)
    X, NU = np.meshgrid(xs, ng[nu_index], indexing="ij")
    T_, R_ = [], []
    for k in t_index:
        R_.append(master_residual(mf, spec, float(tg[k]), X, NU))
        T_.append(np.full(X.shape, tg[k]))
    n = spec.n
    res = np.stack(R_) if R_ else np.zeros((0,) + X.shape + (n,))
    return ResidualMap(np.stack(T_) if T_ else np.zeros((0,) + X.shape),
                       np.broadcast_to(X, res.shape[:-1]).copy(),
                       np.broadcast_to(NU, res.shape[:-1]).copy(), res)
