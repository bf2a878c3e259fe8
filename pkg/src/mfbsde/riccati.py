"""Backward vector Riccati equation for the x-slope of the decoupling field.

    dP/dt = -(b2.P) P - f2 P - b1 P - f1,    P_T = h1
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .problem import ProblemSpec


class RiccatiBlowup(RuntimeError):
    pass


def riccati_rhs(spec: ProblemSpec, t: float, P: np.ndarray) -> np.ndarray:
    b2 = spec.eval_b2(t)
    return -(b2 @ P) * P - spec.eval_f2(t) @ P - spec.eval_b1(t) * P - spec.eval_f1(t)


@dataclass(frozen=True)
class RiccatiSolution:
    tgrid: np.ndarray
    Pvals: np.ndarray  # (steps+1, n)
    dP: np.ndarray  # dP/dt at the nodes, used by the cubic interpolant
    interp: str
    bound: float
    residual: float  # max midpoint ODE residual

    @property
    def T(self) -> float:
        return float(self.tgrid[-1])

    @property
    def n(self) -> int:
        return self.Pvals.shape[1]

    def with_interp(self, interp: str) -> "RiccatiSolution":
        if interp not in ("linear", "cubic"):
            raise ValueError(f"unknown interpolation {interp!r}")
        return RiccatiSolution(self.tgrid, self.Pvals, self.dP, interp, self.bound, self.residual)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t," + ",".join(f"P_{i + 1}" for i in range(self.n)) + "\n")
        for t, p in zip(self.tgrid, self.Pvals):
            buf.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in p) + "\n")
        return buf.getvalue()


def _locate(tgrid: np.ndarray, t):
    """Cell index and local coordinate in [0, 1] for uniform ``tgrid``."""
    t = np.asarray(t, dtype=float)
    T0, T1 = tgrid[0], tgrid[-1]
    if np.any(t < T0 - 1e-12 * max(1.0, abs(T1))) or np.any(t > T1 + 1e-12 * max(1.0, abs(T1))):
        raise ValueError(f"t outside [{T0}, {T1}]")
    N = len(tgrid) - 1
    h = (T1 - T0) / N
    s = (np.clip(t, T0, T1) - T0) / h
    k = np.minimum(np.floor(s).astype(int), N - 1)
    return k, s - k, h


def eval_P(sol: RiccatiSolution, t) -> np.ndarray:
    """Interpolated ``P_t``; exact at grid nodes. ``t`` may be an array."""
    k, u, h = _locate(sol.tgrid, t)
    P0, P1 = sol.Pvals[k], sol.Pvals[k + 1]
    u = np.asarray(u)[..., None]
    if sol.interp == "linear":
        out = P0 + u * (P1 - P0)
    else:
        d0, d1 = sol.dP[k] * h, sol.dP[k + 1] * h
        u2, u3 = u * u, u * u * u
        out = ((2 * u3 - 3 * u2 + 1) * P0 + (u3 - 2 * u2 + u) * d0
               + (-2 * u3 + 3 * u2) * P1 + (u3 - u2) * d1)
    # hit nodes exactly
    return np.where(u == 0.0, P0, out)


def eval_dP(sol: RiccatiSolution, t) -> np.ndarray:
    """Time derivative of the interpolant (linear: cell slope; cubic: Hermite derivative)."""
    k, u, h = _locate(sol.tgrid, t)
    P0, P1 = sol.Pvals[k], sol.Pvals[k + 1]
    u = np.asarray(u)[..., None]
    if sol.interp == "linear":
        return (P1 - P0) / h
    d0, d1 = sol.dP[k] * h, sol.dP[k + 1] * h
    u2 = u * u
    return ((6 * u2 - 6 * u) * P0 + (3 * u2 - 4 * u + 1) * d0
            + (-6 * u2 + 6 * u) * P1 + (3 * u2 - 2 * u) * d1) / h


def solve_riccati(spec: ProblemSpec, steps: int = 1000, interp: str = "linear",
                  blowup_factor: float = 1e6) -> RiccatiSolution:
    """Classical RK4 backward from ``T`` with uniform step ``T/steps``."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if interp not in ("linear", "cubic"):
        raise ValueError(f"unknown interpolation {interp!r}")
    T = spec.T
    tgrid = np.linspace(0.0, T, steps + 1)
    h = T / steps
    P = np.empty((steps + 1, spec.n))
    P[-1] = spec.h1
    limit = blowup_factor * (1.0 + np.linalg.norm(spec.h1))
    f = lambda t, p: riccati_rhs(spec, t, p)
    for k in range(steps, 0, -1):
        t, p = tgrid[k], P[k]
        k1 = f(t, p)
        k2 = f(t - h / 2, p - h / 2 * k1)
        k3 = f(t - h / 2, p - h / 2 * k2)
        k4 = f(t - h, p - h * k3)
        P[k - 1] = p - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(P[k - 1])) or np.linalg.norm(P[k - 1]) > limit:
            raise RiccatiBlowup(f"riccati-blowup at t={tgrid[k - 1]:.6g}")
    P[-1] = spec.h1  # terminal value stays exact
    dP = np.array([f(t, p) for t, p in zip(tgrid, P)])
    sol = RiccatiSolution(tgrid, P, dP, "cubic", float(np.max(np.linalg.norm(P, axis=1))), 0.0)

    # a posteriori check at the midpoints using the Hermite interpolant
    mids = 0.5 * (tgrid[1:] + tgrid[:-1])
    res = np.array([np.max(np.abs(eval_dP(sol, m) - f(m, eval_P(sol, m)))) for m in mids])
    # local truncation proxy: h^3 |P''''| / 384 scale of the Hermite interpolant
    d3 = np.abs(np.diff(dP, n=3, axis=0)) / h ** 3 if steps >= 4 else np.zeros((1, spec.n))
    est = h ** 3 * np.max(d3) / 24.0 + 1e-9 * (1.0 + sol.bound)
    if np.max(res) > 10.0 * est + 1e-6 * (1.0 + sol.bound):
        raise RiccatiBlowup(f"riccati residual {np.max(res):.3e} exceeds truncation estimate; refine steps")
    return RiccatiSolution(tgrid, P, dP, interp, sol.bound, float(np.max(res)))


def riccati_residual(sol: RiccatiSolution, spec: ProblemSpec, t: float, dt: float | None = None) -> np.ndarray:
    """``dP/dt + (b2.P)P + f2 P + b1 P + f1`` with a central difference of step ``dt``."""
    dt = (sol.tgrid[1] - sol.tgrid[0]) if dt is None else dt
    if t - dt < -1e-14 or t + dt > sol.T + 1e-14:
        raise ValueError(f"t={t} too close to the boundary for step {dt}")
    dPdt = (eval_P(sol, t + dt) - eval_P(sol, t - dt)) / (2 * dt)
    return dPdt - riccati_rhs(spec, t, eval_P(sol, t))
