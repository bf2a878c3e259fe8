"""Independent solver for the closed system of means.

    xbar' = b1 xbar + b2.ybar + b0(t, xbar, ybar),              xbar_0 = nu0
    ybar' = -(f1 xbar + f2 ybar + f0(t, xbar, ybar)),           ybar_T = h1 xbar_T + h2(xbar_T)

Solved by damped Picard iteration with a second-order (Heun) sweep in each
direction and interval halving on divergence.  Nothing here touches the
Riccati or Phi machinery; :func:`cross_check` only *reads* those solutions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .problem import ProblemSpec


class OracleDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    tol: float = 1e-10
    max_iter: int = 2000
    damping: float = 0.5
    max_halvings: int = 12
    growth_patience: int = 10
    growth_margin: float = 0.05  # per-iteration growth above 1 + margin counts as divergence
    stall_patience: int = 100  # consecutive iterations with update ratio near 1
    # initial ybar curves: the zero curve and the constant-one curve
    guesses: tuple = (0.0, 1.0)
    separation_factor: float = 1e3  # fixed points further apart than this * tol are distinct


@dataclass
class ExpectationPath:
    tgrid: np.ndarray
    xbar: np.ndarray  # (m+1,)
    ybar: np.ndarray  # (m+1, n)
    converged: bool
    status: str  # converged | multiple_fixed_points | non_contraction
    fixed_point_gap: float = 0.0
    runs: tuple = ()  # (xbar, ybar) per initial guess

    def to_csv(self) -> str:
        n = self.ybar.shape[1]
        buf = io.StringIO()
        buf.write("t,xbar," + ",".join(f"ybar_{i + 1}" for i in range(n)) + "\n")
        for t, x, y in zip(self.tgrid, self.xbar, self.ybar):
            buf.write(f"{t:.17g},{x:.17g}," + ",".join(f"{v:.17g}" for v in y) + "\n")
        return buf.getvalue()


class _Stall(Exception):
    def __init__(self, growing, x=None, y=None):
        self.growing = growing
        self.x, self.y = x, y


def _fwd(spec, t, x, y):
    return spec.eval_b1(t) * x + y @ spec.eval_b2(t) + spec.eval_b0(t, x, y)


def _bwd(spec, t, x, y):
    return -(spec.eval_f1(t) * x[:, None] + y @ spec.eval_f2(t).T + spec.eval_f0(t, x, y))


def _picard(spec, tg, x0, yinit, terminal, cfg: OracleConfig):
    """Batched damped Picard on ``tg``; rows are independent runs."""
    R, m = len(x0), len(tg) - 1
    y = np.array(yinit, dtype=float)  # (R, m+1, n)
    x = np.repeat(x0[:, None], m + 1, axis=1)
    prev = np.full(R, np.inf)
    growth = np.zeros(R, dtype=int)
    stall = np.zeros(R, dtype=int)
    done = np.zeros(R, dtype=bool)
    for _ in range(cfg.max_iter):
        xn = np.empty_like(x)
        xn[:, 0] = x0
        for k in range(m):
            h = tg[k + 1] - tg[k]
            a = _fwd(spec, tg[k], xn[:, k], y[:, k])
            xp = xn[:, k] + h * a
            xn[:, k + 1] = xn[:, k] + 0.5 * h * (a + _fwd(spec, tg[k + 1], xp, y[:, k + 1]))
        yn = np.empty_like(y)
        yn[:, m] = terminal(xn[:, m])
        for k in range(m - 1, -1, -1):
            h = tg[k + 1] - tg[k]
            a = _bwd(spec, tg[k + 1], xn[:, k + 1], yn[:, k + 1])
            yp = yn[:, k + 1] - h * a
            yn[:, k] = yn[:, k + 1] - 0.5 * h * (a + _bwd(spec, tg[k], xn[:, k], yp))
        yn = y + cfg.damping * (yn - y)
        upd = np.maximum(np.abs(xn - x).max(axis=1), np.abs(yn - y).max(axis=(1, 2)))
        scale = np.maximum(1.0, np.maximum(np.abs(xn).max(axis=1), np.abs(yn).max(axis=(1, 2))))
        live = ~done
        x = np.where(live[:, None], xn, x)
        y = np.where(live[:, None, None], yn, y)
        done |= live & (upd < cfg.tol * scale)
        with np.errstate(invalid="ignore"):
            ratio = upd / prev
        growth = np.where(live & (ratio > 1.0 + cfg.growth_margin), growth + 1, 0)
        stall = np.where(live & ~done & (ratio > 0.99), stall + 1, 0)
        prev = np.where(live, upd, prev)
        if np.any(~np.isfinite(upd)) or np.any(growth >= cfg.growth_patience):
            raise _Stall(True)
        if done.all():
            return x, y
        if np.any(stall >= cfg.stall_patience):
            raise _Stall(False, x, y)
    raise _Stall(False, x, y)


class _NonContraction(OracleDivergence):
    def __init__(self, msg, x, y):
        super().__init__(msg)
        self.x, self.y = x, y


def _solve(spec, tg, x0, yinit_fn, terminal, cfg, depth):
    try:
        return _picard(spec, tg, x0, yinit_fn(tg), terminal, cfg)
    except _Stall as st:
        if not st.growing:
            raise _NonContraction(f"non-contraction on [{tg[0]:.6g}, {tg[-1]:.6g}]: "
                                  "Picard updates stopped shrinking", st.x, st.y) from None
        if depth >= cfg.max_halvings or len(tg) <= 2:
            raise OracleDivergence(f"divergence on [{tg[0]:.6g}, {tg[-1]:.6g}] after {depth} halvings") from None
    mid = (len(tg) - 1) // 2
    head, tail = tg[: mid + 1], tg[mid:]
    warm = {}

    def tail_init(t):
        return warm["y"] if "y" in warm else yinit_fn(t)

    def term_mid(xm):
        # warm start: consecutive head iterates move the tail's initial mean only slightly
        x, y = _solve(spec, tail, xm, tail_init, terminal, cfg, depth + 1)
        warm["y"] = y
        return y[:, 0]

    xh, yh = _solve(spec, head, x0, yinit_fn, term_mid, cfg, depth + 1)
    xt, yt = _solve(spec, tail, xh[:, -1], yinit_fn, terminal, cfg, depth + 1)
    return np.concatenate([xh[:, :-1], xt], axis=1), np.concatenate([yh[:, :-1], yt], axis=1)


def solve_expectation_system(spec: ProblemSpec, nu0: float, tgrid, cfg: OracleConfig | None = None) -> ExpectationPath:
    """Solve for the means from every initial guess in ``cfg.guesses``.

    Distinct limits are reported as ``multiple_fixed_points``; a run that
    neither converges nor diverges is reported as ``non_contraction``.
    Divergence after the maximal number of halvings raises.
    """
    cfg = cfg or OracleConfig()
    tg = np.asarray(tgrid, dtype=float)
    n = spec.n
    G = len(cfg.guesses)
    x0 = np.full(G, float(nu0))
    guesses = np.asarray(cfg.guesses, dtype=float)

    def yinit(t):
        return np.broadcast_to(guesses[:, None, None], (G, len(t), n)).copy()

    def terminal(xT):
        return spec.h1[None, :] * xT[:, None] + spec.eval_h2(xT)

    try:
        x, y = _solve(spec, tg, x0, yinit, terminal, cfg, 0)
    except _NonContraction as err:
        if err.x is None or err.x.shape[1] != len(tg):
            raise
        x, y = err.x, err.y
        gap = float(max(np.abs(x - x[:1]).max(), np.abs(y - y[:1]).max()))
        return ExpectationPath(tg, x[0], y[0], False, "non_contraction", gap,
                               tuple((x[i], y[i]) for i in range(G)))
    gap = float(max(np.abs(x - x[:1]).max(), np.abs(y - y[:1]).max()))
    distinct = gap > cfg.separation_factor * cfg.tol
    status = "multiple_fixed_points" if distinct else "converged"
    return ExpectationPath(tg, x[0], y[0], not distinct, status, gap, tuple((x[i], y[i]) for i in range(G)))


def cross_check(spec: ProblemSpec, P, fs, path: ExpectationPath) -> float:
    """``max_s |ybar_s - P_s xbar_s - Phi(s, xbar_s)|`` along the oracle path."""
    from .field import eval_Phi
    from .riccati import eval_P

    Ps = eval_P(P, path.tgrid)
    Phi = eval_Phi(fs, path.tgrid, path.xbar)
    return float(np.max(np.abs(path.ybar - Ps * path.xbar[:, None] - Phi)))


def pair_residual(spec: ProblemSpec, xbar_fn, ybar_fn, steps: int):
    """Explicit-Euler residuals of a candidate mean pair on a uniform grid.

    Returns ``(forward (steps,), backward (steps, n), terminal (n,))`` where
    the step residuals are in rate form ``(z_{k+1} - z_k)/dt - rhs(t_k)``.
    """
    tg = np.linspace(0.0, spec.T, steps + 1)
    dt = spec.T / steps
    x = np.array([float(xbar_fn(t)) for t in tg])
    y = np.array([np.atleast_1d(ybar_fn(t)).astype(float) for t in tg])
    fwd = np.array([(x[k + 1] - x[k]) / dt - _fwd(spec, tg[k], x[k:k + 1], y[k:k + 1])[0] for k in range(steps)])
    bwd = np.array([(y[k + 1] - y[k]) / dt - _bwd(spec, tg[k], x[k:k + 1], y[k:k + 1])[0] for k in range(steps)])
    term = y[-1] - spec.h1 * x[-1] - spec.eval_h2(x[-1:])[0]
    return fwd, bwd, term
