"""Mean-level forward-backward ODE, the decoupling component Phi and its nu-derivative.

Along the means ``nu = E[X]`` and ``phi = E[Y] - P nu`` the system reduces to

    nu'  = (b1 + b2.P) nu + b2.phi + b0(s, nu, P nu + phi),           nu_t = nu
    phi' = -f2 phi - P (b2.phi) - f0(s, nu, P nu + phi) - P b0(...),  phi_T = h2(nu_T)

and ``Phi(t, nu) = phi_t`` for the solution started at ``(t, nu)``.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .problem import ProblemSpec
from .riccati import RiccatiSolution, eval_P


class FbodeDivergence(RuntimeError):
    def __init__(self, window, factor, message="fbode-divergence"):
        self.window = window
        self.factor = factor
        super().__init__(f"{message} window=[{window[0]:.6g}, {window[1]:.6g}] factor={factor:.4g}")


class VariationalSingular(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 200
    window: float | None = None  # initial Picard window length for solve_fbode; None = whole interval
    field_window_steps: int = 20  # grid steps per pasting window in build_field
    max_halvings: int = 12
    damping: float = 0.5
    growth_patience: int = 10
    workers: int = 1


@dataclass
class FbodeTrajectory:
    tgrid: np.ndarray
    nu: np.ndarray  # (m+1,)
    phi: np.ndarray  # (m+1, n)
    converged: bool
    iterations: int
    contraction_factor: float


# -- small interpolation helpers ---------------------------------------------------------


def _lagrange_weights(nodes, x):
    w = np.ones(len(nodes))
    for i, a in enumerate(nodes):
        for j, b in enumerate(nodes):
            if i != j:
                w[i] *= (x - b) / (a - b)
    return w


# weights of the midpoint k + 1/2 for stencils of q nodes starting at k + 1/2 - p
_MID_W = {(q, p): _lagrange_weights(np.arange(q), p)
          for q in (2, 3, 4) for p in (0.5, 1.5, 2.5) if p < q - 1}


def _midpoint_stencil(W, start, k):
    """4-point (or shorter) stencils for the midpoint of step ``k`` inside ``[start, W]``.

    Returns indices and weights of shape ``(R, 4)``; unused slots carry weight 0.
    """
    start = np.asarray(start)
    q = np.minimum(4, W - start + 1)
    b = np.minimum(np.maximum(k - 1, start), W - q + 1)
    p = k + 0.5 - b
    idx = np.minimum(b[:, None] + np.arange(4)[None, :], W)
    wts = np.zeros((len(start), 4))
    for (qq, pp), w in _MID_W.items():
        sel = (q == qq) & (p == pp)
        if np.any(sel):
            wts[sel, :qq] = w
    return idx, wts


def _hermite_basis(u):
    u2, u3 = u * u, u * u * u
    return (2 * u3 - 3 * u2 + 1, u3 - 2 * u2 + u, -2 * u3 + 3 * u2, u3 - u2)


def _hermite_dbasis(u):
    u2 = u * u
    return (6 * u2 - 6 * u, 3 * u2 - 4 * u + 1, -6 * u2 + 6 * u, 3 * u2 - 2 * u)


class _Slice:
    """Cubic Hermite interpolant in nu of one time slice, linear outside the grid."""

    def __init__(self, nugrid, vals, ders):
        self.g = nugrid
        self.v = vals  # (J, n)
        self.d = ders

    def __call__(self, nu, deriv=False):
        g = self.g
        nu = np.asarray(nu, dtype=float)
        j = np.clip(np.searchsorted(g, nu, side="right") - 1, 0, len(g) - 2)
        h = (g[j + 1] - g[j])[..., None]
        u = ((nu - g[j]) / (g[j + 1] - g[j]))[..., None]
        v0, v1, d0, d1 = self.v[j], self.v[j + 1], self.d[j] * h, self.d[j + 1] * h
        lo, hi = nu < g[0], nu > g[-1]
        if not deriv:
            H = _hermite_basis(u)
            out = H[0] * v0 + H[1] * d0 + H[2] * v1 + H[3] * d1
            out = np.where(lo[..., None], self.v[0] + self.d[0] * (nu - g[0])[..., None], out)
            out = np.where(hi[..., None], self.v[-1] + self.d[-1] * (nu - g[-1])[..., None], out)
        else:
            H = _hermite_dbasis(u)
            out = (H[0] * v0 + H[1] * d0 + H[2] * v1 + H[3] * d1) / h
            out = np.where(lo[..., None], self.d[0], out)
            out = np.where(hi[..., None], self.d[-1], out)
        return out, lo | hi


# -- batched Picard solve on one window ----------------------------------------------------


class _Coeffs:
    """Time-only coefficients on the nodes and midpoints of a window."""

    def __init__(self, spec: ProblemSpec, P: RiccatiSolution, tnodes):
        Pc = P.with_interp("cubic")
        W = len(tnodes) - 1
        tm = 0.5 * (tnodes[1:] + tnodes[:-1])
        tt = np.empty(2 * W + 1)
        tt[0::2] = tnodes
        tt[1::2] = tm
        self.t = tt  # even entries: nodes, odd: midpoints
        self.P = eval_P(Pc, np.clip(tt, 0.0, P.T))
        self.b1 = np.array([spec.eval_b1(t) for t in tt])
        self.b2 = np.array([spec.eval_b2(t) for t in tt])
        self.f2 = np.array([spec.eval_f2(t) for t in tt])
        self.a = self.b1 + np.einsum("ki,ki->k", self.b2, self.P)


def _nu_rhs(spec, c: _Coeffs, q, nu, phi):
    P = c.P[q]
    b0 = spec.eval_b0(c.t[q], nu, P * nu[:, None] + phi)
    return c.a[q] * nu + phi @ c.b2[q] + b0


def _phi_rhs(spec, c: _Coeffs, q, nu, phi):
    P = c.P[q]
    ybar = P * nu[:, None] + phi
    b0 = spec.eval_b0(c.t[q], nu, ybar)
    f0 = spec.eval_f0(c.t[q], nu, ybar)
    return -phi @ c.f2[q].T - np.outer(phi @ c.b2[q], P) - f0 - b0[:, None] * P


def _window_solve(spec, c: _Coeffs, start, nu0, terminal, cfg: SolverConfig, init=None):
    """Picard iteration for rows started at node ``start[r]`` with ``nu = nu0[r]``.

    ``terminal(nu_W) -> phi_W``.  Returns ``(nu (R, W+1), phi (R, W+1, n), iters, factor)``.
    Rows are independent: each freezes once converged.
    """
    R = len(nu0)
    W = (len(c.t) - 1) // 2
    n = spec.n
    h = c.t[2] - c.t[0]
    rows = np.arange(R)[:, None]
    act = [(k >= start) for k in range(W)]
    stencils = [_midpoint_stencil(W, start, k) for k in range(W)]
    mid_idx = [s[0] for s in stencils]
    mid_w = [s[1] for s in stencils]

    if init is not None and init[1].shape == (R, W + 1, n):
        nu, phi = np.array(init[0], dtype=float), np.array(init[1], dtype=float)
    else:
        nu = np.repeat(nu0[:, None], W + 1, axis=1)
        phi = np.repeat(terminal(nu0)[:, None, :], W + 1, axis=1)
    omega = np.ones(R)
    growth = np.zeros(R, dtype=int)
    prev = np.full(R, np.inf)
    done = np.zeros(R, dtype=bool)
    iters = np.zeros(R, dtype=int)
    factor = np.zeros(R)
    restarted = np.zeros(R, dtype=bool)
    valid = np.arange(W + 1)[None, :] >= start[:, None]

    for it in range(1, cfg.max_iter + 1):
        # forward sweep for nu with the current phi curve
        nu_new = nu.copy()
        for k in range(W):
            pm = np.einsum("rj,rjn->rn", mid_w[k], phi[rows, mid_idx[k]])
            x = nu_new[:, k]
            k1 = _nu_rhs(spec, c, 2 * k, x, phi[:, k])
            k2 = _nu_rhs(spec, c, 2 * k + 1, x + 0.5 * h * k1, pm)
            k3 = _nu_rhs(spec, c, 2 * k + 1, x + 0.5 * h * k2, pm)
            k4 = _nu_rhs(spec, c, 2 * k + 2, x + h * k3, phi[:, k + 1])
            nu_new[:, k + 1] = np.where(act[k], x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), x)
        # backward sweep for phi with the new nu curve
        phi_new = np.empty_like(phi)
        phi_new[:, W] = terminal(nu_new[:, W])
        for k in range(W - 1, -1, -1):
            num = np.einsum("rj,rj->r", mid_w[k], nu_new[rows, mid_idx[k]])
            y = phi_new[:, k + 1]
            k1 = _phi_rhs(spec, c, 2 * k + 2, nu_new[:, k + 1], y)
            k2 = _phi_rhs(spec, c, 2 * k + 1, num, y - 0.5 * h * k1)
            k3 = _phi_rhs(spec, c, 2 * k + 1, num, y - 0.5 * h * k2)
            k4 = _phi_rhs(spec, c, 2 * k, nu_new[:, k], y - h * k3)
            phi_new[:, k] = np.where(act[k][:, None], y - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), y)
        phi_new = phi + omega[:, None, None] * (phi_new - phi)

        dphi = np.where(valid[..., None], np.abs(phi_new - phi), 0.0).max(axis=(1, 2))
        dnu = np.where(valid, np.abs(nu_new - nu), 0.0).max(axis=1)
        upd = np.maximum(dphi, dnu)
        scale = np.maximum(1.0, np.maximum(np.abs(nu_new).max(axis=1), np.abs(phi_new).max(axis=(1, 2))))
        live = ~done
        nu = np.where(live[:, None], nu_new, nu)
        phi = np.where(live[:, None, None], phi_new, phi)
        iters = np.where(live, it, iters)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(prev > 0, upd / prev, 0.0)
        factor = np.where(live & np.isfinite(ratio), ratio, factor)

        conv = live & (upd < cfg.tol * scale)
        done |= conv
        grew = live & ~conv & (upd > prev)
        growth = np.where(grew, growth + 1, np.where(live, 0, growth))
        prev = np.where(live, upd, prev)
        bad = live & (~np.isfinite(upd) | (growth >= cfg.growth_patience))
        if np.any(bad & restarted):
            r = int(np.argmax(bad & restarted))
            raise FbodeDivergence((c.t[2 * int(start[r])], c.t[-1]), float(factor[r]))
        if np.any(bad):
            # damped restart from the initial guess
            omega = np.where(bad, cfg.damping, omega)
            restarted |= bad
            growth = np.where(bad, 0, growth)
            prev = np.where(bad, np.inf, prev)
            nu = np.where(bad[:, None], nu0[:, None], nu)
            phi = np.where(bad[:, None, None], terminal(nu0)[:, None, :], phi)
        if done.all():
            break
    if not done.all():
        r = int(np.argmin(done))
        raise FbodeDivergence((c.t[2 * int(start[r])], c.t[-1]), float(factor[r]),
                              message=f"fbode-divergence (no convergence in {cfg.max_iter} iterations)")
    return nu, phi, iters, factor


# -- variational system ------------------------------------------------------------------------


def _var_matrix(spec, c: _Coeffs, q, nu, phi):
    """Linearised generator ``A`` of shape (R, 1+n, 1+n) at sub-node ``q``."""
    P = c.P[q]
    n = spec.n
    t = c.t[q]
    ybar = P * nu[:, None] + phi
    gbx, gby = spec.grad_b0(t, nu, ybar)  # (R,), (R, n)
    gfx, gfy = spec.grad_f0(t, nu, ybar)  # (R, n), (R, n, n)
    b2 = c.b2[q]
    R = len(nu)
    A = np.empty((R, 1 + n, 1 + n))
    dbx = gbx + gby @ P  # total x-derivative of b0 along ybar = P nu + phi
    A[:, 0, 0] = c.a[q] + dbx
    A[:, 0, 1:] = b2 + gby
    A[:, 1:, 0] = -(gfx + gfy @ P) - dbx[:, None] * P
    A[:, 1:, 1:] = (-c.f2[q] - np.outer(P, b2))[None] - gfy - P[None, :, None] * gby[:, None, :]
    return A


def _variational(spec, c: _Coeffs, start, nu, phi, gterm):
    """Fundamental-matrix solve; returns (grad_nu (R, W+1), grad_phi (R, W+1, n)).

    ``gterm (R, n)`` is the derivative of the terminal map at ``nu_W``.
    """
    R, W1 = nu.shape
    W = W1 - 1
    n = spec.n
    h = c.t[2] - c.t[0]
    rows = np.arange(R)[:, None]
    I = np.broadcast_to(np.eye(1 + n), (R, 1 + n, 1 + n))
    Psi = np.empty((R, W + 1, 1 + n, 1 + n))
    Psi[:, 0] = I
    for k in range(W):
        mi, mw = _midpoint_stencil(W, start, k)
        num = np.einsum("rj,rj->r", mw, nu[rows, mi])
        phm = np.einsum("rj,rjn->rn", mw, phi[rows, mi])
        A0 = _var_matrix(spec, c, 2 * k, nu[:, k], phi[:, k])
        Am = _var_matrix(spec, c, 2 * k + 1, num, phm)
        A1 = _var_matrix(spec, c, 2 * k + 2, nu[:, k + 1], phi[:, k + 1])
        Y = Psi[:, k]
        k1 = A0 @ Y
        k2 = Am @ (Y + 0.5 * h * k1)
        k3 = Am @ (Y + 0.5 * h * k2)
        k4 = A1 @ (Y + h * k3)
        stepped = Y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        Psi[:, k + 1] = np.where((k >= start)[:, None, None], stepped, I)
    # Psi[:, k] maps the state at start to the state at node k (identity before start)
    PW = Psi[:, W]
    psi_nn, psi_nf = PW[:, 0, 0], PW[:, 0, 1:]
    psi_fn, psi_ff = PW[:, 1:, 0], PW[:, 1:, 1:]
    Mat = psi_ff - gterm[:, :, None] * psi_nf[:, None, :]
    rhs = gterm * psi_nn[:, None] - psi_fn
    cond = np.linalg.cond(Mat)
    if not np.all(np.isfinite(cond)) or np.any(cond > 1e12):
        r = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise VariationalSingular(f"variational-singular at t={c.t[2 * int(start[r])]:.6g} (cond={cond[r]:.3g})")
    q = np.linalg.solve(Mat, rhs[..., None])[..., 0]
    init = np.concatenate([np.ones((R, 1)), q], axis=1)
    states = np.einsum("rkij,rj->rki", Psi, init)
    return states[:, :, 0], states[:, :, 1:]


# -- single trajectories ---------------------------------------------------------------------


def _trajectory_grid(P: RiccatiSolution, t0: float, steps: int | None):
    T = P.T
    if not (0.0 <= t0 < T):
        raise ValueError(f"t0={t0} must lie in [0, {T})")
    if steps is None:
        hP = P.tgrid[1] - P.tgrid[0]
        steps = max(1, int(np.ceil((T - t0) / hP - 1e-9)))
    return np.linspace(t0, T, steps + 1)


def _solve_nodes(spec, P, tnodes, nu0, terminal, cfg, depth, force_len=None, init=None):
    """Solve over ``tnodes`` for all rows (start 0), halving on divergence.

    The head of a split interval uses the tail solve as its terminal operator.
    """
    too_long = force_len is not None and tnodes[-1] - tnodes[0] > force_len * (1 + 1e-12)
    if not too_long:
        c = _Coeffs(spec, P, tnodes)
        try:
            nu, phi, it, fac = _window_solve(spec, c, np.zeros(len(nu0), dtype=int), nu0, terminal, cfg, init)
            return nu, phi, int(it.max()), float(fac.max())
        except FbodeDivergence:
            if depth >= cfg.max_halvings or len(tnodes) <= 2:
                raise
    mid = (len(tnodes) - 1) // 2
    head_nodes, tail_nodes = tnodes[: mid + 1], tnodes[mid:]
    warm = {}

    def term_mid(nu_m):
        # warm start from the previous tail solution keeps nested solves cheap
        nu, phi, _, _ = _solve_nodes(spec, P, tail_nodes, nu_m, terminal, cfg, depth + 1, force_len,
                                     warm.get("sol"))
        warm["sol"] = (nu, phi)
        return phi[:, 0]

    nu_h, phi_h, it_h, f_h = _solve_nodes(spec, P, head_nodes, nu0, term_mid, cfg, depth + 1, force_len)
    nu_t, phi_t, it_t, f_t = _solve_nodes(spec, P, tail_nodes, nu_h[:, -1], terminal, cfg, depth + 1, force_len)
    nu = np.concatenate([nu_h[:, :-1], nu_t], axis=1)
    phi = np.concatenate([phi_h[:, :-1], phi_t], axis=1)
    return nu, phi, max(it_h, it_t), max(f_h, f_t)


def solve_fbode(spec: ProblemSpec, P: RiccatiSolution, t0: float, nu0: float,
                cfg: SolverConfig | None = None, steps: int | None = None) -> FbodeTrajectory:
    """Solve the mean-level FBODE from ``(t0, nu0)`` to ``T``.

    The grid spacing follows P's grid unless ``steps`` is given.  Picard
    iteration runs on the whole interval (or on ``cfg.window``-long pieces)
    and the interval is halved recursively on divergence.
    """
    cfg = cfg or SolverConfig()
    tnodes = _trajectory_grid(P, t0, steps)
    terminal = lambda v: spec.eval_h2(v)
    nu, phi, it, fac = _solve_nodes(spec, P, tnodes, np.array([float(nu0)]), terminal, cfg, 0, cfg.window)
    return FbodeTrajectory(tnodes, nu[0], phi[0], True, it, fac)


def solve_fbode_batch(spec, P, t0, nu0s, cfg: SolverConfig | None = None, steps=None):
    """Vectorised :func:`solve_fbode` over initial means; returns (tgrid, nu (R, m+1), phi (R, m+1, n))."""
    cfg = cfg or SolverConfig()
    tnodes = _trajectory_grid(P, t0, steps)
    nu, phi, _, _ = _solve_nodes(spec, P, tnodes, np.asarray(nu0s, dtype=float),
                                 lambda v: spec.eval_h2(v), cfg, 0, cfg.window)
    return tnodes, nu, phi


def solve_variational(spec: ProblemSpec, P: RiccatiSolution, traj: FbodeTrajectory,
                      cfg: SolverConfig | None = None):
    """Derivatives of the trajectory with respect to its initial mean.

    Returns ``(grad_nu (m+1,), grad_phi (m+1, n))``; ``grad_phi[0]`` is ``d Phi/d nu``.
    """
    c = _Coeffs(spec, P, traj.tgrid)
    g = spec.dh2(traj.nu[-1:])
    gn, gp = _variational(spec, c, np.zeros(1, dtype=int), traj.nu[None], traj.phi[None], g)
    return gn[0], gp[0]


# -- gridded field -------------------------------------------------------------------------------


@dataclass
class FieldSolution:
    tgrid: np.ndarray  # (Nt+1,)
    nugrid: np.ndarray  # (J,)
    Phi: np.ndarray  # (Nt+1, J, n)
    dPhi: np.ndarray
    lip_estimate: float
    extrapolated: int = 0  # terminal look-ups that left the nu grid during the build

    @property
    def n(self) -> int:
        return self.Phi.shape[2]

    def to_csv(self) -> str:
        n = self.n
        buf = io.StringIO()
        buf.write("t,nu," + ",".join(f"Phi_{i + 1}" for i in range(n)) + ","
                  + ",".join(f"dPhi_{i + 1}" for i in range(n)) + "\n")
        for k, t in enumerate(self.tgrid):
            for j, v in enumerate(self.nugrid):
                vals = list(self.Phi[k, j]) + list(self.dPhi[k, j])
                buf.write(f"{t:.17g},{v:.17g}," + ",".join(f"{x:.17g}" for x in vals) + "\n")
        return buf.getvalue()


def _chunks(R, workers):
    workers = max(1, int(workers))
    bounds = np.linspace(0, R, workers + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def build_field(spec: ProblemSpec, P: RiccatiSolution, tgrid, nugrid, cfg: SolverConfig | None = None) -> FieldSolution:
    """Phi and d Phi/d nu on ``tgrid x nugrid`` by back-to-front pasting.

    Windows of ``cfg.field_window_steps`` grid steps are solved with the
    already computed slice at the window end (cubic Hermite in nu) as terminal
    data; a diverging window is split in half and retried.
    """
    cfg = cfg or SolverConfig()
    tgrid = np.asarray(tgrid, dtype=float)
    nugrid = np.asarray(nugrid, dtype=float)
    if len(tgrid) < 2 or len(nugrid) < 2:
        raise ValueError("grids need at least two points")
    if np.any(np.diff(tgrid) <= 0) or np.any(np.diff(nugrid) <= 0):
        raise ValueError("grids must be strictly increasing")
    if abs(tgrid[-1] - P.T) > 1e-12 * max(1.0, P.T) or tgrid[0] < -1e-14:
        raise ValueError("tgrid must lie in [0, T] and end at T")
    Nt, J, n = len(tgrid) - 1, len(nugrid), spec.n
    Phi = np.empty((Nt + 1, J, n))
    dPhi = np.empty((Nt + 1, J, n))
    Phi[Nt] = spec.eval_h2(nugrid)
    dPhi[Nt] = spec.dh2(nugrid)
    extrap = [0]

    def block(ka, kb, depth):
        """Fill slices ka..kb-1 from slice kb."""
        nslices = kb - ka
        sl = _Slice(nugrid, Phi[kb], dPhi[kb])
        c = _Coeffs(spec, P, tgrid[ka:kb + 1])
        start = np.repeat(np.arange(nslices), J)
        nu0 = np.tile(nugrid, nslices)

        def terminal(v):
            val, out = sl(v)
            return val

        def run(a, b):
            nu, phi, _, _ = _window_solve(spec, c, start[a:b], nu0[a:b], terminal, cfg)
            g, out = sl(nu[:, -1], deriv=True)
            gn, gp = _variational(spec, c, start[a:b], nu, phi, g)
            st = start[a:b]
            r = np.arange(b - a)
            return phi[r, st], gp[r, st], int(np.count_nonzero(sl(nu[:, -1])[1]))

        parts = _chunks(len(nu0), cfg.workers)
        try:
            if len(parts) > 1:
                with ThreadPoolExecutor(max_workers=len(parts)) as ex:
                    res = list(ex.map(lambda ab: run(*ab), parts))
            else:
                res = [run(*parts[0])]
        except FbodeDivergence:
            if nslices <= 1 or depth >= cfg.max_halvings:
                raise
            mid = ka + nslices // 2
            block(mid, kb, depth + 1)
            block(ka, mid, depth + 1)
            return
        vals = np.concatenate([r[0] for r in res])
        ders = np.concatenate([r[1] for r in res])
        extrap[0] += sum(r[2] for r in res)
        Phi[ka:kb] = vals.reshape(nslices, J, n)
        dPhi[ka:kb] = ders.reshape(nslices, J, n)

    Wn = max(1, int(cfg.field_window_steps))
    kb = Nt
    while kb > 0:
        ka = max(0, kb - Wn)
        try:
            block(ka, kb, 0)
        except FbodeDivergence as err:
            raise FbodeDivergence(err.window, err.factor,
                                  message=f"fbode-divergence building t=[{tgrid[ka]:.6g}, {tgrid[kb]:.6g})") from err
        kb = ka

    slopes = np.linalg.norm(np.diff(Phi, axis=1), axis=2) / np.diff(nugrid)[None, :]
    return FieldSolution(tgrid, nugrid, Phi, dPhi, float(np.max(slopes)), extrap[0])


# -- evaluation ----------------------------------------------------------------------------------


def _t_locate(tgrid, t):
    t = np.asarray(t, dtype=float)
    T0, T1 = tgrid[0], tgrid[-1]
    eps = 1e-12 * max(1.0, abs(T1))
    if np.any(t < T0 - eps) or np.any(t > T1 + eps):
        raise ValueError(f"t outside [{T0}, {T1}]")
    t = np.clip(t, T0, T1)
    k = np.clip(np.searchsorted(tgrid, t, side="right") - 1, 0, len(tgrid) - 2)
    w = (t - tgrid[k]) / (tgrid[k + 1] - tgrid[k])
    # snap to nodes to keep node values exact
    w = np.where(np.abs(w) < 1e-12, 0.0, np.where(np.abs(w - 1) < 1e-12, 1.0, w))
    return k, w


def _eval(fs: FieldSolution, t, nu, deriv):
    nu = np.asarray(nu, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), nu.shape)
    k, w = _t_locate(fs.tgrid, t)
    g = fs.nugrid
    j = np.clip(np.searchsorted(g, nu, side="right") - 1, 0, len(g) - 2)
    hj = (g[j + 1] - g[j])[..., None]
    u = ((nu - g[j]) / (g[j + 1] - g[j]))[..., None]
    lo, hi = (nu < g[0])[..., None], (nu > g[-1])[..., None]

    def at(kk):
        V, D = fs.Phi, fs.dPhi
        v0, v1, d0, d1 = V[kk, j], V[kk, j + 1], D[kk, j] * hj, D[kk, j + 1] * hj
        if deriv:
            H = _hermite_dbasis(u)
            out = (H[0] * v0 + H[1] * d0 + H[2] * v1 + H[3] * d1) / hj
            out = np.where(lo, D[kk, 0], np.where(hi, D[kk, -1], out))
        else:
            H = _hermite_basis(u)
            out = H[0] * v0 + H[1] * d0 + H[2] * v1 + H[3] * d1
            out = np.where(u == 0.0, v0, out)
            out = np.where(lo, V[kk, 0] + D[kk, 0] * (nu - g[0])[..., None], out)
            out = np.where(hi, V[kk, -1] + D[kk, -1] * (nu - g[-1])[..., None], out)
        return out

    a, b = at(k), at(k + 1)
    w = w[..., None]
    return np.where(w == 0.0, a, np.where(w == 1.0, b, (1 - w) * a + w * b))


def eval_Phi(fs: FieldSolution, t, nu) -> np.ndarray:
    """Phi at ``(t, nu)``: Hermite in nu, linear in t, linear extrapolation off the nu grid."""
    return _eval(fs, t, nu, False)


def eval_dPhi(fs: FieldSolution, t, nu) -> np.ndarray:
    return _eval(fs, t, nu, True)


def time_step(fs: FieldSolution) -> float:
    return float(fs.tgrid[1] - fs.tgrid[0])


def phi_pde_residual(fs: FieldSolution, spec: ProblemSpec, P: RiccatiSolution, t: float, nu,
                     return_flag: bool = False):
    """Residual of the Phi transport equation at ``(t, nu)``.

    ``d_t Phi`` is a central difference with the grid's time step, one-sided
    forward at the first time node.  The terminal row is excluded.
    """
    dt = time_step(fs)
    T0, T = fs.tgrid[0], fs.tgrid[-1]
    nu = np.asarray(nu, dtype=float)
    if t > T - dt * (1 - 1e-9) or t < T0 - 1e-14:
        raise ValueError(f"t={t} is not interior to the time grid")
    if np.any(nu < fs.nugrid[0]) or np.any(nu > fs.nugrid[-1]):
        raise ValueError("nu outside the field grid")
    one_sided = t - dt < T0 - 1e-12 * max(1.0, T)
    if one_sided:
        dtPhi = (eval_Phi(fs, t + dt, nu) - eval_Phi(fs, t, nu)) / dt
    else:
        dtPhi = (eval_Phi(fs, t + dt, nu) - eval_Phi(fs, t - dt, nu)) / (2 * dt)
    res = dtPhi + phi_pde_terms(fs, spec, P, t, nu)
    return (res, one_sided) if return_flag else res


def phi_pde_terms(fs: FieldSolution, spec: ProblemSpec, P: RiccatiSolution, t: float, nu) -> np.ndarray:
    """Every term of the Phi equation except the time derivative."""
    nu = np.asarray(nu, dtype=float)
    Pt = eval_P(P, t)
    Ph = eval_Phi(fs, t, nu)
    dPh = eval_dPhi(fs, t, nu)
    b2 = spec.eval_b2(t)
    ybar = Pt * nu[..., None] + Ph
    b0 = spec.eval_b0(t, nu, ybar)
    f0 = spec.eval_f0(t, nu, ybar)
    drift = (spec.eval_b1(t) + b2 @ Pt) * nu + Ph @ b2 + b0
    return (dPh * drift[..., None] + (Ph @ b2)[..., None] * Pt + Ph @ spec.eval_f2(t).T + f0
            + b0[..., None] * Pt)
