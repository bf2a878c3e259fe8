"""Monte Carlo simulation of the forward McKean-Vlasov SDE driven by the decoupling field."""

from __future__ import annotations

import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .assumptions import compute_constants
from .field import SolverConfig, solve_fbode
from .master import MasterField, eval_U, mean_value, recover_Z
from .problem import ProblemSpec
from .riccati import eval_P

_U64 = 2.0 ** -53
_INIT_STEP = 2 ** 64 - 1  # key slot reserved for the initial law


def _uniforms(seed: int, step: int, lo: int, hi: int) -> np.ndarray:
    """Uniforms in (0, 1) for variate indices ``lo..hi-1`` of stream ``(seed, step)``.

    Philox with key ``(seed, step)`` yields four 64-bit words per counter block,
    so any index range can be produced without generating its prefix.
    """
    if hi <= lo:
        return np.empty(0)
    block, off = divmod(lo, 4)
    key = np.array([seed % 2 ** 64, step % 2 ** 64], dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=np.array([block, 0, 0, 0], dtype=np.uint64))
    raw = bg.random_raw(off + hi - lo)[off:]
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * _U64


def normals(seed: int, step: int, lo: int, hi: int) -> np.ndarray:
    return ndtri(_uniforms(seed, step, lo, hi))


@dataclass(frozen=True)
class InitLaw:
    """Law of the initial state: ``point``, ``normal`` (scale = std) or ``uniform`` (scale = half width)."""

    kind: str = "point"
    mean: float = 0.0
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("point", "normal", "uniform"):
            raise ValueError(f"unknown initial law {self.kind!r}")

    @property
    def std(self) -> float:
        return {"point": 0.0, "normal": self.scale, "uniform": self.scale / math.sqrt(3.0)}[self.kind]

    def sample(self, seed: int, lo: int, hi: int) -> np.ndarray:
        if self.kind == "point":
            return np.full(hi - lo, float(self.mean))
        u = _uniforms(seed, _INIT_STEP, lo, hi)
        if self.kind == "normal":
            return self.mean + self.scale * ndtri(u)
        return self.mean + self.scale * (2.0 * u - 1.0)


@dataclass
class ParticleEnsemble:
    N: int
    seed: int
    tgrid: np.ndarray
    X: np.ndarray | None  # (N, steps+1) when paths are stored


@dataclass
class SimulationOutput:
    ensemble: ParticleEnsemble
    mode: str
    empirical_mean_X: np.ndarray  # (steps+1,)
    std_X: np.ndarray
    nu_path: np.ndarray  # FBODE reference mean
    nu_used: np.ndarray  # mean fed into the coefficients
    Y: np.ndarray | None  # (N, steps+1, n)
    Z: np.ndarray | None  # (N, steps, n, d)
    bsde_rms: float
    mean_gap: float
    terminal_gap: float
    max_abs: dict = field(default_factory=dict)

    def band(self, k: float = 3.0) -> np.ndarray:
        """Per-step ``k`` standard errors of the empirical mean."""
        return k * self.std_X / math.sqrt(self.ensemble.N)

    def summary_csv(self) -> str:
        return ("mean_gap,bsde_rms,terminal_gap\n"
                f"{self.mean_gap:.17g},{self.bsde_rms:.17g},{self.terminal_gap:.17g}\n")

    def paths_csv(self, particles: int = 10, stride: int = 1) -> str:
        X = self.ensemble.X
        if X is None or self.Y is None:
            raise ValueError("paths were not stored")
        n = self.Y.shape[2]
        buf = io.StringIO()
        buf.write("t,particle,X," + ",".join(f"Y_{i + 1}" for i in range(n)) + "\n")
        tg = self.ensemble.tgrid
        for k in range(0, len(tg), max(1, stride)):
            for p in range(min(particles, X.shape[0])):
                buf.write(f"{tg[k]:.17g},{p},{X[p, k]:.17g}," + ",".join(f"{v:.17g}" for v in self.Y[p, k]) + "\n")
        return buf.getvalue()


def _chunks(N, workers):
    b = np.linspace(0, N, max(1, int(workers)) + 1).astype(int)
    return [(lo, hi) for lo, hi in zip(b[:-1], b[1:]) if hi > lo]


def simulate(spec: ProblemSpec, mf: MasterField, nu0: float, init_sampler: InitLaw, N: int, steps: int,
             seed: int, mode: str = "fbode_mean", *, workers: int = 1, store_paths: bool | None = None,
             solver: SolverConfig | None = None) -> SimulationOutput:
    """Euler-Maruyama for ``X`` with ``Y = U(t, X, nu)`` and ``Z = P (outer) sigma``.

    ``mode='fbode_mean'`` feeds the FBODE mean path into the coefficients,
    ``mode='empirical_mean'`` the running particle mean.  Noise for particle
    ``i``, step ``k``, component ``j`` is the variate ``i*d + j`` of the
    counter-based stream keyed by ``(seed, k)``, so chunking the particles
    over workers cannot change the result.
    """
    if mode not in ("fbode_mean", "empirical_mean"):
        raise ValueError(f"unknown mode {mode!r}")
    if N < 2 or steps < 1:
        raise ValueError("need N >= 2 and steps >= 1")
    if abs(init_sampler.mean - nu0) > 1e-12 * max(1.0, abs(nu0)):
        raise ValueError(f"initial law has mean {init_sampler.mean}, expected {nu0}")
    n, d = spec.n, spec.d
    T = spec.T
    tg = np.linspace(0.0, T, steps + 1)
    dt = T / steps
    sq = math.sqrt(dt)
    if store_paths is None:
        store_paths = N * (steps + 1) <= 5_000_000
    parts = _chunks(N, workers)
    pool = ThreadPoolExecutor(max_workers=len(parts)) if len(parts) > 1 else None

    def pmap(fn):
        return list(pool.map(fn, parts)) if pool else [fn(parts[0])]

    ref = solve_fbode(spec, mf.P, 0.0, nu0, solver, steps=steps).nu
    X = np.concatenate(pmap(lambda p: init_sampler.sample(seed, *p)))
    if init_sampler.kind != "point":
        se = init_sampler.std / math.sqrt(N)
        if abs(X.mean() - nu0) > 3 * se:
            warnings.warn(f"initial sample mean {X.mean():.6g} is more than 3 standard errors from {nu0}")

    Xs = np.empty((N, steps + 1)) if store_paths else None
    Ys = np.empty((N, steps + 1, n)) if store_paths else None
    Zs = np.empty((N, steps, n, d)) if store_paths else None
    emp = np.empty(steps + 1)
    std = np.empty(steps + 1)
    nu_used = np.empty(steps + 1)
    sq_res = np.zeros(N)
    mx = {"X": 0.0, "Y": 0.0, "Z": 0.0}

    def nu_at(k, Xk):
        m = float(np.sum(Xk) / N)
        return m, (ref[k] if mode == "fbode_mean" else m)

    m0, nu = nu_at(0, X)
    Y = eval_U(mf, 0.0, X, nu)
    for k in range(steps + 1):
        t = tg[k]
        if not np.all(np.isfinite(X)):
            i = int(np.argmin(np.isfinite(X)))
            raise FloatingPointError(f"non-finite state for particle {i} at step {k}")
        emp[k] = m0
        std[k] = float(np.sqrt(np.sum((X - m0) ** 2) / (N - 1)))
        nu_used[k] = nu
        mx["X"] = max(mx["X"], float(np.max(np.abs(X))))
        mx["Y"] = max(mx["Y"], float(np.max(np.abs(Y))))
        if store_paths:
            Xs[:, k] = X
            Ys[:, k] = Y
        if k == steps:
            break
        ybar = mean_value(mf, t, np.array(nu))
        b0 = float(spec.eval_b0(t, np.array(nu), ybar))
        f0 = spec.eval_f0(t, np.array(nu), ybar)
        b1, b2, f1, f2 = spec.eval_b1(t), spec.eval_b2(t), spec.eval_f1(t), spec.eval_f2(t)

        def advance(p, X=X, Y=Y, t=t, k=k, ybar=ybar, b0=b0):
            lo, hi = p
            x, y = X[lo:hi], Y[lo:hi]
            dW = normals(seed, k, lo * d, hi * d).reshape(hi - lo, d) * sq
            nub = np.full(hi - lo, nu)
            yb = np.broadcast_to(ybar, (hi - lo, n))
            sig = spec.eval_sigma(t, x, y, nub, yb)
            Z = recover_Z(mf, spec, t, x, nub)
            xn = x + (b1 * x + y @ b2 + b0) * dt + np.sum(sig * dW, axis=1)
            return xn, dW, Z

        res = pmap(advance)
        Xn = np.concatenate([r[0] for r in res])
        dW = np.concatenate([r[1] for r in res])
        Z = np.concatenate([r[2] for r in res])
        m1, nu_n = nu_at(k + 1, Xn)
        Yn = eval_U(mf, tg[k + 1], Xn, nu_n)
        r = Yn - Y + (f1 * X[:, None] + Y @ f2.T + f0) * dt - np.einsum("pij,pj->pi", Z, dW)
        sq_res += np.sum(r * r, axis=1)
        mx["Z"] = max(mx["Z"], float(np.max(np.abs(Z))))
        if store_paths:
            Zs[:, k] = Z
        X, Y, m0, nu = Xn, Yn, m1, nu_n
    if pool:
        pool.shutdown()

    term = Y - spec.h1 * X[:, None] - spec.eval_h2(np.array(emp[-1]))
    out = SimulationOutput(
        ensemble=ParticleEnsemble(N, seed, tg, Xs),
        mode=mode, empirical_mean_X=emp, std_X=std, nu_path=ref, nu_used=nu_used, Y=Ys, Z=Zs,
        bsde_rms=float(np.sqrt(np.sum(sq_res) / N)),
        mean_gap=float(np.max(np.abs(emp - ref))),
        terminal_gap=float(np.max(np.abs(term))),
        max_abs=mx,
    )
    return out


def bsde_residual(out: SimulationOutput, spec: ProblemSpec) -> float:
    """Root mean square over particles of ``sqrt(sum_k |r_k|^2)``, the discrete backward residual.

    ``r_k = Y_{k+1} - Y_k + [f1 X_k + f2 Y_k + f0] dt - Z_k dW_k``; the sum over
    steps makes the result first order in ``dt``.  Accumulated during
    :func:`simulate`; the terminal mismatch is in ``out.terminal_gap``.
    """
    return out.bsde_rms


@dataclass(frozen=True)
class StabilityRecord:
    ratio: float
    lip_global: float
    log_lip_global: float
    sup_gap_nu: float
    sup_gap_ybar: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.ratio) and (self.ratio <= 0 or math.log(self.ratio) <= self.log_lip_global)


def stability_experiment(spec: ProblemSpec, mf: MasterField, nu0_a: float, nu0_b: float,
                         N: int | None = None, steps: int | None = None, seed: int | None = None,
                         solver: SolverConfig | None = None) -> StabilityRecord:
    """Ratio ``(sup|d nu|^2 + sup|d ybar|^2) / |d nu0|^2`` from two FBODE solves.

    The estimate concerns means only, so no particles are simulated; ``N`` and
    ``seed`` are accepted for interface symmetry.
    """
    if nu0_a == nu0_b:
        raise ValueError("initial means must differ")
    P = mf.P
    ta = solve_fbode(spec, P, 0.0, nu0_a, solver, steps=steps)
    tb = solve_fbode(spec, P, 0.0, nu0_b, solver, steps=steps)
    Ps = eval_P(P, ta.tgrid)
    ya = Ps * ta.nu[:, None] + ta.phi
    yb = Ps * tb.nu[:, None] + tb.phi
    gn = float(np.max(np.abs(ta.nu - tb.nu)))
    gy = float(np.max(np.linalg.norm(ya - yb, axis=1)))
    ratio = (gn ** 2 + gy ** 2) / (nu0_a - nu0_b) ** 2
    c = compute_constants(spec)
    return StabilityRecord(ratio, c.lip_global, c.log_lip_global, gn, gy)
