"""Problem class: coefficient evaluators, structural validation and presets.

The system is a scalar forward state X coupled to an n-dimensional backward
state Y through the means E[X], E[Y] only::

    dX = [b1 X + b2.Y + b0(t, E[X], E[Y])] dt + sigma(t, X, Y, E[X], E[Y]) dW
    dY = -[f1 X + f2 Y + f0(t, E[X], E[Y])] dt + Z dW
    Y_T = h1 X_T + h2(E[X_T])

Evaluator shape conventions (``S`` is an arbitrary batch shape):

* ``b1(t) -> float``, ``b2(t), f1(t) -> (n,)``, ``f2(t) -> (n, n)``
* ``b0(t, xbar[S], ybar[S+(n,)]) -> S``, ``f0(...) -> S+(n,)``
* ``sigma(t, x[S], y[S+(n,)], xbar, ybar) -> S+(d,)``
* ``h2(xbar[S]) -> S+(n,)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

Scalar = Union[float, Callable[[float], float]]


class EvaluatorError(ValueError):
    """A coefficient returned a non-finite value."""

    def __init__(self, name: str, point: dict, value=None):
        self.name = name
        self.point = point
        self.value = value
        super().__init__(f"{name} is not finite at {point} (value={value})")


def _fd_step(x):
    return 1e-6 * (1.0 + np.abs(x))


@dataclass(frozen=True)
class ProblemSpec:
    T: float
    n: int
    d: int
    K: float
    b1: Callable
    b2: Callable
    f1: Callable
    f2: Callable
    b0: Callable
    f0: Callable
    sigma: Callable
    h1: np.ndarray
    h2: Callable
    # optional analytic derivatives; central differences are used otherwise
    b0_grad: Callable | None = None
    f0_grad: Callable | None = None
    h2_prime: Callable | None = None
    name: str = "custom"

    def __post_init__(self):
        if not (self.T > 0):
            raise ValueError(f"T must be positive, got {self.T}")
        if self.n < 1 or self.d < 1:
            raise ValueError(f"dimensions must be >= 1, got n={self.n}, d={self.d}")
        if not (self.K > 0):
            raise ValueError(f"K must be positive, got {self.K}")
        h1 = np.array(self.h1, dtype=float).reshape(self.n)
        h1.setflags(write=False)
        object.__setattr__(self, "h1", h1)

    # -- shape-normalised evaluation ------------------------------------------------

    def eval_b1(self, t: float) -> float:
        return float(self.b1(t))

    def eval_b2(self, t: float) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.b2(t), dtype=float), (self.n,))

    def eval_f1(self, t: float) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.f1(t), dtype=float), (self.n,))

    def eval_f2(self, t: float) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.f2(t), dtype=float), (self.n, self.n))

    def eval_b0(self, t, xbar, ybar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        return np.broadcast_to(np.asarray(self.b0(t, xbar, np.asarray(ybar, dtype=float)), dtype=float), xbar.shape)

    def eval_f0(self, t, xbar, ybar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        out = self.f0(t, xbar, np.asarray(ybar, dtype=float))
        return np.broadcast_to(np.asarray(out, dtype=float), xbar.shape + (self.n,))

    def eval_sigma(self, t, x, y, xbar, ybar) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.sigma(t, x, np.asarray(y, dtype=float), np.asarray(xbar, dtype=float),
                         np.asarray(ybar, dtype=float))
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape + (self.d,))

    def eval_h2(self, xbar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        return np.broadcast_to(np.asarray(self.h2(xbar), dtype=float), xbar.shape + (self.n,))

    # -- derivatives ---------------------------------------------------------------

    def grad_b0(self, t, xbar, ybar):
        """Return ``(d b0/d xbar, d b0/d ybar)`` with shapes ``S`` and ``S+(n,)``."""
        xbar = np.asarray(xbar, dtype=float)
        ybar = np.asarray(ybar, dtype=float)
        shape = xbar.shape
        if self.b0_grad is not None:
            gx, gy = self.b0_grad(t, xbar, ybar)
            return (np.broadcast_to(np.asarray(gx, dtype=float), shape),
                    np.broadcast_to(np.asarray(gy, dtype=float), shape + (self.n,)))
        hx = _fd_step(xbar)
        gx = (self.eval_b0(t, xbar + hx, ybar) - self.eval_b0(t, xbar - hx, ybar)) / (2 * hx)
        gy = np.empty(shape + (self.n,))
        for j in range(self.n):
            hy = _fd_step(ybar[..., j])
            up = ybar.copy()
            dn = ybar.copy()
            up[..., j] += hy
            dn[..., j] -= hy
            gy[..., j] = (self.eval_b0(t, xbar, up) - self.eval_b0(t, xbar, dn)) / (2 * hy)
        return gx, gy

    def grad_f0(self, t, xbar, ybar):
        """Return ``(d f0/d xbar, d f0/d ybar)`` with shapes ``S+(n,)``, ``S+(n, n)``."""
        xbar = np.asarray(xbar, dtype=float)
        ybar = np.asarray(ybar, dtype=float)
        shape = xbar.shape
        n = self.n
        if self.f0_grad is not None:
            gx, gy = self.f0_grad(t, xbar, ybar)
            return (np.broadcast_to(np.asarray(gx, dtype=float), shape + (n,)),
                    np.broadcast_to(np.asarray(gy, dtype=float), shape + (n, n)))
        hx = _fd_step(xbar)[..., None]
        gx = (self.eval_f0(t, xbar + hx[..., 0], ybar) - self.eval_f0(t, xbar - hx[..., 0], ybar)) / (2 * hx)
        gy = np.empty(shape + (n, n))
        for j in range(n):
            hy = _fd_step(ybar[..., j])
            up = ybar.copy()
            dn = ybar.copy()
            up[..., j] += hy
            dn[..., j] -= hy
            gy[..., :, j] = (self.eval_f0(t, xbar, up) - self.eval_f0(t, xbar, dn)) / (2 * hy[..., None])
        return gx, gy

    def dh2(self, xbar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        if self.h2_prime is not None:
            return np.broadcast_to(np.asarray(self.h2_prime(xbar), dtype=float), xbar.shape + (self.n,))
        h = _fd_step(xbar)
        return (self.eval_h2(xbar + h) - self.eval_h2(xbar - h)) / (2 * h[..., None])

    def replace(self, **changes) -> "ProblemSpec":
        import dataclasses

        return dataclasses.replace(self, **changes)


# -- validation of the Lipschitz / boundedness structure ------------------------------


@dataclass(frozen=True)
class ValidationGridConfig:
    t_points: int = 33
    box: float = 10.0
    random_pairs: int = 256
    seed: int = 0
    tol: float = 1e-10
    # base bounds |b0(t,0,0)|, |f0(t,0,0)|, |sigma(t,0,0,0,0)|, |h2(0)| <= K
    check_a4: bool = False


@dataclass(frozen=True)
class Violation:
    condition: str
    point: dict
    value: float
    threshold: float


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    resolution: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return "pass" if not self.violations else "fail"

    def lines(self) -> list[str]:
        res = " ".join(f"{k}={v}" for k, v in self.resolution.items())
        out = [f"A1 status={self.status} {res}".rstrip()]
        for v in self.violations[:20]:
            out.append(f"A1 violation {v.condition} value={v.value:.6g} threshold={v.threshold:.6g} at {v.point}")
        return out


def _check_finite(name, value, point):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise EvaluatorError(name, point, value)
    return arr


def validate_spec(spec: ProblemSpec, grid: ValidationGridConfig | None = None) -> ValidationReport:
    """Sample the (A1) bounds of ``spec`` and list every violation found.

    Passing means no violation at the sampled resolution, recorded in
    ``report.resolution``.
    """
    grid = grid or ValidationGridConfig()
    n, K = spec.n, spec.K
    lim = K * (1.0 + grid.tol)
    rng = np.random.default_rng(grid.seed)
    ts = np.linspace(0.0, spec.T, grid.t_points)
    report = ValidationReport()

    def bound(cond, val, point):
        val = float(val)
        if val > lim:
            report.violations.append(Violation(cond, point, val, K))

    h1 = _check_finite("h1", spec.h1, {})
    bound("h1 bounded", np.linalg.norm(h1), {})

    # random pairs in the (x, y, xbar, ybar) box; half share one coordinate block
    m = grid.random_pairs
    B = grid.box

    def draw(*shape):
        return rng.uniform(-B, B, size=shape)

    xb1, xb2 = draw(m), draw(m)
    yb1, yb2 = draw(m, n), draw(m, n)
    half = m // 2
    xb2[:half // 2] = xb1[:half // 2]
    yb2[half // 2:half] = yb1[half // 2:half]
    x1, x2 = draw(m), draw(m)
    y1, y2 = draw(m, n), draw(m, n)

    def lip_check(cond, v1, v2, incr, t):
        diff = np.abs(v1 - v2) if v1.ndim == 1 else np.linalg.norm(v1 - v2, axis=-1)
        ok = diff <= lim * incr + 1e-300
        if not np.all(ok):
            k = int(np.argmax(diff - lim * incr))
            q = diff[k] / incr[k] if incr[k] > 0 else np.inf
            report.violations.append(Violation(cond, {"t": float(t), "pair": k}, float(q), K))

    # h2 Lipschitz in xbar
    h2a = _check_finite("h2", spec.eval_h2(xb1), {"xbar": "sample"})
    h2b = _check_finite("h2", spec.eval_h2(xb2), {"xbar": "sample"})
    lip_check("h2 Lipschitz", h2a, h2b, np.abs(xb1 - xb2), float("nan"))
    if grid.check_a4:
        bound("h2(0) bounded (A4)", np.linalg.norm(spec.eval_h2(np.zeros(1))[0]), {"xbar": 0.0})

    dmean = np.abs(xb1 - xb2) + np.linalg.norm(yb1 - yb2, axis=-1)
    dall = dmean + np.abs(x1 - x2) + np.linalg.norm(y1 - y2, axis=-1)
    for t in ts:
        pt = {"t": float(t)}
        bound("b1 bounded", abs(_check_finite("b1", spec.eval_b1(t), pt)), pt)
        bound("b2 bounded", np.linalg.norm(_check_finite("b2", spec.eval_b2(t), pt)), pt)
        bound("f1 bounded", np.linalg.norm(_check_finite("f1", spec.eval_f1(t), pt)), pt)
        bound("f2 bounded", np.linalg.norm(_check_finite("f2", spec.eval_f2(t), pt)), pt)

        b0a = _check_finite("b0", spec.eval_b0(t, xb1, yb1), pt)
        b0b = _check_finite("b0", spec.eval_b0(t, xb2, yb2), pt)
        lip_check("b0 Lipschitz", b0a, b0b, dmean, t)
        f0a = _check_finite("f0", spec.eval_f0(t, xb1, yb1), pt)
        f0b = _check_finite("f0", spec.eval_f0(t, xb2, yb2), pt)
        lip_check("f0 Lipschitz", f0a, f0b, dmean, t)
        sa = _check_finite("sigma", spec.eval_sigma(t, x1, y1, xb1, yb1), pt)
        sb = _check_finite("sigma", spec.eval_sigma(t, x2, y2, xb2, yb2), pt)
        lip_check("sigma Lipschitz", sa, sb, dall, t)

        if grid.check_a4:
            z = np.zeros(1)
            zy = np.zeros((1, n))
            bound("b0(t,0,0) bounded (A4)", abs(spec.eval_b0(t, z, zy)[0]), pt)
            bound("f0(t,0,0) bounded (A4)", np.linalg.norm(spec.eval_f0(t, z, zy)[0]), pt)
            bound("sigma(t,0,0,0,0) bounded (A4)", np.linalg.norm(spec.eval_sigma(t, z, zy, z, zy)[0]), pt)

    report.resolution = {"t_points": grid.t_points, "pairs": m, "box": grid.box}
    return report


# -- presets ---------------------------------------------------------------------------


def _const(value):
    value = np.asarray(value, dtype=float)
    return lambda t: value


def _zero_sigma(d):
    def sigma(t, x, y, xbar, ybar):
        return np.zeros(np.shape(x) + (d,))

    return sigma


def zero_spec(T: float = 1.0, n: int = 1, d: int = 1, K: float = 1.0) -> ProblemSpec:
    """All coefficients identically zero; the unique solution is zero."""
    return ProblemSpec(
        T=T, n=n, d=d, K=K,
        b1=_const(0.0), b2=_const(np.zeros(n)), f1=_const(np.zeros(n)), f2=_const(np.zeros((n, n))),
        b0=lambda t, xb, yb: np.zeros(np.shape(xb)),
        f0=lambda t, xb, yb: np.zeros(np.shape(xb) + (n,)),
        sigma=_zero_sigma(d),
        h1=np.zeros(n),
        h2=lambda xb: np.zeros(np.shape(xb) + (n,)),
        b0_grad=lambda t, xb, yb: (np.zeros(np.shape(xb)), np.zeros(np.shape(xb) + (n,))),
        f0_grad=lambda t, xb, yb: (np.zeros(np.shape(xb) + (n,)), np.zeros(np.shape(xb) + (n, n))),
        h2_prime=lambda xb: np.zeros(np.shape(xb) + (n,)),
        name="zero",
    )


def eq24_residual(alpha: float, T: float) -> float:
    """Residual of ``alpha sin(sqrt(alpha) T) = sqrt(alpha) cos(sqrt(alpha) T)``."""
    if alpha < 0:
        raise ValueError("the terminal-time condition is only defined for alpha >= 0")
    r = math.sqrt(alpha)
    return alpha * math.sin(r * T) - r * math.cos(r * T)


def preset_example2(alpha: float, beta: float, lam: float, theta: float, T: float,
                    require_eq24: bool = False, eq24_tol: float = 1e-6) -> ProblemSpec:
    """Scalar system with forward drift ``alpha E[Y] + beta E[X]``.

    The backward driver is ``lam E[X] + (1 - lam) X`` and the terminal value
    ``theta E[X_T] + (1 - theta) X_T``.
    """
    if not (0.0 <= lam <= 1.0 and 0.0 <= theta <= 1.0):
        raise ValueError(f"lambda and theta must lie in [0, 1], got {lam}, {theta}")
    if T <= 0:
        raise ValueError("T must be positive")
    if require_eq24 and alpha >= 0:
        res = eq24_residual(alpha, T)
        if abs(res) > eq24_tol:
            raise ValueError(f"alpha sin(sqrt(alpha)T) != sqrt(alpha) cos(sqrt(alpha)T): residual {res:.3e}")
    alpha, beta, lam, theta = float(alpha), float(beta), float(lam), float(theta)

    def b0(t, xb, yb):
        return alpha * yb[..., 0] + beta * xb

    def f0(t, xb, yb):
        return (lam * xb)[..., None]

    def b0_grad(t, xb, yb):
        s = np.shape(xb)
        return np.full(s, beta), np.full(s + (1,), alpha)

    def f0_grad(t, xb, yb):
        s = np.shape(xb)
        return np.full(s + (1,), lam), np.zeros(s + (1, 1))

    return ProblemSpec(
        T=float(T), n=1, d=1, K=max(1.0, abs(alpha), abs(beta)),
        b1=_const(0.0), b2=_const([0.0]), f1=_const([1.0 - lam]), f2=_const([[0.0]]),
        b0=b0, f0=f0, sigma=_zero_sigma(1),
        h1=np.array([1.0 - theta]),
        h2=lambda xb: (theta * np.asarray(xb, dtype=float))[..., None],
        b0_grad=b0_grad, f0_grad=f0_grad,
        h2_prime=lambda xb: np.full(np.shape(xb) + (1,), theta),
        name="example2" if beta else "example1",
    )


def preset_example1(alpha: float, lam: float, theta: float, T: float,
                    require_eq24: bool = False, eq24_tol: float = 1e-6) -> ProblemSpec:
    """Scalar system ``dX = alpha E[Y] dt`` from the monotonicity comparison examples."""
    return preset_example2(alpha, 0.0, lam, theta, T, require_eq24=require_eq24, eq24_tol=eq24_tol)


def _as_fn(v: Scalar) -> Callable[[float], float]:
    if callable(v):
        return lambda t: float(v(t))
    c = float(v)
    return lambda t: c


@dataclass(frozen=True)
class LQCoefficients:
    """Mean-field LQ control coefficients; each entry a constant or a function of t."""

    A: Scalar = 0.0
    Abar: Scalar = 0.0
    B: Scalar = 1.0
    Bbar: Scalar = 0.0
    R: Scalar = 1.0
    Rbar: Scalar = 0.0
    Q: Scalar = 0.0
    Qbar: Scalar = 0.0
    G: float = 0.0
    Gbar: float = 0.0
    sigma: Scalar = 0.0
    T: float = 1.0


def preset_example3(coeffs: LQCoefficients, k_grid: int = 1025) -> ProblemSpec:
    """Hamiltonian system of a mean-field LQ control problem.

    The mean-field drift terms are routed through ``b0``/``f0``:
    ``-(B^2/R)(Y - E[Y])`` becomes ``b2 Y`` plus a ``ybar`` part of ``b0``.
    """
    c = coeffs
    A, Ab, B, Bb = _as_fn(c.A), _as_fn(c.Abar), _as_fn(c.B), _as_fn(c.Bbar)
    R, Rb, Q, Qb, sig = _as_fn(c.R), _as_fn(c.Rbar), _as_fn(c.Q), _as_fn(c.Qbar), _as_fn(c.sigma)
    G, Gb = float(c.G), float(c.Gbar)
    T = float(c.T)
    ts = np.linspace(0.0, T, k_grid)
    for t in ts:
        if R(t) == 0.0:
            raise ZeroDivisionError(f"R(t) vanishes at t={t}")
        if R(t) + Rb(t) == 0.0:
            raise ZeroDivisionError(f"R(t)+Rbar(t) vanishes at t={t}")

    def ratio(t):
        r = R(t)
        if r == 0.0:
            raise ZeroDivisionError(f"R(t) vanishes at t={t}")
        return B(t) ** 2 / r

    def ratio_bar(t):
        r = R(t) + Rb(t)
        if r == 0.0:
            raise ZeroDivisionError(f"R(t)+Rbar(t) vanishes at t={t}")
        return (B(t) + Bb(t)) ** 2 / r

    def ycoef(t):
        return ratio(t) - ratio_bar(t)

    def b0(t, xb, yb):
        return Ab(t) * xb + ycoef(t) * yb[..., 0]

    def f0(t, xb, yb):
        return (Ab(t) * yb[..., 0] + Qb(t) * xb)[..., None]

    def b0_grad(t, xb, yb):
        s = np.shape(xb)
        return np.full(s, Ab(t)), np.full(s + (1,), ycoef(t))

    def f0_grad(t, xb, yb):
        s = np.shape(xb)
        return np.full(s + (1,), Qb(t)), np.full(s + (1, 1), Ab(t))

    def sigma(t, x, y, xb, yb):
        return np.full(np.shape(x) + (1,), sig(t))

    bounds = [abs(G), abs(Gb)]
    for t in ts:
        bounds += [abs(A(t)), ratio(t), abs(Q(t)), abs(Ab(t)), abs(ycoef(t)), abs(Qb(t)), abs(sig(t))]
    K = max(bounds)
    if any(callable(v) for v in (c.A, c.Abar, c.B, c.Bbar, c.R, c.Rbar, c.Q, c.Qbar, c.sigma)):
        K *= 1.0 + 1e-3  # sampled sup of a function may sit between grid points
    K = max(1.0, K)

    return ProblemSpec(
        T=T, n=1, d=1, K=K,
        b1=A, b2=lambda t: np.array([-ratio(t)]), f1=lambda t: np.array([Q(t)]),
        f2=lambda t: np.array([[A(t)]]),
        b0=b0, f0=f0, sigma=sigma,
        h1=np.array([G]),
        h2=lambda xb: (Gb * np.asarray(xb, dtype=float))[..., None],
        b0_grad=b0_grad, f0_grad=f0_grad,
        h2_prime=lambda xb: np.full(np.shape(xb) + (1,), Gb),
        name="example3",
    )


# reference instance satisfying (E1), (E2)(i), (E3)(i)
EXAMPLE3_DEFAULT = LQCoefficients(A=0.2, Abar=0.1, B=1.0, Bbar=0.5, R=1.0, Rbar=0.5,
                                  Q=1.0, Qbar=0.5, G=1.0, Gbar=0.5, sigma=1.0, T=1.0)
