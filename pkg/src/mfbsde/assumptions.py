"""Mean-field difference quotients, monotonicity checkers and explicit constants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .problem import ProblemSpec

SIGN_TOL = 1e-12


@dataclass(frozen=True)
class QuotientBundle:
    """Difference quotients of the mean-field coefficients at ``(t, theta1, theta2)``.

    Arrays carry an optional leading batch shape ``S``: ``b3: S``, ``b4: S+(n,)``,
    ``f3: S+(n,)``, ``f4: S+(n, n)``, ``h2q: S+(n,)``.
    """

    b3: np.ndarray
    b4: np.ndarray
    f3: np.ndarray
    f4: np.ndarray
    h2q: np.ndarray


def _safe_div(num, den):
    den = np.asarray(den, dtype=float)
    zero = den == 0.0
    out = np.divide(num, np.where(zero, 1.0, den))
    return np.where(zero, 0.0, out)


def diff_quotients(spec: ProblemSpec, t: float, theta1, theta2) -> QuotientBundle:
    """Evaluate the quotients ``b3, b4, f3, f4`` and the ``h2`` quotient.

    ``theta = (xbar, ybar)``; ``xbar`` may be an array of shape ``S`` and
    ``ybar`` of shape ``S+(n,)``.  The ``ybar`` quotients sweep the coordinates
    one at a time, replacing entries of ``ybar1`` by those of ``ybar2``.  A zero
    denominator yields a zero quotient.
    """
    if not (0.0 <= t <= spec.T):
        raise ValueError(f"t={t} outside [0, {spec.T}]")
    n = spec.n
    x1 = np.asarray(theta1[0], dtype=float)
    x2 = np.asarray(theta2[0], dtype=float)
    y1 = np.asarray(theta1[1], dtype=float)
    y2 = np.asarray(theta2[1], dtype=float)
    shape = np.broadcast_shapes(x1.shape, x2.shape, y1.shape[:-1], y2.shape[:-1])
    x1 = np.broadcast_to(x1, shape)
    x2 = np.broadcast_to(x2, shape)
    y1 = np.broadcast_to(y1, shape + (n,))
    y2 = np.broadcast_to(y2, shape + (n,))

    def fin(name, v):
        if not np.all(np.isfinite(v)):
            from .problem import EvaluatorError

            raise EvaluatorError(name, {"t": t, "theta1": theta1, "theta2": theta2}, v)
        return v

    dx = x1 - x2
    b0_11 = fin("b0", spec.eval_b0(t, x1, y1))
    b0_21 = fin("b0", spec.eval_b0(t, x2, y1))
    f0_11 = fin("f0", spec.eval_f0(t, x1, y1))
    f0_21 = fin("f0", spec.eval_f0(t, x2, y1))
    b3 = _safe_div(b0_11 - b0_21, dx)
    f3 = _safe_div(f0_11 - f0_21, dx[..., None])
    h2q = _safe_div(fin("h2", spec.eval_h2(x1)) - fin("h2", spec.eval_h2(x2)), dx[..., None])

    b4 = np.empty(shape + (n,))
    f4 = np.empty(shape + (n, n))
    # y_prev = (y2^(1..j-1), y1^(j..n)); y_next swaps in coordinate j as well
    y_prev = np.array(y1, dtype=float)
    b_prev, f_prev = b0_21, f0_21
    for j in range(n):
        y_next = y_prev.copy()
        y_next[..., j] = y2[..., j]
        b_next = fin("b0", spec.eval_b0(t, x2, y_next))
        f_next = fin("f0", spec.eval_f0(t, x2, y_next))
        dy = y1[..., j] - y2[..., j]
        b4[..., j] = _safe_div(b_prev - b_next, dy)
        f4[..., :, j] = _safe_div(f_prev - f_next, dy[..., None])
        y_prev, b_prev, f_prev = y_next, b_next, f_next
    return QuotientBundle(b3=b3, b4=b4, f3=f3, f4=f4, h2q=h2q)


# -- constants ---------------------------------------------------------------------


@dataclass(frozen=True)
class Constants:
    M: float
    delta: float
    eps: float
    eps_tilde: float
    m: int
    lip_interval: float
    lip_global: float  # may overflow to inf; compare through log_lip_global
    log_lip_global: float
    M_bar: float | None = None
    delta_bar: float | None = None


def compute_constants(spec: ProblemSpec | None = None, lam: float | None = None, *,
                      n: int | None = None, K: float | None = None, T: float | None = None) -> Constants:
    """Stability constants of the small-interval argument and the n=1 thresholds.

    ``m`` is the number of pasting intervals of length ``delta`` covering
    ``[0, T]`` (at least one).
    """
    if spec is not None:
        n, K, T = spec.n, spec.K, spec.T
    if n is None or K is None or T is None:
        raise ValueError("need a spec or explicit n, K, T")
    M = 2.0 * n * K * (T + 1.0) * math.exp((2 * n + 2) * K * T)
    denom = 2.0 * M * (3.0 * M * M + 4.0)
    delta = math.inf if denom == 0.0 else 1.0 / denom
    eps = 1.0 / ((K + (K + 1.0) * T) ** 2 * math.exp(4.0 * K * T))
    eps_tilde = 1.0 / ((2.0 * K + (2.0 * K + 1.0) * T) ** 2 * math.exp(8.0 * K * T))
    m = max(1, math.ceil(T / delta)) if math.isfinite(delta) else 1
    lip_interval = 2.0 * (M * M + 1.0)
    log_lip = m * math.log(lip_interval)
    lip_global = math.exp(log_lip) if log_lip < 709.0 else math.inf
    M_bar = delta_bar = None
    if lam is not None:
        M_bar = max(abs(lam), (2.0 * K + (2.0 * K + 1.0) * T) * math.exp(4.0 * K * T))
        delta_bar = 1.0 / (2.0 * M_bar * (3.0 * M_bar ** 2 + 4.0))
    return Constants(M=M, delta=delta, eps=eps, eps_tilde=eps_tilde, m=m, lip_interval=lip_interval,
                     lip_global=lip_global, log_lip_global=log_lip, M_bar=M_bar, delta_bar=delta_bar)


# -- reports -------------------------------------------------------------------------


@dataclass(frozen=True)
class Witness:
    component: int  # 1-based
    pattern: str
    inequality: str
    value: float
    t: float
    theta1: tuple | None = None
    theta2: tuple | None = None


@dataclass
class AssumptionReport:
    condition: str
    status: str  # "pass_sampled" | "fail"
    pattern: list = field(default_factory=list)  # per component: "(i)", "(ii)" or None
    witness: Witness | None = None
    witnesses: list = field(default_factory=list)
    lam: float | None = None
    points: int = 0
    notes: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass_sampled"

    def lines(self) -> list[str]:
        out = []
        for i, pat in enumerate(self.pattern or [None]):
            line = f"{self.condition} i={i + 1} pattern={pat or '-'} status={self.status} points={self.points}"
            if self.lam is not None:
                line += f" lambda={self.lam:.12g}"
            out.append(line)
        if self.witness is not None:
            w = self.witness
            out.append(f"{self.condition} witness i={w.component} pattern={w.pattern} "
                       f"{w.inequality} value={w.value:.6g} t={w.t:.6g}"
                       + (f" theta1={_fmt_theta(w.theta1)} theta2={_fmt_theta(w.theta2)}" if w.theta1 else ""))
        return out


def _fmt_theta(theta):
    x, y = theta
    return "(" + ",".join(f"{v:.6g}" for v in [x, *np.atleast_1d(y)]) + ")"


# -- sampling of (theta1, theta2) pairs -----------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    box: float = 10.0
    lattice: int = 3  # points per coordinate of the lattice over (xbar, ybar)
    random_pairs: int = 1000
    seed: int = 0
    affine_tol: float = 1e-12


def _lattice_pairs(n, cfg: SamplerConfig, rng):
    axes = [np.linspace(-cfg.box, cfg.box, cfg.lattice)] * (n + 1)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n + 1)
    partner = pts[rng.permutation(len(pts))]
    rnd1 = rng.uniform(-cfg.box, cfg.box, size=(cfg.random_pairs, n + 1))
    rnd2 = rng.uniform(-cfg.box, cfg.box, size=(cfg.random_pairs, n + 1))
    # pairs sharing one block exercise the zero-denominator convention
    k = cfg.random_pairs // 8
    rnd2[:k, 0] = rnd1[:k, 0]
    rnd2[k:2 * k, 1:] = rnd1[k:2 * k, 1:]
    p1 = np.concatenate([pts, pts, rnd1])
    p2 = np.concatenate([partner, -pts, rnd2])
    return p1, p2


def _bundle_close(a: QuotientBundle, b: QuotientBundle, tol) -> bool:
    return all(np.allclose(getattr(a, f), getattr(b, f), rtol=0.0, atol=tol)
               for f in ("b3", "b4", "f3", "f4", "h2q"))


def _take(bundle: QuotientBundle, idx) -> QuotientBundle:
    return QuotientBundle(*(getattr(bundle, f)[idx] for f in ("b3", "b4", "f3", "f4", "h2q")))


def _is_affine(spec, t, p1, p2, tol) -> bool:
    """Two generic pairs with identical quotients mark the mean-field data as affine."""
    th = lambda p: (p[:, 0], p[:, 1:])
    q = diff_quotients(spec, t, th(p1), th(p2))
    return _bundle_close(_take(q, 0), _take(q, 1), tol)


# -- (A2) ------------------------------------------------------------------------------


def _pattern_checks(i, n, f1, h1, b2, f2_row):
    """Signed margins for both patterns; a margin < -SIGN_TOL is a violation.

    Arrays are over samples.  Returns {pattern: [(inequality, margin_array), ...]}.
    """
    offdiag = [(f"f2[{i + 1},{j + 1}]>=0", f2_row[..., j]) for j in range(n) if j != i]
    return {
        "(i)": [("f1>=0", f1), ("h1>=0", h1), ("b2<=0", -b2)] + offdiag,
        "(ii)": [("f1<=0", -f1), ("h1<=0", -h1), ("b2>=0", b2)] + offdiag,
    }


def _first_violation(checks):
    worst = None
    for name, margin in checks:
        margin = np.atleast_1d(margin)
        bad = np.nonzero(margin < -SIGN_TOL)[0]
        if bad.size:
            k = int(bad[0])
            if worst is None:
                worst = (name, float(margin[k]), k)
    return worst


def check_A2(spec: ProblemSpec, tgrid=None) -> AssumptionReport:
    """Per component, one sign pattern must hold uniformly over ``tgrid``."""
    tgrid = np.linspace(0.0, spec.T, 65) if tgrid is None else np.asarray(tgrid, dtype=float)
    n = spec.n
    F1 = np.array([spec.eval_f1(t) for t in tgrid])
    B2 = np.array([spec.eval_b2(t) for t in tgrid])
    F2 = np.array([spec.eval_f2(t) for t in tgrid])
    report = AssumptionReport("A2", "pass_sampled", points=len(tgrid))
    for i in range(n):
        checks = _pattern_checks(i, n, F1[:, i], np.full(len(tgrid), spec.h1[i]), B2[:, i], F2[:, i, :])
        chosen = None
        for pat in ("(i)", "(ii)"):
            v = _first_violation(checks[pat])
            if v is None:
                chosen = pat
                break
            name, value, k = v
            wit = Witness(i + 1, pat, name, _undo_sign(name, value), float(tgrid[k]))
            report.witnesses.append(wit)
        report.pattern.append(chosen)
        if chosen is None:
            report.status = "fail"
            if report.witness is None:
                report.witness = report.witnesses[-2]
    if report.passed:
        report.witnesses.clear()
    return report


def _undo_sign(name, margin):
    # margins are stored as "value" for >= and "-value" for <=
    return -margin if "<=" in name else margin


# -- (A3) ------------------------------------------------------------------------------


def check_A3(spec: ProblemSpec, tgrid=None, pair_sampler: SamplerConfig | None = None) -> AssumptionReport:
    """(A3) with deterministic coefficients, sampled over ``tgrid`` and pairs.

    For affine mean-field data the quotients do not depend on the pair, so a
    single generic pair (plus the coincident one) is used at each time.
    """
    cfg = pair_sampler or SamplerConfig()
    tgrid = np.linspace(0.0, spec.T, 33) if tgrid is None else np.asarray(tgrid, dtype=float)
    n = spec.n
    rng = np.random.default_rng(cfg.seed)
    p1, p2 = _lattice_pairs(n, cfg, rng)
    generic = rng.uniform(-cfg.box, cfg.box, size=(4, n + 1))
    # the first pair is coincident: all quotients vanish there
    p1 = np.concatenate([p1[:1], p1])
    p2 = np.concatenate([p1[:1], p2])
    th = lambda p: (p[:, 0], p[:, 1:])

    ok = {(i, pat): True for i in range(n) for pat in ("(i)", "(ii)")}
    first = {}
    points = 0
    for t in tgrid:
        t = float(t)
        if _is_affine(spec, t, generic[:2], generic[2:], cfg.affine_tol):
            q1 = np.concatenate([p1[:1], generic[:1]])
            q2 = np.concatenate([p2[:1], generic[2:3]])
        else:
            q1, q2 = p1, p2
        qb = diff_quotients(spec, t, th(q1), th(q2))
        points += len(q1)
        f1, b2, f2 = spec.eval_f1(t), spec.eval_b2(t), spec.eval_f2(t)
        for i in range(n):
            checks = _pattern_checks(i, n, f1[i] + qb.f3[:, i], spec.h1[i] + qb.h2q[:, i],
                                     b2[i] + qb.b4[:, i], f2[i, :] + qb.f4[:, i, :])
            for pat in ("(i)", "(ii)"):
                if not ok[(i, pat)]:
                    continue
                v = _first_violation(checks[pat])
                if v is None:
                    continue
                ok[(i, pat)] = False
                name, value, k = v
                label = (name.replace("f1", "f1+f3").replace("h1", "h1+h2q")
                         .replace("b2", "b2+b4").replace("f2[", "f2+f4["))
                first[(i, pat)] = Witness(i + 1, pat, label, _undo_sign(name, value), t,
                                          (float(q1[k, 0]), q1[k, 1:].copy()),
                                          (float(q2[k, 0]), q2[k, 1:].copy()))
    report = AssumptionReport("A3", "pass_sampled", points=points)
    for i in range(n):
        chosen = next((pat for pat in ("(i)", "(ii)") if ok[(i, pat)]), None)
        report.pattern.append(chosen)
        if chosen is None:
            report.status = "fail"
            report.witnesses += [first[(i, "(i)")], first[(i, "(ii)")]]
            if report.witness is None:
                report.witness = first[(i, "(i)")]
    return report


# -- (B1)/(B2), n = 1 --------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaSearchConfig:
    span: float | None = None  # default 10 K (1 + T)
    grid_points: int = 2001
    t_points: int = 65
    golden_iters: int = 60
    sampler: SamplerConfig = SamplerConfig(random_pairs=200)


def _golden_max(g, a, b, iters):
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - phi * (b - a), a + phi * (b - a)
    gc, gd = g(c), g(d)
    for _ in range(iters):
        if gc >= gd:
            b, d, gd = d, c, gc
            c = b - phi * (b - a)
            gc = g(c)
        else:
            a, c, gc = c, d, gd
            d = a + phi * (b - a)
            gd = g(d)
    return (c, gc) if gc >= gd else (d, gd)


class _LambdaProblem:
    """Margins of the lambda-dependent inequalities over the sampled data.

    ``sign=+1`` is case (i): ``lam <= H``, ``F(lam) >= 0``; ``sign=-1`` is case (ii).
    """

    def __init__(self, c0, c1, c2, H, sign):
        self.c0, self.c1, self.c2, self.H, self.sign = c0, c1, c2, H, sign

    def margin(self, lam):
        lam = np.asarray(lam, dtype=float)[..., None]
        F = self.c0 + self.c1 * lam + self.c2 * lam * lam
        s = self.sign
        return np.minimum(np.min(s * F, axis=-1), np.min(s * (self.H - lam), axis=-1))


def _lambda_search(prob_fine, prob_check, span, cfg: LambdaSearchConfig):
    grid = np.linspace(-span, span, cfg.grid_points)
    order = np.argsort(np.abs(grid), kind="stable")
    cands = np.concatenate([[0.0], grid[order]])
    margins = prob_fine.margin(cands)
    feas = np.nonzero(margins >= -SIGN_TOL)[0]
    if feas.size:
        for k in feas:
            if prob_check.margin(cands[k]) >= -SIGN_TOL:
                return float(cands[k])
    # refine around the best grid point
    k = int(np.argmax(margins[1:])) + 1
    step = grid[1] - grid[0]
    lam, val = _golden_max(lambda v: float(prob_fine.margin(v)), cands[k] - step, cands[k] + step, cfg.golden_iters)
    if val >= -SIGN_TOL and prob_check.margin(lam) >= -SIGN_TOL:
        return float(lam)
    return None


def _b_report(name, spec, cases, thresholds_ok, span, cfg, points):
    report = AssumptionReport(name, "fail", points=points)
    for pat, (fine, check) in cases.items():
        if not thresholds_ok[pat][0]:
            report.witnesses.append(thresholds_ok[pat][1])
            continue
        lam = _lambda_search(fine, check, span, cfg)
        if lam is not None:
            report.status = "pass_sampled"
            report.pattern = [pat]
            report.lam = lam
            report.witnesses.clear()
            return report
        report.witnesses.append(Witness(1, pat, "no feasible lambda", float("nan"), float("nan")))
    report.pattern = [None]
    report.witness = report.witnesses[0] if report.witnesses else None
    return report


def check_B1(spec: ProblemSpec, search: LambdaSearchConfig | None = None) -> AssumptionReport:
    """One-dimensional relaxation of (A2) through the quadratic ``F0(t, y)``."""
    if spec.n != 1:
        raise ValueError("B1 is defined for n = 1 only")
    cfg = search or LambdaSearchConfig()
    span = cfg.span if cfg.span is not None else 10.0 * spec.K * (1.0 + spec.T)
    eps = compute_constants(spec).eps

    def data(nt):
        ts = np.linspace(0.0, spec.T, nt)
        f1 = np.array([spec.eval_f1(t)[0] for t in ts])
        b1 = np.array([spec.eval_b1(t) for t in ts])
        f2 = np.array([spec.eval_f2(t)[0, 0] for t in ts])
        b2 = np.array([spec.eval_b2(t)[0] for t in ts])
        return ts, f1, b1 + f2, b2

    ts, c0, c1, c2 = data(cfg.t_points)
    ts4, d0, d1, d2 = data(4 * (cfg.t_points - 1) + 1)
    h1 = np.array([spec.h1[0]])
    thr = {
        "(i)": _threshold(c2 <= eps, ts, c2, "b2<=eps"),
        "(ii)": _threshold(c2 >= -eps, ts, c2, "b2>=-eps"),
    }
    cases = {
        "(i)": (_LambdaProblem(c0, c1, c2, h1, +1), _LambdaProblem(d0, d1, d2, h1, +1)),
        "(ii)": (_LambdaProblem(c0, c1, c2, h1, -1), _LambdaProblem(d0, d1, d2, h1, -1)),
    }
    return _b_report("B1", spec, cases, thr, span, cfg, len(ts))


def _threshold(mask, ts, vals, name, pairs=None):
    if np.all(mask):
        return (True, None)
    k = int(np.argmin(mask))
    return (False, Witness(1, "(i)" if "<=" in name else "(ii)", name, float(vals.flat[k]),
                           float(ts.flat[k]) if np.size(ts) > k else float("nan")))


def check_B2(spec: ProblemSpec, search: LambdaSearchConfig | None = None) -> AssumptionReport:
    """One-dimensional relaxation of (A3) through ``F(theta1, theta2; t, y)``."""
    if spec.n != 1:
        raise ValueError("B2 is defined for n = 1 only")
    cfg = search or LambdaSearchConfig()
    span = cfg.span if cfg.span is not None else 10.0 * spec.K * (1.0 + spec.T)
    eps_t = compute_constants(spec).eps_tilde
    rng = np.random.default_rng(cfg.sampler.seed)
    p1, p2 = _lattice_pairs(1, cfg.sampler, rng)
    p1 = np.concatenate([p1[:1], p1])
    p2 = np.concatenate([p1[:1], p2])
    th = lambda p: (p[:, 0], p[:, 1:])

    def data(nt):
        ts = np.linspace(0.0, spec.T, nt)
        c0, c1, c2, H, tt = [], [], [], [], []
        for t in ts:
            q = diff_quotients(spec, float(t), th(p1), th(p2))
            c0.append(spec.eval_f1(t)[0] + q.f3[:, 0])
            c1.append(spec.eval_b1(t) + q.b3 + spec.eval_f2(t)[0, 0] + q.f4[:, 0, 0])
            c2.append(spec.eval_b2(t)[0] + q.b4[:, 0])
            H.append(spec.h1[0] + q.h2q[:, 0])
            tt.append(np.full(len(p1), t))
        cat = np.concatenate
        return cat(tt), cat(c0), cat(c1), cat(c2), cat(H)

    ts, c0, c1, c2, H = data(cfg.t_points)
    ts4, d0, d1, d2, H4 = data(2 * (cfg.t_points - 1) + 1)
    thr = {
        "(i)": _threshold(c2 <= eps_t, ts, c2, "b2+b4<=eps_tilde"),
        "(ii)": _threshold(c2 >= -eps_t, ts, c2, "b2+b4>=-eps_tilde"),
    }
    cases = {
        "(i)": (_LambdaProblem(c0, c1, c2, H, +1), _LambdaProblem(d0, d1, d2, H4, +1)),
        "(ii)": (_LambdaProblem(c0, c1, c2, H, -1), _LambdaProblem(d0, d1, d2, H4, -1)),
    }
    return _b_report("B2", spec, cases, thr, span, cfg, len(ts))
