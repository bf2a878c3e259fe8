"""Flat ``key = value`` run configuration and construction of problems from it."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .expr import ExprSyntaxError, compile_expr
from .problem import LQCoefficients, ProblemSpec, preset_example1, preset_example2, preset_example3, zero_spec


class ConfigError(ValueError):
    pass


@dataclass
class Grids:
    t_steps: int = 200
    nu_min: float = -2.0
    nu_max: float = 2.0
    nu_steps: int = 80
    x_min: float = -1.0
    x_max: float = 1.0
    x_steps: int = 2

    def validate(self):
        if self.t_steps < 1 or self.nu_steps < 1 or self.x_steps < 1:
            raise ConfigError("grid step counts must be >= 1")
        if not (self.nu_min < self.nu_max and self.x_min < self.x_max):
            raise ConfigError("grid bounds must be strictly increasing")

    @property
    def nugrid(self):
        return np.linspace(self.nu_min, self.nu_max, self.nu_steps + 1)

    @property
    def xgrid(self):
        return np.linspace(self.x_min, self.x_max, self.x_steps + 1)


@dataclass
class Sim:
    N: int = 10_000
    seed: int = 0
    mode: str = "fbode_mean"
    nu0: float = 0.0
    init: str = "point"
    init_scale: float = 0.0
    steps: int | None = None  # defaults to grids.t_steps
    workers: int = 1


@dataclass
class Tolerances:
    solver: float = 1e-10  # Picard stopping tolerance
    zero: float = 1e-8  # zero-solution check
    cross_check: float = 1e-5  # oracle vs decoupling field
    decomposition: float = 1e-8  # master = x * riccati + phi residual
    grad_rel: float = 1e-3  # variational vs central difference
    mc_sigmas: float = 3.0  # Monte Carlo band in standard errors

    def strict(self) -> "Tolerances":
        return Tolerances(self.solver / 10, self.zero / 10, self.cross_check / 10, self.decomposition / 10,
                          self.grad_rel / 10, self.mc_sigmas)


@dataclass
class RunConfig:
    preset: str | None = "example3"
    params: dict = field(default_factory=dict)
    inline: dict = field(default_factory=dict)  # problem.* expression entries
    grids: Grids = field(default_factory=Grids)
    sim: Sim = field(default_factory=Sim)
    tol: Tolerances = field(default_factory=Tolerances)
    out: str = "out"


def _parse_value(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    entries = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {ln}: empty key or value")
        entries[key] = value
    return entries


_SECTIONS = {"grids": Grids, "sim": Sim, "tol": Tolerances}


def build_config(entries: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for key, value in entries.items():
        head, _, rest = key.partition(".")
        if head == "problem":
            if rest == "preset":
                cfg.preset = None if value in ("none", "inline") else value
            else:
                cfg.inline[rest] = value
        elif head == "params":
            cfg.params[rest] = _parse_value(value)
        elif head in _SECTIONS:
            section = getattr(cfg, head)
            names = {f.name: f for f in dataclasses.fields(section)}
            if rest not in names:
                raise ConfigError(f"unknown key {key!r}")
            cur = getattr(section, rest)
            if isinstance(cur, bool):
                v = value.lower() in ("1", "true", "yes")
            elif isinstance(cur, int) or rest in ("steps",):
                v = int(float(value))
            elif isinstance(cur, float):
                v = float(value)
            else:
                v = value
            setattr(section, rest, v)
        elif key == "out":
            cfg.out = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    if cfg.inline and "problem.preset" not in entries:
        cfg.preset = None  # inline coefficients without an explicit preset
    cfg.grids.validate()
    if cfg.preset is None:
        inline_spec(cfg.inline, cfg.params)  # every expression parses before any solve
    return cfg


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    entries = {}
    if path:
        with open(path) as fh:
            entries.update(parse_config_text(fh.read()))
    entries.update(overrides or {})
    return build_config(entries)


# -- problems from configuration ------------------------------------------------------------------

_EX3_KEYS = [f.name for f in dataclasses.fields(LQCoefficients)]


def _num(params, key, default):
    v = params.get(key, default)
    return float(v)


def spec_from_config(cfg: RunConfig) -> ProblemSpec:
    p = cfg.params
    if cfg.preset == "example1":
        return preset_example1(_num(p, "alpha", -1.0), _num(p, "lambda", 1.0), _num(p, "theta", 1.0), _num(p, "T", 1.0))
    if cfg.preset == "example2":
        return preset_example2(_num(p, "alpha", -1.0), _num(p, "beta", 0.5), _num(p, "lambda", 0.5),
                               _num(p, "theta", 0.5), _num(p, "T", 1.0))
    if cfg.preset == "example3":
        from .problem import EXAMPLE3_DEFAULT

        kw = {}
        for k in _EX3_KEYS:
            if k in p:
                v = p[k]
                if isinstance(v, str):
                    e = compile_expr(v, {"t"})
                    kw[k] = (lambda e: (lambda t: float(e(t=t))))(e)
                else:
                    kw[k] = float(v)
        return preset_example3(dataclasses.replace(EXAMPLE3_DEFAULT, **kw))
    if cfg.preset == "zero":
        return zero_spec(_num(p, "T", 1.0))
    if cfg.preset is not None:
        raise ConfigError(f"unknown preset {cfg.preset!r}")
    return inline_spec(cfg.inline, p)


def inline_spec(entries: dict, params: dict) -> ProblemSpec:
    """Build a problem from ``problem.*`` expressions; every expression is parsed up front."""
    n = int(entries.get("n", 1))
    d = int(entries.get("d", 1))
    T = float(entries.get("T", params.get("T", 1.0)))
    K = float(entries.get("K", 1.0))
    pnames = {k: float(v) for k, v in params.items() if not isinstance(v, str)}
    ys = [f"y{i + 1}" for i in range(n)]
    ybs = [f"ybar{i + 1}" for i in range(n)]
    allowed = {
        "b1": {"t"}, "b2": {"t"}, "f1": {"t"}, "f2": {"t"}, "h1": set(),
        "b0": {"t", "xbar", *ybs}, "f0": {"t", "xbar", *ybs},
        "sigma": {"t", "x", *ys, "xbar", *ybs}, "h2": {"xbar"},
    }
    known = set(allowed) | {"n", "d", "T", "K"}
    for key in entries:
        if key.split(".")[0] not in known:
            raise ConfigError(f"unknown problem key {key!r}")

    def get(name, idx=(), default="0"):
        key = ".".join([name, *map(str, idx)])
        if key not in entries and all(i == 1 for i in idx) and name in entries:
            key = name  # scalar shorthand: problem.b2 for problem.b2.1
        elif key not in entries and not idx and f"{name}.1" in entries:
            key = f"{name}.1"
        src = entries.get(key, default)
        try:
            return compile_expr(src, allowed[name] | set(pnames))
        except ExprSyntaxError as err:
            raise ConfigError(f"problem.{key}: {err}") from err

    b1 = get("b1")
    b2 = [get("b2", (i + 1,)) for i in range(n)]
    f1 = [get("f1", (i + 1,)) for i in range(n)]
    f2 = [[get("f2", (i + 1, j + 1)) for j in range(n)] for i in range(n)]
    h1 = [get("h1", (i + 1,)) for i in range(n)]
    b0 = get("b0")
    f0 = [get("f0", (i + 1,)) for i in range(n)]
    sig = [get("sigma", (j + 1,)) for j in range(d)]
    h2 = [get("h2", (i + 1,)) for i in range(n)]

    def env(t=None, x=None, y=None, xbar=None, ybar=None):
        e = dict(pnames)
        if t is not None:
            e["t"] = t
        if x is not None:
            e["x"] = x
        if xbar is not None:
            e["xbar"] = xbar
        if y is not None:
            e.update({f"y{i + 1}": y[..., i] for i in range(n)})
        if ybar is not None:
            e.update({f"ybar{i + 1}": ybar[..., i] for i in range(n)})
        return e

    def vec(exprs, shape, **kw):
        e = env(**kw)
        return np.stack([np.broadcast_to(np.asarray(ex(**e), dtype=float), shape) for ex in exprs], axis=-1)

    return ProblemSpec(
        T=T, n=n, d=d, K=K,
        b1=lambda t: float(b1(**env(t=t))),
        b2=lambda t: np.array([float(e(**env(t=t))) for e in b2]),
        f1=lambda t: np.array([float(e(**env(t=t))) for e in f1]),
        f2=lambda t: np.array([[float(e(**env(t=t))) for e in row] for row in f2]),
        b0=lambda t, xb, yb: np.broadcast_to(np.asarray(b0(**env(t=t, xbar=xb, ybar=yb)), dtype=float), np.shape(xb)),
        f0=lambda t, xb, yb: vec(f0, np.shape(xb), t=t, xbar=xb, ybar=yb),
        sigma=lambda t, x, y, xb, yb: vec(sig, np.shape(x), t=t, x=x, y=y, xbar=xb, ybar=yb),
        h1=np.array([float(e(**env())) for e in h1]),
        h2=lambda xb: vec(h2, np.shape(xb), xbar=xb),
        name="inline",
    )

