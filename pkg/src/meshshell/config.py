"""Run configuration: INI sections, validation and the boundary-pressure expression language."""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError

# ---------------------------------------------------------------------------
# expressions:  numbers, t, pi, + - * / ^, sin cos exp, parentheses

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(\S))")
_FUNCS = {"sin": math.sin, "cos": math.cos, "exp": math.exp}


def _tokenize(text: str):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ConfigurationError(f"cannot read expression near {text[pos:]!r}")
        num, name, op = m.groups()
        if num is not None:
            out.append(("num", float(num)))
        elif name is not None:
            out.append(("name", name))
        else:
            if op not in "+-*/^()":
                raise ConfigurationError(f"unexpected character {op!r} in expression")
            out.append(("op", op))
        pos = m.end()
    out.append(("end", None))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, op):
        tok = self.take()
        if tok != ("op", op):
            raise ConfigurationError(f"expected {op!r} in expression")

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise ConfigurationError(f"unexpected trailing input {self.peek()[1]!r} in expression")
        return node

    def expr(self):
        node = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            rhs = self.term()
            node = (lambda a, b: lambda t: a(t) + b(t))(node, rhs) if op == "+" else \
                   (lambda a, b: lambda t: a(t) - b(t))(node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek() in (("op", "*"), ("op", "/")):
            op = self.take()[1]
            rhs = self.unary()
            node = (lambda a, b: lambda t: a(t) * b(t))(node, rhs) if op == "*" else \
                   (lambda a, b: lambda t: a(t) / b(t))(node, rhs)
        return node

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            inner = self.unary()
            return lambda t: -inner(t)
        if self.peek() == ("op", "+"):
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            expo = self.unary()           # right associative
            return lambda t: base(t) ** expo(t)
        return base

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return lambda t, v=val: v
        if kind == "name":
            if val == "t":
                return lambda t: t
            if val == "pi":
                return lambda t: math.pi
            if val in _FUNCS:
                fn = _FUNCS[val]
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return lambda t: fn(arg(t))
            raise ConfigurationError(f"unknown name {val!r} in expression")
        if (kind, val) == ("op", "("):
            node = self.expr()
            self.expect(")")
            return node
        raise ConfigurationError("incomplete expression")


def parse_expression(text: str) -> Callable[[float], float]:
    """Compile an arithmetic expression in ``t`` into a callable."""
    if not text or not text.strip():
        raise ConfigurationError("empty expression")
    fn = _Parser(text).parse()
    return lambda t: float(fn(float(t)))


def load_table(path) -> Callable[[float], float]:
    """Piecewise-linear function from a two-column (time, value) text file."""
    try:
        data = np.loadtxt(path, ndmin=2, comments="#", delimiter=None)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read pressure table {path}: {exc}") from exc
    if data.shape[1] != 2 or data.shape[0] < 1:
        raise ConfigurationError(f"pressure table {path} must have two columns")
    ts, vs = data[:, 0], data[:, 1]
    if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(vs))):
        raise ConfigurationError(f"pressure table {path} has non-finite entries")
    if np.any(np.diff(ts) <= 0):
        raise ConfigurationError(f"pressure table {path} times must increase")
    return lambda t: float(np.interp(t, ts, vs))


def parse_pressure(spec: str, base: Path, key: str) -> Callable[[float], float]:
    spec = spec.strip()
    try:
        if spec.startswith("expr:"):
            return parse_expression(spec[5:])
        if spec.startswith("table:"):
            p = Path(spec[6:].strip())
            return load_table(p if p.is_absolute() else base / p)
        return parse_expression(spec)
    except ConfigurationError as exc:
        raise ConfigurationError(f"[bc] {key}: {exc}") from exc


# ---------------------------------------------------------------------------
# configuration object

@dataclass
class RunConfig:
    path: Path
    R: float
    L: float
    N_z: int
    N_rho: int
    N_theta: int
    T: float
    N: int
    fluid_enabled: bool
    rho_F: float
    mu_F: float
    convection: bool
    c_stab: float
    h: float
    lam: float
    mu: float
    rho_K: float
    eps_K: float | None
    n_z: int
    n_theta: int
    net: str
    rho_S: float
    P_in: Callable[[float], float]
    P_out: Callable[[float], float]
    P_in_text: str
    P_out_text: str
    init: str
    amplitude: float
    out_dir: Path
    cadence: int
    lipschitz_cap: float
    raw: dict = field(default_factory=dict, repr=False)

    def with_steps(self, N: int) -> "RunConfig":
        from dataclasses import replace
        return replace(self, N=int(N))


def _get(cp, section, key, conv, default=None, required=True):
    if not cp.has_section(section):
        if required:
            raise ConfigurationError(f"missing section [{section}]")
        return default
    if not cp.has_option(section, key):
        if required:
            raise ConfigurationError(f"missing key {key} in [{section}]")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key}: cannot read {raw!r}") from exc


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _positive(name, value):
    if not value > 0:
        raise ConfigurationError(f"{name} must be positive (got {value}); all physical constants must be positive")


def parse_config(path) -> RunConfig:
    """Read and validate an INI run configuration."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"configuration file {path} not found")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    base = path.parent
    g = lambda *a, **k: _get(cp, *a, **k)
    fluid_enabled = g("fluid", "enabled", _bool, default=True, required=False)
    cfg = RunConfig(
        path=path,
        R=g("domain", "R", float), L=g("domain", "L", float),
        N_z=g("domain", "N_z", int), N_rho=g("domain", "N_rho", int), N_theta=g("domain", "N_theta", int),
        T=g("time", "T", float), N=g("time", "N", int),
        fluid_enabled=fluid_enabled,
        rho_F=g("fluid", "rho_F", float, default=1.0, required=fluid_enabled),
        mu_F=g("fluid", "mu_F", float, default=1.0, required=fluid_enabled),
        convection=g("fluid", "convection", _bool, default=True, required=False),
        c_stab=g("fluid", "c_stab", float, default=0.1, required=False),
        h=g("shell", "h", float), lam=g("shell", "lambda", float), mu=g("shell", "mu", float),
        rho_K=g("shell", "rho_K", float),
        eps_K=g("shell", "eps_K", float, default=-1.0, required=False),
        n_z=g("shell", "n_z", int, default=16, required=False),
        n_theta=g("shell", "n_theta", int, default=16, required=False),
        net=g("net", "topology", str, default="none", required=False).strip(),
        rho_S=g("net", "rho_S", float, default=1.0, required=False),
        P_in=None, P_out=None,
        P_in_text=g("bc", "P_in", str, default="expr:0", required=False),
        P_out_text=g("bc", "P_out", str, default="expr:0", required=False),
        init=g("init", "preset", str, default="rest", required=False).strip(),
        amplitude=g("init", "amplitude", float, default=0.0, required=False),
        out_dir=Path(g("output", "dir", str, default="out", required=False).strip()),
        cadence=g("output", "cadence", int, default=0, required=False),
        lipschitz_cap=g("monitors", "lipschitz_cap", float, default=np.inf, required=False),
        raw={s: dict(cp.items(s)) for s in cp.sections()},
    )
    if cfg.eps_K is not None and cfg.eps_K < 0:
        cfg.eps_K = None
    for name in ("R", "L", "T", "h", "lam", "mu", "rho_K", "rho_S"):
        _positive(name if name != "lam" else "lambda", getattr(cfg, name))
    if fluid_enabled:
        _positive("rho_F", cfg.rho_F)
        _positive("mu_F", cfg.mu_F)
        _positive("c_stab", cfg.c_stab)
    if cfg.eps_K is not None:
        _positive("eps_K", cfg.eps_K)
    for name in ("N_z", "N_rho", "N_theta"):
        if getattr(cfg, name) < 2:
            raise ConfigurationError(f"[domain] {name} must be at least 2")
    if cfg.N_theta % 2:
        raise ConfigurationError("[domain] N_theta must be even")
    if cfg.N < 0:
        raise ConfigurationError("[time] N must be nonnegative")
    if cfg.n_z < 6 or cfg.n_theta < 4:
        raise ConfigurationError("[shell] need n_z >= 6 and n_theta >= 4")
    if cfg.cadence < 0:
        raise ConfigurationError("[output] cadence must be nonnegative")
    if not cfg.out_dir.is_absolute():
        cfg.out_dir = base / cfg.out_dir
    if cfg.net.lower() != "none":
        p = Path(cfg.net)
        cfg.net = str(p if p.is_absolute() else base / p)
    cfg.P_in = parse_pressure(cfg.P_in_text, base, "P_in")
    cfg.P_out = parse_pressure(cfg.P_out_text, base, "P_out")
    return cfg


def build_problem(cfg: RunConfig):
    """Assemble the :class:`~meshshell.splitting.CoupledProblem` described by ``cfg``."""
    from .composite import StructureModel
    from .fluid import FluidParams
    from .geometry import CylinderRef
    from .net import empty_topology, load_topology
    from .shell import ShellBasis, ShellParams
    from .splitting import CoupledProblem, PressureData

    ref = CylinderRef(cfg.R, cfg.L, cfg.N_z, cfg.N_rho, cfg.N_theta)
    basis = ShellBasis(cfg.R, cfg.L, cfg.n_z, cfg.n_theta)
    params = ShellParams(h=cfg.h, lam=cfg.lam, mu=cfg.mu, rho_K=cfg.rho_K, R=cfg.R, L=cfg.L, eps_K=cfg.eps_K)
    top = empty_topology(cfg.R, cfg.rho_S) if cfg.net.lower() == "none" else load_topology(cfg.net, cfg.R, cfg.rho_S)
    model = StructureModel(basis, params, top)
    fluid = FluidParams(cfg.rho_F, cfg.mu_F, cfg.convection, cfg.c_stab) if cfg.fluid_enabled else None
    return CoupledProblem(ref, model, fluid, PressureData(cfg.P_in, cfg.P_out), cfg.T, cfg.N,
                          lipschitz_cap=cfg.lipschitz_cap)
