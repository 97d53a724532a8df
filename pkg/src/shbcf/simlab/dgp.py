"""Declarative data-generating processes for the simulation studies.

Surfaces are written as small arithmetic expressions over ``X1 .. XP`` (1-based,
like the formulas they transcribe), ``mu`` (the prognostic surface, usable in
the propensity), ``U`` (a per-unit Uniform(0, 1) draw) and the constant
``PI``. Available functions: ``sin cos exp log sqrt abs Phi logistic``.
Expressions are parsed once and evaluated by a whitelisting AST walker, so a
spec file can never execute arbitrary code.
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from ..bcf import Dataset
from ..errors import ConfigurationError

__all__ = [
    "DgpSpec",
    "Expression",
    "SimulatedData",
    "generate",
    "correlation_matrix",
]

_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "Phi": ndtr,
    "logistic": expit,
}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


class Expression:
    """A parsed surface such as ``"3 + X1 + 0.8*sin(X2)"``."""

    def __init__(self, source: str):
        self.source = source
        try:
            self._tree = ast.parse(source, mode="eval").body
        except SyntaxError as exc:
            raise ConfigurationError(f"cannot parse expression {source!r}: {exc.msg}") from None
        self.covariates: set[int] = set()
        self.names: set[str] = set()
        self._check(self._tree)

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ConfigurationError(f"only numeric constants allowed in {self.source!r}")
        elif isinstance(node, ast.Name):
            name = node.id
            if name.startswith("X") and name[1:].isdigit():
                idx = int(name[1:])
                if idx < 1:
                    raise ConfigurationError(f"covariates are numbered from X1 in {self.source!r}")
                self.covariates.add(idx)
            elif name in ("mu", "U", "PI"):
                self.names.add(name)
            else:
                raise ConfigurationError(f"unknown name {name!r} in {self.source!r}")
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                raise ConfigurationError(f"unknown function in {self.source!r}")
            if len(node.args) != 1 or node.keywords:
                raise ConfigurationError(f"functions take exactly one argument in {self.source!r}")
            self._check(node.args[0])
        else:
            raise ConfigurationError(
                f"unsupported syntax {type(node).__name__} in {self.source!r}")

    def evaluate(self, X: np.ndarray, **env) -> np.ndarray:
        n = X.shape[0]

        def ev(node):
            if isinstance(node, ast.Constant):
                return float(node.value)
            if isinstance(node, ast.Name):
                if node.id == "PI":
                    return math.pi
                if node.id in env:
                    return env[node.id]
                return X[:, int(node.id[1:]) - 1]
            if isinstance(node, ast.BinOp):
                return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
            if isinstance(node, ast.UnaryOp):
                return _UNOPS[type(node.op)](ev(node.operand))
            return _FUNCS[node.func.id](ev(node.args[0]))

        return np.broadcast_to(np.asarray(ev(self._tree), dtype=float), (n,)).copy()

    def __repr__(self):
        return f"Expression({self.source!r})"


def correlation_matrix(P: int, base: float, offset: float = 0.1) -> np.ndarray:
    """``base**|j-k| + offset * 1{j != k}`` (unit diagonal)."""
    d = np.abs(np.subtract.outer(np.arange(P), np.arange(P)))
    return base**d + offset * (d != 0)


@dataclass(frozen=True)
class DgpSpec:
    """One simulated scenario.

    ``law`` is ``"gaussian"`` (all columns multivariate normal) or
    ``"copula"`` (the first ``n_continuous`` columns are the standard-normal
    marginals, the rest are Bernoulli(``binary_rate``) through the inverse
    CDF, ``1{u > 1 - binary_rate}``, on the copula's uniform scale; set
    ``binary_rule="lower"`` for ``1{u <= binary_rate}`` instead). ``noise`` is ``("abs", s)``, ``("mu_sd", f)`` or ``("tau_sd", f)``:
    error s.d. ``s``, or ``f`` times the sample s.d. of the generated
    prognostic / effect surface.
    """

    name: str
    N: int
    P: int
    mu: str
    tau: str
    pi: str
    law: str = "gaussian"
    corr_base: float = 0.6
    corr_offset: float = 0.1
    n_continuous: int | None = None
    binary_rate: float = 0.3
    binary_rule: str = "quantile"
    noise: tuple[str, float] = ("abs", 1.0)
    seed: int = 0
    description: str = ""
    _parsed: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.N < 2 or self.P < 1:
            raise ConfigurationError(f"{self.name}: need N >= 2 and P >= 1")
        if self.law not in ("gaussian", "copula"):
            raise ConfigurationError(f"{self.name}: unknown covariate law {self.law!r}")
        if self.law == "copula":
            nc = self.P if self.n_continuous is None else self.n_continuous
            if not 0 <= nc <= self.P:
                raise ConfigurationError(f"{self.name}: n_continuous must lie in [0, P]")
            if not 0.0 < self.binary_rate < 1.0:
                raise ConfigurationError(f"{self.name}: binary_rate must lie in (0, 1)")
            if self.binary_rule not in ("quantile", "lower"):
                raise ConfigurationError(
                    f"{self.name}: binary_rule must be 'quantile' or 'lower', got {self.binary_rule!r}")
        kind, value = self.noise
        if kind not in ("abs", "mu_sd", "tau_sd") or not value >= 0:
            raise ConfigurationError(f"{self.name}: bad noise rule {self.noise!r}")
        parsed = {k: Expression(getattr(self, k)) for k in ("mu", "tau", "pi")}
        for k, expr in parsed.items():
            bad = sorted(i for i in expr.covariates if i > self.P)
            if bad:
                raise ConfigurationError(
                    f"{self.name}: {k} uses X{bad[0]} but the scenario has only P={self.P}")
        if "mu" in parsed["mu"].names or "mu" in parsed["tau"].names:
            raise ConfigurationError(f"{self.name}: only the propensity may reference mu")
        object.__setattr__(self, "_parsed", parsed)

    @property
    def n_cont(self) -> int:
        if self.law == "gaussian" or self.n_continuous is None:
            return self.P
        return self.n_continuous

    def surface(self, which: str) -> Expression:
        return self._parsed[which]

    def with_(self, **changes) -> DgpSpec:
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class SimulatedData:
    data: Dataset
    mu: np.ndarray
    tau: np.ndarray
    pi: np.ndarray
    noise_sd: float


def _draw_covariates(spec: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    corr = correlation_matrix(spec.P, spec.corr_base, spec.corr_offset)
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ConfigurationError(f"{spec.name}: covariance matrix is not positive definite") from None
    Zn = rng.standard_normal((spec.N, spec.P)) @ chol.T
    if spec.law == "gaussian":
        return Zn
    X = Zn.copy()
    nc = spec.n_cont
    u = ndtr(Zn[:, nc:])
    if spec.binary_rule == "quantile":
        X[:, nc:] = (u > 1.0 - spec.binary_rate).astype(float)
    else:
        X[:, nc:] = (u <= spec.binary_rate).astype(float)
    return X


def generate(spec: DgpSpec, rng=None) -> SimulatedData:
    """Draw covariates, surfaces, treatment and outcome for one replication."""
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    X = _draw_covariates(spec, rng)
    U = rng.random(spec.N)
    mu = spec.surface("mu").evaluate(X, U=U)
    tau = spec.surface("tau").evaluate(X, U=U)
    pi = spec.surface("pi").evaluate(X, U=U, mu=mu)
    if not np.all((pi > 0) & (pi < 1)):
        raise ConfigurationError(f"{spec.name}: propensity left (0, 1)")
    Z = (rng.random(spec.N) < pi).astype(float)
    kind, value = spec.noise
    sd = {"abs": value, "mu_sd": value * np.std(mu, ddof=1),
          "tau_sd": value * np.std(tau, ddof=1)}[kind]
    Y = mu + tau * Z + sd * rng.standard_normal(spec.N)
    return SimulatedData(Dataset(X, Z, Y), mu, tau, pi, float(sd))
