"""Dirichlet sparsity prior over splitting probabilities.

The splitting-probability vector ``s`` gets a ``Dirichlet(k_j * alpha / P')``
prior and the standardized concentration ``alpha / (alpha + rho)`` a
``Beta(a, b)`` hyperprior. Each sweep draws ``s`` from its conjugate
Dirichlet posterior given the split counts ``u`` and then ``alpha`` from a
discretized grid posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigurationError

__all__ = [
    "ShrinkConfig",
    "SplitProbState",
    "init_split_state",
    "update_split_probs",
    "alpha_grid",
    "alpha_grid_log_density",
    "alpha_grid_posterior",
    "update_alpha",
    "record_attempt",
    "dirichlet_log_sample",
]

# floor on s_j so that log(s_j) stays finite and every covariate stays proposable
_S_FLOOR = 1e-300


@dataclass(frozen=True)
class ShrinkConfig:
    """Settings for one forest's sparsity prior.

    ``rho=None`` means "use the forest's default" (``P'`` for a plain forest;
    the causal model overrides this). ``weights=None`` is the agnostic prior
    ``k_j = 1``. ``count_mode`` selects what feeds the Dirichlet update:
    ``"ensemble"`` counts splitting variables in the trees after each sweep,
    ``"attempted"`` counts this sweep's grow/change proposals.
    """

    rho: float | None = None
    a: float = 0.5
    b: float = 1.0
    weights: tuple[float, ...] | None = None
    grid_size: int = 1000
    count_mode: str = "ensemble"
    update_alpha: bool = True

    def __post_init__(self):
        if self.count_mode not in ("ensemble", "attempted"):
            raise ConfigurationError(f"unknown count_mode {self.count_mode!r}")
        if self.grid_size < 2:
            raise ConfigurationError("grid_size must be >= 2")


@dataclass
class SplitProbState:
    s: np.ndarray
    alpha: float
    rho: float
    a: float
    b: float
    k: np.ndarray
    u: np.ndarray = field(default=None)
    log_s: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.k = np.asarray(self.k, dtype=float)
        if self.u is None:
            self.u = np.zeros(self.s.size, dtype=np.int64)
        if self.log_s is None:
            self.log_s = np.log(self.s)

    @property
    def n_predictors(self) -> int:
        return self.s.size

    def reset_counts(self) -> None:
        self.u[:] = 0

    def copy(self) -> SplitProbState:
        return SplitProbState(self.s.copy(), self.alpha, self.rho, self.a, self.b,
                              self.k.copy(), self.u.copy(), self.log_s.copy())


def init_split_state(P_prime: int, rho: float | None = None, a: float = 0.5, b: float = 1.0,
                     k=None) -> SplitProbState:
    """Uniform ``s`` with ``alpha = rho`` (so ``alpha / (alpha + rho) = 1/2``)."""
    if P_prime < 1:
        raise ConfigurationError(f"need at least one predictor, got {P_prime}")
    rho = float(P_prime) if rho is None else float(rho)
    if rho <= 0:
        raise ConfigurationError(f"rho must be positive, got {rho}")
    if a <= 0 or b <= 0:
        raise ConfigurationError(f"Beta shapes must be positive, got a={a}, b={b}")
    k = np.ones(P_prime) if k is None else np.asarray(k, dtype=float)
    if k.shape != (P_prime,) or np.any(k <= 0) or not np.all(np.isfinite(k)):
        raise ConfigurationError("prior weights k must be a positive vector of length P'")
    return SplitProbState(np.full(P_prime, 1.0 / P_prime), rho, rho, a, b, k)


def record_attempt(state: SplitProbState, covariate_index: int) -> None:
    """Count one grow/change proposal on ``covariate_index`` (accepted or not)."""
    if not 0 <= covariate_index < state.n_predictors:
        raise IndexError(f"covariate index {covariate_index} out of range")
    state.u[covariate_index] += 1


def dirichlet_log_sample(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    """Log of a Dirichlet draw, stable for tiny concentrations.

    Uses ``Gamma(c) = Gamma(c + 1) * U**(1/c)`` so shapes far below one do not
    underflow to exact zeros.
    """
    conc = np.asarray(conc, dtype=float)
    g = np.log(rng.standard_gamma(conc + 1.0))
    g += np.log(rng.random(conc.size)) / conc
    return g - logsumexp(g)


def update_split_probs(state: SplitProbState, rng: np.random.Generator) -> np.ndarray:
    """Draw ``s ~ Dirichlet(k_j alpha / P' + u_j)`` in place and return it."""
    conc = state.k * state.alpha / state.n_predictors + state.u
    log_s = dirichlet_log_sample(rng, conc)
    s = np.maximum(np.exp(log_s), _S_FLOOR)
    s /= s.sum()
    state.s = s
    state.log_s = np.log(s)
    return s


def alpha_grid(grid_size: int) -> np.ndarray:
    """Open uniform grid on ``(0, 1)`` for ``lambda = alpha / (alpha + rho)``."""
    return np.arange(1, grid_size + 1) / (grid_size + 1.0)


def alpha_grid_log_density(lam: np.ndarray, log_s: np.ndarray, k: np.ndarray, rho: float,
                           a: float, b: float) -> np.ndarray:
    """Unnormalized log posterior of ``lambda`` given ``s`` at each grid point."""
    P = log_s.size
    alpha = rho * lam / (1.0 - lam)
    # equal weights share a gammaln column, so the usual k = 1 case costs O(grid)
    k_vals, k_counts = np.unique(np.asarray(k, dtype=float), return_counts=True)
    log_dir = (gammaln(alpha * k.sum() / P)
               - gammaln(np.outer(alpha, k_vals) / P) @ k_counts
               + alpha * (k @ log_s) / P - log_s.sum())
    log_beta = (a - 1.0) * np.log(lam) + (b - 1.0) * np.log1p(-lam)
    return log_beta + log_dir


def alpha_grid_posterior(state: SplitProbState, grid_size: int = 1000):
    """Grid points and normalized posterior weights for ``lambda``."""
    lam = alpha_grid(grid_size)
    logw = alpha_grid_log_density(lam, state.log_s, state.k, state.rho, state.a, state.b)
    weights = np.exp(logw - logsumexp(logw))
    return lam, weights


def update_alpha(state: SplitProbState, rng: np.random.Generator, grid_size: int = 1000) -> float:
    """Gibbs step for ``alpha`` on the discretized ``lambda`` grid; updates ``state``."""
    if grid_size < 2:
        raise ConfigurationError("grid_size must be >= 2")
    lam, weights = alpha_grid_posterior(state, grid_size)
    pick = rng.choice(lam.size, p=weights)
    state.alpha = float(state.rho * lam[pick] / (1.0 - lam[pick]))
    return state.alpha
