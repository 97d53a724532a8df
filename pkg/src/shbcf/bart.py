"""Single-forest backfitting MCMC: continuous BART, its sparse (Dirichlet) variant, and probit BART.

Everything here works on an internally standardized outcome. Continuous
outcomes are mapped to ``[-0.5, 0.5]`` and mapped back on output; probit
latents live on the standard-normal scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

from . import _engine
from .errors import ConfigurationError, DegenerateDataError, InputError
from .shrinkage import (
    ShrinkConfig,
    SplitProbState,
    init_split_state,
    update_alpha,
    update_split_probs,
)
from .trees import CutpointGrid, Forest, build_cutpoints, forest_from_arrays

__all__ = [
    "BartConfig",
    "SufficientStats",
    "ForestSampler",
    "SamplerState",
    "BartPosterior",
    "ProbitPosterior",
    "propose_and_accept_tree",
    "leaf_posterior",
    "sample_leaf_values",
    "sigma_prior_scale",
    "sample_sigma",
    "fit_bart",
    "fit_probit_bart",
    "probit_config",
    "as_rng",
]

MOVES = ("grow", "prune", "change")


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class BartConfig:
    """Prior and MCMC settings for one forest.

    ``sigma_prior_df`` / ``sigma_prior_quantile`` calibrate the
    scaled-inverse-chi-square prior on the error variance so that it puts
    probability ``q`` below the sample variance of the outcome.
    """

    m: int = 200
    nu_depth: float = 0.95
    beta_depth: float = 2.0
    k_leaf: float = 2.0
    sigma_prior_df: float = 3.0
    sigma_prior_quantile: float = 0.90
    n_iter: int = 4000
    n_burn: int = 2000
    move_probs: tuple[float, float, float] = (0.25, 0.25, 0.50)
    max_cuts: int = 100
    min_leaf: int = 1
    max_depth: int = 10
    shrink_start: int | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError(f"m must be >= 1, got {self.m}")
        if not 0.0 < self.nu_depth < 1.0:
            raise ConfigurationError(f"nu_depth must lie in (0, 1), got {self.nu_depth}")
        if self.beta_depth < 0:
            raise ConfigurationError(f"beta_depth must be >= 0, got {self.beta_depth}")
        if self.k_leaf <= 0:
            raise ConfigurationError("k_leaf must be positive")
        if self.sigma_prior_df <= 0 or not 0.0 < self.sigma_prior_quantile < 1.0:
            raise ConfigurationError("invalid error-variance prior")
        if not 0 <= self.n_burn < self.n_iter:
            raise ConfigurationError(f"need 0 <= n_burn < n_iter, got {self.n_burn}, {self.n_iter}")
        probs = np.asarray(self.move_probs, dtype=float)
        if probs.shape != (3,) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0):
            raise ConfigurationError(f"move_probs must be 3 nonnegative numbers summing to 1")
        if self.min_leaf < 1 or self.max_depth < 0 or not 1 <= self.max_depth <= 16:
            raise ConfigurationError("need min_leaf >= 1 and 1 <= max_depth <= 16")
        if self.max_cuts < 1:
            raise ConfigurationError("max_cuts must be >= 1")

    @property
    def shrink_start_iter(self) -> int:
        return self.n_burn // 2 if self.shrink_start is None else self.shrink_start


def probit_config(**overrides) -> BartConfig:
    """Defaults used for propensity models: 50 trees, 2000 sweeps, 1000 burn-in."""
    base = dict(m=50, n_iter=2000, n_burn=1000)
    base.update(overrides)
    return BartConfig(**base)


@dataclass(frozen=True)
class SufficientStats:
    """Per-leaf summaries; ``sum_w`` / ``sum_wr`` carry the forest's observation weights."""

    n: int
    sum_r: float
    sum_r2: float
    sum_w: float
    sum_wr: float

    @classmethod
    def from_residuals(cls, r, w=None) -> SufficientStats:
        r = np.asarray(r, dtype=float)
        w = np.ones_like(r) if w is None else np.asarray(w, dtype=float)
        return cls(int(np.count_nonzero(w)), float(r.sum()), float(r @ r),
                   float(w @ w), float(w @ r))


def leaf_posterior(stats: SufficientStats, sigma: float, sigma_leaf: float) -> tuple[float, float]:
    """Mean and variance of the conjugate normal leaf posterior."""
    if sigma <= 0 or sigma_leaf <= 0:
        raise ConfigurationError("sigma and sigma_leaf must be positive")
    var = 1.0 / (stats.sum_w / sigma**2 + 1.0 / sigma_leaf**2)
    return var * stats.sum_wr / sigma**2, var


def sample_leaf_values(stats, sigma: float, sigma_leaf: float, rng=None) -> np.ndarray:
    """One conjugate draw per leaf, given that leaf's sufficient statistics."""
    rng = as_rng(rng)
    out = np.empty(len(stats))
    for k, st in enumerate(stats):
        mean, var = leaf_posterior(st, sigma, sigma_leaf)
        out[k] = mean + math.sqrt(var) * rng.standard_normal()
    return out


def sigma_prior_scale(sd: float, df: float = 3.0, q: float = 0.90) -> float:
    """Scale ``lam`` with ``P(sigma < sd) = q`` under ``sigma^2 ~ df * lam / chi2_df``."""
    return sd**2 * chi2.ppf(1.0 - q, df) / df


def sample_sigma(residuals, nu_sigma: float, lambda_sigma: float, rng=None) -> float:
    """Draw ``sigma`` from the scaled-inverse-chi-square conjugate posterior."""
    rng = as_rng(rng)
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise InputError("need at least one residual")
    scale = nu_sigma * lambda_sigma + float(r @ r)
    return math.sqrt(scale / rng.chisquare(nu_sigma + r.size))


class ForestSampler:
    """Mutable heap-array forest plus the fixed data it is fit against.

    ``fit`` always equals the forest's prediction at the training rows.
    """

    def __init__(self, xb: np.ndarray, ncuts: np.ndarray, m: int, tau: float, *,
                 nu: float = 0.95, beta: float = 2.0, max_depth: int = 10, min_leaf: int = 1,
                 move_probs=(0.25, 0.25, 0.5), weights=None, init_value: float = 0.0):
        self.xb = np.ascontiguousarray(xb, dtype=np.int32)
        self.ncuts = np.asarray(ncuts, dtype=np.int32)
        p, n = self.xb.shape
        self.p, self.n, self.m = p, n, m
        self.tau = float(tau)
        self.nu, self.beta = float(nu), float(beta)
        self.max_depth, self.min_leaf = int(max_depth), int(min_leaf)
        self.move_probs = tuple(float(x) for x in move_probs)
        self.w = np.ones(n) if weights is None else np.ascontiguousarray(weights, dtype=float)
        cap = 2 ** (self.max_depth + 1) - 1
        self.var = np.empty((m, cap), dtype=np.int32)
        self.cut = np.empty((m, cap), dtype=np.int32)
        self.value = np.empty((m, cap))
        self.state = np.empty((m, cap), dtype=np.int8)
        self.grow = np.empty((m, cap), dtype=np.bool_)
        self.nodes = np.empty((m, cap), dtype=np.int32)
        self.nnodes = np.empty(m, dtype=np.int32)
        self.leaf_of = np.empty((m, n), dtype=np.int32)
        _engine.init_forest(self.var, self.cut, self.value, self.state, self.grow, self.nodes,
                            self.nnodes, self.leaf_of, self.xb, self.ncuts, self.w,
                            self.min_leaf, self.max_depth, init_value)
        self.fit = np.full(n, m * init_value)
        self.move_stats = np.zeros((3, 2), dtype=np.int64)

    def sweep(self, rng, target, sigma2: float, s=None, attempts=None) -> None:
        s = np.full(self.p, 1.0 / self.p) if s is None else np.asarray(s, dtype=float)
        attempts = np.zeros(self.p, dtype=np.int64) if attempts is None else attempts
        _engine.sweep(rng, self.var, self.cut, self.value, self.state, self.grow, self.nodes,
                      self.nnodes, self.leaf_of, self.xb, self.ncuts, self.w,
                      np.ascontiguousarray(target, dtype=float), self.fit, float(sigma2),
                      self.tau**2, self.nu, self.beta, self.max_depth, self.min_leaf,
                      *self.move_probs, s, attempts, self.move_stats)

    def tree_fit(self, j: int) -> np.ndarray:
        return self.value[j, self.leaf_of[j]]

    def partial_residual(self, target, j: int) -> np.ndarray:
        """``target - w * (fit excluding tree j)``."""
        return np.asarray(target) - self.w * (self.fit - self.tree_fit(j))

    def predict(self, xb) -> np.ndarray:
        return _engine.predict_forest(self.var, self.cut, self.value, self.state,
                                      np.ascontiguousarray(xb, dtype=np.int32))

    def recompute_fit(self) -> np.ndarray:
        return self.predict(self.xb)

    def split_counts(self) -> np.ndarray:
        return _engine.split_counts(self.var, self.state, self.nodes, self.nnodes, self.p)

    def n_leaves(self) -> np.ndarray:
        return np.array([(self.state[j] == 1).sum() for j in range(self.m)])

    def leaf_stats(self, j: int, R) -> dict[int, SufficientStats]:
        out = {}
        for nd in np.flatnonzero(self.state[j] == 1):
            mask = self.leaf_of[j] == nd
            out[int(nd)] = SufficientStats.from_residuals(np.asarray(R)[mask], self.w[mask])
        return out

    def to_forest(self, grid: CutpointGrid, scale: float = 1.0, shift: float = 0.0) -> Forest:
        return forest_from_arrays(self.var, self.cut, self.value, self.state, grid,
                                  (self.nu, self.beta), scale, shift)


@dataclass
class SamplerState:
    """A forest being fit against ``target`` with error s.d. ``sigma``."""

    sampler: ForestSampler
    target: np.ndarray
    sigma: float
    rng: np.random.Generator

    def residual_cache(self, j: int) -> np.ndarray:
        return self.sampler.partial_residual(self.target, j)


def propose_and_accept_tree(state: SamplerState, tree_index: int, split_probs=None):
    """One grow/prune/change Metropolis-Hastings step on a single tree.

    Returns ``(accepted, move, covariate)`` where ``move`` is one of
    ``"grow"``, ``"prune"``, ``"change"`` (``None`` if the tree admits no
    move) and ``covariate`` is the splitting variable a grow/change proposal
    drew (``None`` for prune). Leaf values and the forest fit are refreshed
    afterwards, so the state stays coherent.
    """
    fs = state.sampler
    s = np.full(fs.p, 1.0 / fs.p) if split_probs is None else np.asarray(split_probs, float)
    if s.shape != (fs.p,) or np.any(s < 0) or not math.isclose(s.sum(), 1.0, rel_tol=1e-9):
        raise InputError("split_probs must be a probability vector over the predictors")
    j = int(tree_index)
    n, p, cap = fs.n, fs.p, fs.var.shape[1]
    Fm, R = np.empty(n), np.empty(n)
    Wacc, Sacc = np.empty(cap), np.empty(cap)
    target = np.ascontiguousarray(state.target, dtype=float)
    _engine.residual_pass(j, fs.value, fs.leaf_of, fs.fit, target, fs.w, Fm, R, Wacc, Sacc,
                          fs.nodes, fs.nnodes)
    move, accepted, v = _engine.propose_tree(
        state.rng, j, fs.var, fs.cut, fs.state, fs.grow, fs.nodes, fs.nnodes, fs.leaf_of,
        fs.xb, fs.ncuts, fs.w, R, state.sigma**2, fs.tau**2, fs.nu, fs.beta, fs.max_depth,
        fs.min_leaf, *fs.move_probs, s, np.cumsum(s), _engine.depth_table(cap),
        np.empty(n, np.int64), np.empty(n, np.int64), np.empty(n, np.int64),
        np.empty(n, np.int32), np.empty(p, np.int64), np.empty(p, np.int64), Wacc, Sacc)
    _engine.sample_leaves(state.rng, j, fs.value, fs.state, fs.nodes, fs.nnodes,
                          state.sigma**2, fs.tau**2, Wacc, Sacc)
    fs.fit[:] = Fm + fs.tree_fit(j)
    name = MOVES[move] if move >= 0 else None
    return bool(accepted), name, (int(v) if v >= 0 else None)


@dataclass
class BartPosterior:
    """Post-burn-in draws on the caller's outcome scale."""

    fit_train: np.ndarray
    fit_test: np.ndarray | None
    sigma: np.ndarray
    split_probs: np.ndarray
    alpha: np.ndarray
    split_counts: np.ndarray
    forest: Forest
    move_stats: dict = field(default_factory=dict)

    @property
    def mean_train(self) -> np.ndarray:
        return self.fit_train.mean(axis=0)

    @property
    def mean_test(self) -> np.ndarray | None:
        return None if self.fit_test is None else self.fit_test.mean(axis=0)


def _check_xy(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise InputError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InputError("X and y must be finite")
    return X, y


def _shrink_counts(sampler: ForestSampler, attempts: np.ndarray, mode: str) -> np.ndarray:
    return attempts.copy() if mode == "attempted" else sampler.split_counts()


def _shrink_step(state: SplitProbState, counts, cfg: ShrinkConfig, rng) -> None:
    state.u[:] = counts
    update_split_probs(state, rng)
    if cfg.update_alpha:
        update_alpha(state, rng, cfg.grid_size)


def fit_bart(X, y, config: BartConfig = BartConfig(), *, X_test=None,
             split_state: SplitProbState | None = None, shrink: ShrinkConfig | None = None,
             seed=0) -> BartPosterior:
    """Fit a sum-of-trees regression of ``y`` on ``X``.

    Passing ``split_state`` (or ``shrink``) turns on the Dirichlet sparsity
    prior: after each sweep (from ``config.shrink_start_iter`` on) the
    splitting probabilities and their concentration are redrawn.
    """
    X, y = _check_xy(X, y)
    rng = as_rng(seed)
    y_min, y_max = float(y.min()), float(y.max())
    if y_max - y_min <= 0:
        raise DegenerateDataError("outcome has zero variance")
    grid = build_cutpoints(X, config.max_cuts)
    if not grid.usable.any():
        warnings.warn("no covariate has a usable cutpoint; trees stay single leaves", stacklevel=2)
    center, scale = 0.5 * (y_max + y_min), y_max - y_min
    ys = (y - center) / scale
    tau = 0.5 / (config.k_leaf * math.sqrt(config.m))
    lam = sigma_prior_scale(float(np.std(ys, ddof=1)), config.sigma_prior_df,
                            config.sigma_prior_quantile)
    sampler = ForestSampler(grid.bin(X), grid.n_cuts, config.m, tau, nu=config.nu_depth,
                            beta=config.beta_depth, max_depth=config.max_depth,
                            min_leaf=config.min_leaf, move_probs=config.move_probs)
    xb_test = None if X_test is None else grid.bin(X_test)

    p = X.shape[1]
    if split_state is None and shrink is not None:
        split_state = init_split_state(p, shrink.rho, shrink.a, shrink.b, shrink.weights)
    if split_state is not None and split_state.n_predictors != p:
        raise InputError(f"split_state covers {split_state.n_predictors} predictors, X has {p}")
    shrink = shrink or ShrinkConfig()
    s = np.full(p, 1.0 / p) if split_state is None else split_state.s

    keep = config.n_iter - config.n_burn
    fit_train = np.empty((keep, X.shape[0]))
    fit_test = None if xb_test is None else np.empty((keep, xb_test.shape[1]))
    sig = np.empty(keep)
    s_draws = np.empty((keep, p))
    a_draws = np.full(keep, np.nan)
    counts = np.empty((keep, p), dtype=np.int64)
    sigma2 = float(np.var(ys, ddof=1))
    attempts = np.zeros(p, dtype=np.int64)
    for it in range(config.n_iter):
        attempts[:] = 0
        sampler.sweep(rng, ys, sigma2, s, attempts)
        if split_state is not None and it >= config.shrink_start_iter:
            _shrink_step(split_state, _shrink_counts(sampler, attempts, shrink.count_mode),
                         shrink, rng)
            s = split_state.s
        sigma2 = sample_sigma(ys - sampler.fit, config.sigma_prior_df, lam, rng) ** 2
        if it >= config.n_burn:
            b = it - config.n_burn
            fit_train[b] = sampler.fit * scale + center
            if xb_test is not None:
                fit_test[b] = sampler.predict(xb_test) * scale + center
            sig[b] = math.sqrt(sigma2) * scale
            s_draws[b] = s
            if split_state is not None:
                a_draws[b] = split_state.alpha
            counts[b] = sampler.split_counts()
    stats = {mv: tuple(int(x) for x in sampler.move_stats[k]) for k, mv in enumerate(MOVES)}
    return BartPosterior(fit_train, fit_test, sig, s_draws, a_draws, counts,
                         sampler.to_forest(grid, scale, center), stats)


@dataclass
class ProbitPosterior:
    """Post-burn-in draws of ``P(Z = 1 | x)``."""

    prob_train: np.ndarray
    prob_test: np.ndarray | None
    split_counts: np.ndarray

    @property
    def mean_train(self) -> np.ndarray:
        return self.prob_train.mean(axis=0)

    @property
    def mean_test(self) -> np.ndarray | None:
        return None if self.prob_test is None else self.prob_test.mean(axis=0)


def fit_probit_bart(X, Z, config: BartConfig | None = None, *, X_test=None, seed=0
                    ) -> ProbitPosterior:
    """Probit BART by latent-variable data augmentation (error s.d. fixed at 1)."""
    config = config or probit_config()
    X, z = _check_xy(X, Z)
    if not np.all((z == 0) | (z == 1)):
        raise InputError("Z must be binary 0/1")
    zbar = z.mean()
    if zbar in (0.0, 1.0):
        raise DegenerateDataError("both treatment classes must be present")
    rng = as_rng(seed)
    grid = build_cutpoints(X, config.max_cuts)
    offset = float(ndtri(zbar))
    tau = 3.0 / (config.k_leaf * math.sqrt(config.m))
    sampler = ForestSampler(grid.bin(X), grid.n_cuts, config.m, tau, nu=config.nu_depth,
                            beta=config.beta_depth, max_depth=config.max_depth,
                            min_leaf=config.min_leaf, move_probs=config.move_probs)
    xb_test = None if X_test is None else grid.bin(X_test)
    keep = config.n_iter - config.n_burn
    prob = np.empty((keep, X.shape[0]))
    prob_test = None if xb_test is None else np.empty((keep, xb_test.shape[1]))
    counts = np.empty((keep, X.shape[1]), dtype=np.int64)
    latent = np.empty(X.shape[0])
    for it in range(config.n_iter):
        _engine.probit_latents(rng, sampler.fit + offset, z, latent)
        sampler.sweep(rng, latent - offset, 1.0)
        if it >= config.n_burn:
            b = it - config.n_burn
            prob[b] = ndtr(sampler.fit + offset)
            if xb_test is not None:
                prob_test[b] = ndtr(sampler.predict(xb_test) + offset)
            counts[b] = sampler.split_counts()
    return ProbitPosterior(prob, prob_test, counts)
