"""Two-forest causal model with Dirichlet sparsity priors on both forests.

The outcome is modelled as ``y = mu([x, pi_hat]) + tau(w) * z + e`` with a
prognostic forest ``mu`` that sees the covariates plus the estimated
propensity, and an effect forest ``tau`` that only learns from treated units
(observation weight ``z``). Each sweep updates the mu-trees, their splitting
probabilities, the tau-trees, theirs, and finally the error variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bart import (
    BartConfig,
    ForestSampler,
    _shrink_counts,
    _shrink_step,
    as_rng,
    fit_probit_bart,
    probit_config,
    sample_sigma,
    sigma_prior_scale,
)
from .errors import ConfigurationError, DegenerateDataError, InputError, MissingPropensityError
from .shrinkage import ShrinkConfig, init_split_state
from .trees import build_cutpoints

__all__ = [
    "ShBcfConfig",
    "Dataset",
    "ShBcfPosterior",
    "fit_shbcf",
    "fit_default_bcf",
    "estimate_propensity",
    "cate_summary",
    "ate_estimate",
    "MU_DEFAULTS",
    "TAU_DEFAULTS",
]

MU_DEFAULTS = BartConfig(m=200, nu_depth=0.95, beta_depth=2.0)
TAU_DEFAULTS = BartConfig(m=50, nu_depth=0.25, beta_depth=3.0)


@dataclass(frozen=True)
class ShBcfConfig:
    """Settings for a causal-forest fit.

    ``mu_config`` / ``tau_config`` supply each forest's tree prior (``m``,
    depth prior, ``k_leaf``, move mix, ``min_leaf``, ``max_depth``,
    ``max_cuts``); the error-variance prior comes from ``mu_config``. Chain
    lengths are the top-level ``n_iter`` / ``n_burn``. Setting a shrink
    config to ``None`` freezes that forest's splitting probabilities at
    uniform. ``rho=None`` in a shrink config means ``P + 1`` for mu (``P``
    without the propensity column) and ``P / 2`` for tau.
    """

    mu_config: BartConfig = MU_DEFAULTS
    tau_config: BartConfig = TAU_DEFAULTS
    mu_shrink: ShrinkConfig | None = field(default_factory=ShrinkConfig)
    tau_shrink: ShrinkConfig | None = field(default_factory=ShrinkConfig)
    use_propensity_covariate: bool = True
    k_ps: float = 1.0
    n_iter: int = 4000
    n_burn: int = 2000
    shrink_start: int | None = None
    tau_columns: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ConfigurationError(f"need 0 <= n_burn < n_iter, got {self.n_burn}, {self.n_iter}")
        if not (self.k_ps > 0 and math.isfinite(self.k_ps)):
            raise ConfigurationError(f"k_ps must be positive, got {self.k_ps}")
        if self.shrink_start is not None and self.shrink_start < 0:
            raise ConfigurationError("shrink_start must be >= 0")

    @property
    def shrink_start_iter(self) -> int:
        return self.n_burn // 2 if self.shrink_start is None else self.shrink_start

    def as_default_bcf(self) -> ShBcfConfig:
        return replace(self, mu_shrink=None, tau_shrink=None)


@dataclass
class Dataset:
    """Covariates ``X`` (N x P), binary treatment ``Z``, outcome ``Y`` and optional ``pi_hat``."""

    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    pi_hat: np.ndarray | None = None
    names: list[str] | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Z = np.asarray(self.Z, dtype=float).ravel()
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        n = self.X.shape[0]
        if self.Z.size != n or self.Y.size != n:
            raise InputError(f"X has {n} rows, Z {self.Z.size}, Y {self.Y.size}")
        if not np.all((self.Z == 0) | (self.Z == 1)):
            raise InputError("Z must be binary 0/1")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise InputError("X and Y must be finite")
        if self.pi_hat is not None:
            self.pi_hat = np.asarray(self.pi_hat, dtype=float).ravel()
            if self.pi_hat.size != n:
                raise InputError(f"pi_hat has {self.pi_hat.size} entries, expected {n}")
            if not np.all((self.pi_hat > 0) & (self.pi_hat < 1)):
                raise InputError("pi_hat must lie strictly inside (0, 1)")
        if self.names is None:
            self.names = [f"X{j + 1}" for j in range(self.X.shape[1])]
        elif len(self.names) != self.X.shape[1]:
            raise InputError("one name per covariate column is required")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class ShBcfPosterior:
    """Post-burn-in draws; fits are on the outcome scale, one row per draw."""

    mu_fit: np.ndarray
    tau_fit: np.ndarray
    s_mu: np.ndarray
    s_tau: np.ndarray
    sigma: np.ndarray
    alpha_mu: np.ndarray
    alpha_tau: np.ndarray
    split_counts_mu: np.ndarray
    split_counts_tau: np.ndarray
    mu_names: list[str]
    tau_names: list[str]
    Y: np.ndarray
    Z: np.ndarray
    mu_test: np.ndarray | None = None
    tau_test: np.ndarray | None = None
    move_stats: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.sigma.size

    def residuals(self, draw: int) -> np.ndarray:
        return self.Y - self.mu_fit[draw] - self.tau_fit[draw] * self.Z

    @property
    def tau_mean(self) -> np.ndarray:
        return self.tau_fit.mean(axis=0)


def estimate_propensity(X, Z, config: BartConfig | None = None, *, X_test=None, seed=0):
    """Posterior-mean propensity from probit BART (and at ``X_test`` when given)."""
    post = fit_probit_bart(X, Z, config or probit_config(), X_test=X_test, seed=seed)
    if X_test is None:
        return post.mean_train
    return post.mean_train, post.mean_test


def _shrink_state(cfg: ShrinkConfig | None, n_pred: int, default_rho: float, k=None):
    if cfg is None:
        return None
    weights = k if cfg.weights is None else cfg.weights
    rho = default_rho if cfg.rho is None else cfg.rho
    return init_split_state(n_pred, rho, cfg.a, cfg.b, weights)


def fit_shbcf(data: Dataset, config: ShBcfConfig = ShBcfConfig(), test_X=None, *,
              test_pi_hat=None, seed=0) -> ShBcfPosterior:
    """Run the two-forest backfitting sampler and return post-burn-in draws."""
    rng = as_rng(seed)
    X, z, y = data.X, data.Z, data.Y
    n, P = X.shape
    if z.sum() == 0 or z.sum() == n:
        raise DegenerateDataError("both treatment arms must be populated")
    y_min, y_max = float(y.min()), float(y.max())
    if y_max - y_min <= 0:
        raise DegenerateDataError("outcome has zero variance")
    use_ps = config.use_propensity_covariate
    if use_ps and data.pi_hat is None:
        raise MissingPropensityError(
            "pi_hat is required when the propensity enters the prognostic forest; "
            "estimate it first (estimate_propensity) or disable use_propensity_covariate")
    tau_cols = np.arange(P) if config.tau_columns is None else np.asarray(config.tau_columns)
    if tau_cols.size == 0 or tau_cols.min() < 0 or tau_cols.max() >= P:
        raise ConfigurationError("tau_columns must index columns of X")
    if test_X is not None:
        test_X = np.atleast_2d(np.asarray(test_X, dtype=float))
        if test_X.shape[1] != P:
            raise InputError(f"test_X has {test_X.shape[1]} columns, expected {P}")
        if use_ps:
            if test_pi_hat is None:
                raise MissingPropensityError("test_pi_hat is required with test_X")
            test_pi_hat = np.asarray(test_pi_hat, dtype=float).ravel()
            if test_pi_hat.size != test_X.shape[0]:
                raise InputError("test_pi_hat must have one entry per test row")

    X_mu = np.column_stack([X, data.pi_hat]) if use_ps else X
    X_tau = X[:, tau_cols]
    mu_names = list(data.names) + (["pi_hat"] if use_ps else [])
    tau_names = [data.names[j] for j in tau_cols]
    mc, tc = config.mu_config, config.tau_config
    grid_mu = build_cutpoints(X_mu, mc.max_cuts)
    grid_tau = build_cutpoints(X_tau, tc.max_cuts)
    p_mu, p_tau = X_mu.shape[1], X_tau.shape[1]

    center, scale = 0.5 * (y_max + y_min), y_max - y_min
    ys = (y - center) / scale
    sd_ys = float(np.std(ys, ddof=1))
    mu_sampler = ForestSampler(grid_mu.bin(X_mu), grid_mu.n_cuts, mc.m,
                               0.5 / (mc.k_leaf * math.sqrt(mc.m)), nu=mc.nu_depth,
                               beta=mc.beta_depth, max_depth=mc.max_depth,
                               min_leaf=mc.min_leaf, move_probs=mc.move_probs)
    tau_sampler = ForestSampler(grid_tau.bin(X_tau), grid_tau.n_cuts, tc.m,
                                2.0 * sd_ys / (tc.k_leaf * math.sqrt(tc.m)), nu=tc.nu_depth,
                                beta=tc.beta_depth, max_depth=tc.max_depth,
                                min_leaf=tc.min_leaf, move_probs=tc.move_probs, weights=z)
    lam = sigma_prior_scale(sd_ys, mc.sigma_prior_df, mc.sigma_prior_quantile)

    k_mu = None
    if use_ps and config.k_ps != 1.0:
        k_mu = np.ones(p_mu)
        k_mu[-1] = config.k_ps
    st_mu = _shrink_state(config.mu_shrink, p_mu, float(p_mu), k_mu)
    st_tau = _shrink_state(config.tau_shrink, p_tau, p_tau / 2.0)
    if st_mu is None and k_mu is not None:
        # informative weight without shrinkage: fixed prior-mean split probabilities
        s_mu = k_mu / k_mu.sum()
    else:
        s_mu = np.full(p_mu, 1.0 / p_mu) if st_mu is None else st_mu.s
    s_tau = np.full(p_tau, 1.0 / p_tau) if st_tau is None else st_tau.s

    xb_mu_test = xb_tau_test = None
    if test_X is not None:
        X_mu_test = np.column_stack([test_X, test_pi_hat]) if use_ps else test_X
        xb_mu_test = grid_mu.bin(X_mu_test)
        xb_tau_test = grid_tau.bin(test_X[:, tau_cols])

    keep = config.n_iter - config.n_burn
    out = dict(
        mu_fit=np.empty((keep, n)), tau_fit=np.empty((keep, n)),
        s_mu=np.empty((keep, p_mu)), s_tau=np.empty((keep, p_tau)), sigma=np.empty(keep),
        alpha_mu=np.full(keep, np.nan), alpha_tau=np.full(keep, np.nan),
        split_counts_mu=np.empty((keep, p_mu), dtype=np.int64),
        split_counts_tau=np.empty((keep, p_tau), dtype=np.int64),
    )
    mu_test = None if test_X is None else np.empty((keep, test_X.shape[0]))
    tau_test = None if test_X is None else np.empty((keep, test_X.shape[0]))
    att_mu = np.zeros(p_mu, dtype=np.int64)
    att_tau = np.zeros(p_tau, dtype=np.int64)
    sigma2 = sd_ys**2
    start = config.shrink_start_iter
    for it in range(config.n_iter):
        att_mu[:] = 0
        mu_sampler.sweep(rng, ys - tau_sampler.fit * z, sigma2, s_mu, att_mu)
        if st_mu is not None and it >= start:
            _shrink_step(st_mu, _shrink_counts(mu_sampler, att_mu, config.mu_shrink.count_mode),
                         config.mu_shrink, rng)
            s_mu = st_mu.s
        att_tau[:] = 0
        tau_sampler.sweep(rng, ys - mu_sampler.fit, sigma2, s_tau, att_tau)
        if st_tau is not None and it >= start:
            _shrink_step(st_tau,
                         _shrink_counts(tau_sampler, att_tau, config.tau_shrink.count_mode),
                         config.tau_shrink, rng)
            s_tau = st_tau.s
        sigma2 = sample_sigma(ys - mu_sampler.fit - tau_sampler.fit * z, mc.sigma_prior_df,
                              lam, rng) ** 2
        if it >= config.n_burn:
            b = it - config.n_burn
            out["mu_fit"][b] = mu_sampler.fit * scale + center
            out["tau_fit"][b] = tau_sampler.fit * scale
            out["s_mu"][b] = s_mu
            out["s_tau"][b] = s_tau
            out["sigma"][b] = math.sqrt(sigma2) * scale
            if st_mu is not None:
                out["alpha_mu"][b] = st_mu.alpha
            if st_tau is not None:
                out["alpha_tau"][b] = st_tau.alpha
            out["split_counts_mu"][b] = mu_sampler.split_counts()
            out["split_counts_tau"][b] = tau_sampler.split_counts()
            if test_X is not None:
                mu_test[b] = mu_sampler.predict(xb_mu_test) * scale + center
                tau_test[b] = tau_sampler.predict(xb_tau_test) * scale
    moves = {}
    for name, smp in (("mu", mu_sampler), ("tau", tau_sampler)):
        moves[name] = {mv: tuple(int(x) for x in smp.move_stats[k])
                       for k, mv in enumerate(("grow", "prune", "change"))}
    return ShBcfPosterior(**out, mu_names=mu_names, tau_names=tau_names, Y=y.copy(),
                          Z=z.copy(), mu_test=mu_test, tau_test=tau_test, move_stats=moves)


def fit_default_bcf(data: Dataset, config: ShBcfConfig = ShBcfConfig(), test_X=None, *,
                    test_pi_hat=None, seed=0) -> ShBcfPosterior:
    """Same sampler with both splitting-probability vectors frozen (no Dirichlet steps)."""
    return fit_shbcf(data, config.as_default_bcf(), test_X, test_pi_hat=test_pi_hat, seed=seed)


def cate_summary(post_or_draws, level: float = 0.95, test: bool = False):
    """Pointwise posterior mean and equal-tailed interval of the effect draws.

    Accepts a posterior (``test=True`` selects the test-set draws) or a raw
    draws x units array. Quantiles use linear interpolation between order
    statistics.
    """
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"level must lie in (0, 1), got {level}")
    if isinstance(post_or_draws, ShBcfPosterior):
        draws = post_or_draws.tau_test if test else post_or_draws.tau_fit
        if draws is None:
            raise InputError("posterior holds no test-set draws")
    else:
        draws = np.asarray(post_or_draws, dtype=float)
    draws = np.atleast_2d(draws)
    if draws.shape[0] < 2:
        raise InputError("need at least two draws")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [tail, 1.0 - tail], axis=0)
    return draws.mean(axis=0), lo, hi


def ate_estimate(post_or_draws) -> float:
    """Posterior mean of the sample-average effect."""
    draws = post_or_draws.tau_fit if isinstance(post_or_draws, ShBcfPosterior) else post_or_draws
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[0] < 1 or draws.shape[1] < 1:
        raise InputError("need at least one draw")
    return float(draws.mean(axis=1).mean())
