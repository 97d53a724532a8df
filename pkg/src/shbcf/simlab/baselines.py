"""Meta-learner baselines: S/T-learners on BART or its sparse variant, OLS and kNN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..bart import BartConfig, fit_bart
from ..errors import ConfigurationError, InputError
from ..shrinkage import ShrinkConfig
from .methods import MethodOutput, Problem

__all__ = [
    "SLearner",
    "TLearner",
    "OlsS",
    "OlsT",
    "KnnT",
    "ForestPredictor",
    "s_learner",
    "t_learner",
    "ols_s",
    "ols_t",
    "knn_t",
]

ENGINES = ("bart", "dart")


def _check_engine(engine: str) -> str:
    if engine not in ENGINES:
        raise ConfigurationError(f"engine must be one of {ENGINES}, got {engine!r}")
    return engine


def _forest_fit(engine, X, y, X_eval, n_iter, n_burn, seed):
    cfg = BartConfig(n_iter=n_iter, n_burn=n_burn)
    shrink = ShrinkConfig() if engine == "dart" else None
    return fit_bart(X, y, cfg, X_test=X_eval, shrink=shrink, seed=seed)


def _arms(problem: Problem):
    z = problem.train.Z
    treated, control = z == 1, z == 0
    if not treated.any() or not control.any():
        raise InputError("both treatment arms need at least one unit")
    return treated, control


@dataclass(frozen=True)
class SLearner:
    """One forest on ``[X, Z]``; the effect is ``f(x, 1) - f(x, 0)``."""

    engine: str = "bart"
    n_iter: int = 4000
    n_burn: int = 2000
    needs_propensity = False
    predicts_outcome = False

    def __post_init__(self):
        _check_engine(self.engine)

    @property
    def name(self) -> str:
        return f"S-{self.engine.upper()}"

    def __call__(self, problem: Problem, seed) -> MethodOutput:
        tr = problem.train
        Xa = np.column_stack([tr.X, tr.Z])
        blocks = [tr.X, problem.X_test]
        ev = np.vstack([np.column_stack([b, np.full(b.shape[0], z)])
                        for b in blocks for z in (1.0, 0.0)])
        post = _forest_fit(self.engine, Xa, tr.Y, ev, self.n_iter, self.n_burn, seed)
        n, m = tr.n, problem.X_test.shape[0]
        f = post.fit_test
        tau_train = f[:, :n] - f[:, n:2 * n]
        tau_test = f[:, 2 * n:2 * n + m] - f[:, 2 * n + m:]
        names = list(tr.names) + ["Z"]
        return MethodOutput(tau_train, tau_test,
                            split_probs={"f": (names, post.split_probs.mean(axis=0))},
                            split_counts={"f": (names, post.split_counts.mean(axis=0))})


@dataclass(frozen=True)
class TLearner:
    """Separate forests per arm; the effect is ``f1(x) - f0(x)`` draw by draw."""

    engine: str = "bart"
    n_iter: int = 4000
    n_burn: int = 2000
    needs_propensity = False
    predicts_outcome = False

    def __post_init__(self):
        _check_engine(self.engine)

    @property
    def name(self) -> str:
        return f"T-{self.engine.upper()}"

    def __call__(self, problem: Problem, seed) -> MethodOutput:
        tr = problem.train
        treated, control = _arms(problem)
        ev = np.vstack([tr.X, problem.X_test])
        rng1, rng0 = np.random.default_rng(seed).spawn(2)
        f1 = _forest_fit(self.engine, tr.X[treated], tr.Y[treated], ev,
                         self.n_iter, self.n_burn, rng1)
        f0 = _forest_fit(self.engine, tr.X[control], tr.Y[control], ev,
                         self.n_iter, self.n_burn, rng0)
        diff = f1.fit_test - f0.fit_test
        n = tr.n
        names = list(tr.names)
        return MethodOutput(
            diff[:, :n], diff[:, n:],
            split_probs={"f1": (names, f1.split_probs.mean(axis=0)),
                         "f0": (names, f0.split_probs.mean(axis=0))},
            split_counts={"f1": (names, f1.split_counts.mean(axis=0)),
                          "f0": (names, f0.split_counts.mean(axis=0))})


def _lstsq(A, y):
    return np.linalg.lstsq(A, y, rcond=None)[0]


@dataclass(frozen=True)
class OlsS:
    """Least squares on ``[1, X, Z]``; the effect is the constant ``Z`` coefficient."""

    name: str = "S-OLS"
    needs_propensity = False
    predicts_outcome = False

    def __call__(self, problem: Problem, seed=None) -> MethodOutput:
        tr = problem.train
        _arms(problem)
        A = np.column_stack([np.ones(tr.n), tr.X, tr.Z])
        coef = _lstsq(A, tr.Y)[-1]
        return MethodOutput(np.full(tr.n, coef), np.full(problem.X_test.shape[0], coef))


@dataclass(frozen=True)
class OlsT:
    """Per-arm least squares on ``[1, X]``; the effect is the fitted difference."""

    name: str = "T-OLS"
    needs_propensity = False
    predicts_outcome = False

    def __call__(self, problem: Problem, seed=None) -> MethodOutput:
        tr = problem.train
        treated, control = _arms(problem)
        A = np.column_stack([np.ones(tr.n), tr.X])
        b1 = _lstsq(A[treated], tr.Y[treated])
        b0 = _lstsq(A[control], tr.Y[control])
        At = np.column_stack([np.ones(problem.X_test.shape[0]), problem.X_test])
        return MethodOutput(A @ (b1 - b0), At @ (b1 - b0))


@dataclass(frozen=True)
class KnnT:
    """Per-arm k-nearest-neighbour means under standardized Euclidean distance."""

    k: int = 10
    name: str = "kNN"
    needs_propensity = False
    predicts_outcome = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")

    def __call__(self, problem: Problem, seed=None) -> MethodOutput:
        tr = problem.train
        treated, control = _arms(problem)
        center = tr.X.mean(axis=0)
        scale = tr.X.std(axis=0)
        scale[scale == 0] = 1.0

        def arm_mean(mask, Xq):
            Xa = (tr.X[mask] - center) / scale
            k = min(self.k, int(mask.sum()))
            _, idx = cKDTree(Xa).query((Xq - center) / scale, k=k)
            idx = np.asarray(idx).reshape(Xq.shape[0], k)
            return tr.Y[mask][idx].mean(axis=1)

        def effect(Xq):
            if Xq.shape[0] == 0:
                return np.empty(0)
            return arm_mean(treated, Xq) - arm_mean(control, Xq)

        return MethodOutput(effect(tr.X), effect(problem.X_test))


@dataclass(frozen=True)
class ForestPredictor:
    """Plain outcome regression of ``Y`` on ``X`` (no treatment), scored on held-out ``Y``."""

    engine: str = "bart"
    n_iter: int = 6000
    n_burn: int = 4000
    label: str | None = None
    needs_propensity = False
    predicts_outcome = True

    def __post_init__(self):
        _check_engine(self.engine)

    @property
    def name(self) -> str:
        return self.label or self.engine.upper()

    def __call__(self, problem: Problem, seed) -> MethodOutput:
        tr = problem.train
        post = _forest_fit(self.engine, tr.X, tr.Y, problem.X_test, self.n_iter, self.n_burn,
                           seed)
        names = list(tr.names)
        return MethodOutput(y_test=post.mean_test,
                            split_probs={"f": (names, post.split_probs.mean(axis=0))},
                            split_counts={"f": (names, post.split_counts.mean(axis=0))})


def s_learner(engine: str = "bart", n_iter: int = 4000, n_burn: int = 2000) -> SLearner:
    return SLearner(engine, n_iter, n_burn)


def t_learner(engine: str = "bart", n_iter: int = 4000, n_burn: int = 2000) -> TLearner:
    return TLearner(engine, n_iter, n_burn)


def ols_s() -> OlsS:
    return OlsS()


def ols_t() -> OlsT:
    return OlsT()


def knn_t(k: int = 10) -> KnnT:
    return KnnT(k)
