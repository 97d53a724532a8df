"""Estimators the replication runner can evaluate.

A method is a picklable callable ``method(problem, seed) -> MethodOutput``.
Effect estimators return ``tau_train`` / ``tau_test`` as draws x units
arrays (posterior draws, giving coverage) or 1-d point estimates.
Pure predictors (``predicts_outcome = True``) return ``y_test`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..bcf import Dataset, ShBcfConfig, fit_default_bcf, fit_shbcf

__all__ = ["Problem", "MethodOutput", "BcfMethod", "bcf_variants"]


@dataclass
class Problem:
    """One replication's train/test split as seen by a method."""

    train: Dataset
    X_test: np.ndarray
    Y_test: np.ndarray
    Z_test: np.ndarray
    pi_train: np.ndarray | None = None
    pi_test: np.ndarray | None = None


@dataclass
class MethodOutput:
    tau_train: np.ndarray | None = None
    tau_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    # forest label -> (covariate names, posterior-mean splitting probabilities)
    split_probs: dict = field(default_factory=dict)
    # forest label -> (covariate names, posterior-mean split counts)
    split_counts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BcfMethod:
    """The causal forest, with or without sparsity priors and propensity covariate."""

    name: str
    shrink: bool = True
    use_propensity: bool = True
    k_ps: float = 1.0
    n_iter: int = 4000
    n_burn: int = 2000

    needs_propensity = True
    predicts_outcome = False

    def config(self) -> ShBcfConfig:
        cfg = ShBcfConfig(use_propensity_covariate=self.use_propensity, k_ps=self.k_ps,
                          n_iter=self.n_iter, n_burn=self.n_burn)
        return cfg if self.shrink else cfg.as_default_bcf()

    def __call__(self, problem: Problem, seed) -> MethodOutput:
        tr = problem.train
        data = Dataset(tr.X, tr.Z, tr.Y, problem.pi_train if self.use_propensity else None,
                       tr.names)
        has_test = problem.X_test.shape[0] > 0
        fit = fit_shbcf if self.shrink else fit_default_bcf
        post = fit(data, self.config(), problem.X_test if has_test else None,
                   test_pi_hat=problem.pi_test if (has_test and self.use_propensity) else None,
                   seed=seed)
        return MethodOutput(
            tau_train=post.tau_fit,
            tau_test=post.tau_test,
            split_probs={"mu": (post.mu_names, post.s_mu.mean(axis=0)),
                         "tau": (post.tau_names, post.s_tau.mean(axis=0))},
            split_counts={"mu": (post.mu_names, post.split_counts_mu.mean(axis=0)),
                          "tau": (post.tau_names, post.split_counts_tau.mean(axis=0))},
        )


def bcf_variants(n_iter: int = 4000, n_burn: int = 2000) -> dict[str, BcfMethod]:
    """The five causal-forest variants compared under targeted selection."""
    kw = dict(n_iter=n_iter, n_burn=n_burn)
    return {
        "i": BcfMethod("BCF", shrink=False, **kw),
        "ii": BcfMethod("SH-BCF", **kw),
        "iii": BcfMethod("SH-BCF (no PS)", use_propensity=False, **kw),
        "iv": BcfMethod("I-BCF (k_PS=50)", k_ps=50.0, **kw),
        "v": BcfMethod("I-BCF (k_PS=100)", k_ps=100.0, **kw),
    }
