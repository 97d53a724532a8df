"""Monte Carlo replication runner.

Every random stream is derived from ``(study seed, replication, label)`` via
``numpy.random.SeedSequence``, so a method's results do not depend on which
other methods run, in what order, or on how many worker processes share the
replications.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
import traceback
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..bcf import Dataset, estimate_propensity
from ..errors import ConfigurationError
from .dgp import DgpSpec, generate
from .methods import MethodOutput, Problem
from .metrics import MetricsReport, bias_and_coverage, rmse, rpehe

__all__ = ["run_study", "stream", "default_workers", "ReplicationResult"]

WORKERS_ENV = "SHBCF_WORKERS"
_PS_CLIP = 1e-6


def stream(seed: int, rep: int, label: str) -> np.random.Generator:
    """Independent generator for one (study seed, replication, label) triple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(rep),
                                                         zlib.crc32(label.encode())]))


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"{WORKERS_ENV} must be >= 1")
    return n


@dataclass
class ReplicationResult:
    rep: int
    metrics: dict  # (method, split, metric) -> value
    split_probs: dict  # (method, forest) -> (names, vector)
    split_counts: dict
    failures: list  # (rep, method, message)


def _split(n: int, train_frac: float, rng: np.random.Generator):
    if train_frac >= 1.0:
        return np.arange(n), np.arange(0)
    n_train = int(round(train_frac * n))
    perm = rng.permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _subset(d: Dataset, idx) -> Dataset:
    return Dataset(d.X[idx], d.Z[idx], d.Y[idx], None, d.names)


def _score(name, out: MethodOutput, truth, rows) -> dict:
    res = {}
    if out.y_test is not None:
        res[(name, "test", "rmse")] = rmse(out.y_test, truth["y_test"])
    for split, est in (("train", out.tau_train), ("test", out.tau_test)):
        tau_true = truth[f"tau_{split}"]
        if est is None or tau_true.size == 0:
            continue
        est = np.asarray(est, dtype=float)
        if est.ndim == 2:
            res[(name, split, "rpehe")] = rpehe(est.mean(axis=0), tau_true)
            bias, cov = bias_and_coverage(est, tau_true)
            res[(name, split, "bias")] = bias
            res[(name, split, "coverage")] = cov
        else:
            res[(name, split, "rpehe")] = rpehe(est, tau_true)
            res[(name, split, "bias")] = float(np.mean(est - tau_true))
    return res


def _one_replication(args) -> ReplicationResult:
    dgp, methods, rep, seed, train_frac, propensity = args
    sim = generate(dgp, stream(seed, rep, "data"))
    tr_idx, te_idx = _split(dgp.N, train_frac, stream(seed, rep, "split"))
    train = _subset(sim.data, tr_idx)
    X_test = sim.data.X[te_idx]
    problem = Problem(train, X_test, sim.data.Y[te_idx], sim.data.Z[te_idx])
    if any(getattr(m, "needs_propensity", False) for m in methods):
        if propensity == "true":
            problem.pi_train, problem.pi_test = sim.pi[tr_idx], sim.pi[te_idx]
        else:
            ps_seed = stream(seed, rep, "propensity")
            if te_idx.size:
                pt, pe = estimate_propensity(train.X, train.Z, X_test=X_test, seed=ps_seed)
            else:
                pt, pe = estimate_propensity(train.X, train.Z, seed=ps_seed), np.empty(0)
            problem.pi_train = np.clip(pt, _PS_CLIP, 1 - _PS_CLIP)
            problem.pi_test = np.clip(pe, _PS_CLIP, 1 - _PS_CLIP)
    truth = {"tau_train": sim.tau[tr_idx], "tau_test": sim.tau[te_idx],
             "y_test": sim.data.Y[te_idx]}
    metrics, probs, counts, failures = {}, {}, {}, []
    for method in methods:
        try:
            out = method(problem, stream(seed, rep, method.name))
            metrics.update(_score(method.name, out, truth, None))
        except Exception as exc:  # recorded and reported, never dropped silently
            failures.append((rep, method.name, f"{type(exc).__name__}: {exc}"))
            if os.environ.get("SHBCF_DEBUG"):
                traceback.print_exc()
            continue
        for forest, (names, vec) in out.split_probs.items():
            probs[(method.name, forest)] = (list(names), np.asarray(vec, dtype=float))
        for forest, (names, vec) in out.split_counts.items():
            counts[(method.name, forest)] = (list(names), np.asarray(vec, dtype=float))
    return ReplicationResult(rep, metrics, probs, counts, failures)


def run_study(dgp: DgpSpec, methods: list, H: int, train_frac: float = 0.7, *, seed: int = 0,
              workers: int | None = None, propensity: str = "estimate",
              study: str | None = None, progress=None) -> MetricsReport:
    """Replicate ``dgp`` ``H`` times and score every method on each replication.

    ``propensity`` is ``"estimate"`` (probit forest fit per replication on the
    training split) or ``"true"`` (plug in the generating propensity).
    ``workers`` defaults to the ``SHBCF_WORKERS`` environment variable, else 1.
    """
    if H < 1:
        raise ConfigurationError(f"need H >= 1, got {H}")
    if not methods:
        raise ConfigurationError("need at least one method")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"method names must be unique, got {names}")
    if not 0.0 < train_frac <= 1.0:
        raise ConfigurationError("train_frac must lie in (0, 1]")
    if propensity not in ("estimate", "true"):
        raise ConfigurationError(f"propensity must be 'estimate' or 'true', got {propensity!r}")
    workers = default_workers() if workers is None else int(workers)
    tasks = [(dgp, list(methods), rep, seed, train_frac, propensity) for rep in range(H)]
    results = []
    if workers <= 1:
        for t in tasks:
            results.append(_one_replication(t))
            if progress:
                progress(results[-1])
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for r in pool.map(_one_replication, tasks):
                results.append(r)
                if progress:
                    progress(r)
    results.sort(key=lambda r: r.rep)
    return _aggregate(study or dgp.name, H, names, results)


def _aggregate(study: str, H: int, names: list, results: list) -> MetricsReport:
    report = MetricsReport(study, H, names)
    keys = sorted({k for r in results for k in r.metrics},
                  key=lambda k: (names.index(k[0]), k[1] != "train", k[2]))
    for key in keys:
        report.values[key] = np.array([r.metrics.get(key, math.nan) for r in results])
    for attr, target in (("split_probs", report.split_probs),
                         ("split_counts", report.split_counts)):
        acc = {}
        for r in results:
            for key, (cov, vec) in getattr(r, attr).items():
                acc.setdefault(key, (cov, []))[1].append(vec)
        for key, (cov, vecs) in acc.items():
            target[key] = np.mean(vecs, axis=0)
            report.covariates[key] = cov
    for r in results:
        report.failures.extend(r.failures)
    if report.failures:
        warnings.warn(f"{study}: {len(report.failures)} method fit(s) failed and were excluded; "
                      f"first: {report.failures[0]}", RuntimeWarning, stacklevel=3)
    return report
