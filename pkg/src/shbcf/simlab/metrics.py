"""Effect-estimation metrics and the Monte Carlo report they roll up into."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InputError

__all__ = ["rpehe", "bias_and_coverage", "rmse", "mc_interval", "MetricsReport"]


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise InputError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise InputError("need at least one unit")
    return a, b


def rpehe(tau_hat, tau_true) -> float:
    """Root mean squared effect error over units."""
    a, b = _pair(tau_hat, tau_true)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse(pred, truth) -> float:
    return rpehe(pred, truth)


def bias_and_coverage(tau_draws, tau_true, level: float = 0.95) -> tuple[float, float]:
    """Mean error of the posterior-mean effect and the equal-tailed interval hit rate."""
    draws = np.atleast_2d(np.asarray(tau_draws, dtype=float))
    truth = np.asarray(tau_true, dtype=float).ravel()
    if draws.shape[0] < 2:
        raise InputError("need at least two draws")
    if draws.shape[1] != truth.size:
        raise InputError(f"draws cover {draws.shape[1]} units, truth has {truth.size}")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [tail, 1.0 - tail], axis=0)
    bias = float(np.mean(draws.mean(axis=0) - truth))
    coverage = float(np.mean((lo <= truth) & (truth <= hi)))
    return bias, coverage


def mc_interval(values) -> tuple[float, float, int]:
    """Mean, 1.96 x standard error half-width and count of the finite entries."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan, 0
    half = 1.96 * v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else math.nan
    return float(v.mean()), float(half), int(v.size)


@dataclass
class MetricsReport:
    """Per-replication metric values plus their Monte Carlo summaries.

    ``values[(method, split, metric)]`` holds one entry per replication
    (``nan`` where the method failed or the metric does not apply).
    ``split_probs[(method, forest)]`` is the replication-averaged posterior
    splitting-probability vector, named by ``covariates[(method, forest)]``.
    """

    study: str
    n_reps: int
    methods: list[str]
    values: dict = field(default_factory=dict)
    split_probs: dict = field(default_factory=dict)
    split_counts: dict = field(default_factory=dict)
    covariates: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def series(self, method: str, split: str, metric: str) -> np.ndarray:
        return np.asarray(self.values.get((method, split, metric), []), dtype=float)

    def estimate(self, method: str, split: str, metric: str) -> float:
        return mc_interval(self.series(method, split, metric))[0]

    def rows(self):
        out = []
        for method in self.methods:
            for (m, split, metric), vals in self.values.items():
                if m != method:
                    continue
                est, half, n = mc_interval(vals)
                if n:
                    out.append((method, split, metric, est, half, n))
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "split", "metric", "estimate", "half_width", "n_reps"])
            for method, split, metric, est, half, n in self.rows():
                w.writerow([method, split, metric, repr(est), repr(half), n])
        return path

    def split_probs_to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "forest", "covariate", "mean_split_prob", "mean_split_count"])
            for (method, forest), probs in self.split_probs.items():
                names = self.covariates[(method, forest)]
                counts = self.split_counts.get((method, forest), np.full(len(names), np.nan))
                for name, p, c in zip(names, probs, counts):
                    w.writerow([method, forest, name, repr(float(p)), repr(float(c))])
        return path

    def format_table(self) -> str:
        lines = [f"{self.study} ({self.n_reps} replications)"]
        for method, split, metric, est, half, n in self.rows():
            hw = "" if math.isnan(half) else f" +/- {half:.3f}"
            lines.append(f"  {method:<20} {split:<6} {metric:<9} {est:8.4f}{hw}  (n={n})")
        for rep, method, err in self.failures:
            lines.append(f"  failed: replication {rep}, {method}: {err}")
        return "\n".join(lines)
