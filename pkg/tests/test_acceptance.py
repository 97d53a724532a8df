"""End-to-end acceptance criteria.

Each test replicates one simulation study at desk scale, checks it at the
stated tolerance and records a one-line PASS/FAIL summary (printed in the
terminal summary). Set ``SHBCF_ACCEPTANCE_DIR`` to keep the report CSVs.
Runtime is a few hours on one core; ``SHBCF_WORKERS`` parallelizes
replications without changing any number.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from shbcf.simlab import generate, run_named_study
from shbcf.simlab.studies import comparison

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SEED = 7


def keep(reports, tag):
    out = os.environ.get("SHBCF_ACCEPTANCE_DIR")
    if not out:
        return
    Path(out).mkdir(parents=True, exist_ok=True)
    for label, rep in reports.items():
        rep.to_csv(Path(out) / f"{tag}_{label}.csv")
        rep.split_probs_to_csv(Path(out) / f"{tag}_{label}_split_probs.csv")


def run(name, reps, variant=None):
    reports = run_named_study(name, reps, seed=SEED, variant=variant)
    keep(reports, name if variant is None else f"{name}_{variant}")
    for rep in reports.values():
        print(rep.format_table())
    return reports


def conclude(record, number, checks):
    """``checks`` is a list of (description, passed); record and assert all of them."""
    ok = all(p for _, p in checks)
    record(number, ok, "; ".join(f"{d} [{'ok' if p else 'MISS'}]" for d, p in checks))
    assert ok, [d for d, p in checks if not p]


def test_criterion_01_sparse_toy(acceptance_record):
    (rep,) = run("table1", 50).values()
    sh = rep.series("SH-BCF", "train", "rpehe")
    bcf = rep.series("BCF", "train", "rpehe")
    p = stats.ttest_rel(sh, bcf, alternative="less").pvalue
    cov = rep.estimate("SH-BCF", "train", "coverage")
    conclude(acceptance_record, 1, [
        (f"SH-BCF rPEHE {sh.mean():.3f} in [0.33, 0.45]", 0.33 <= sh.mean() <= 0.45),
        (f"BCF rPEHE {bcf.mean():.3f} in [0.40, 0.52]", 0.40 <= bcf.mean() <= 0.52),
        (f"paired one-sided p={p:.2g} < 0.05", p < 0.05),
        (f"SH-BCF coverage {cov:.3f} >= 0.80", cov >= 0.80),
    ])


def test_criterion_02_split_probabilities(acceptance_record):
    (rep,) = run("table2", 10).values()
    s_mu = rep.split_probs[("SH-BCF", "mu")]
    s_tau = rep.split_probs[("SH-BCF", "tau")]
    names = rep.covariates[("S-DART", "f")]
    s_dart = rep.split_probs[("S-DART", "f")]
    top2 = {names[j] for j in np.argsort(s_dart)[::-1][:2]}
    conclude(acceptance_record, 2, [
        (f"s_mu(X1) {s_mu[0]:.3f} >= 0.90", s_mu[0] >= 0.90),
        (f"s_tau(X2) {s_tau[1]:.3f} >= 0.90", s_tau[1] >= 0.90),
        (f"S-DART top two {sorted(top2)} == ['X2', 'Z']", top2 == {"Z", "X2"}),
    ])


def test_criterion_03_comparison(acceptance_record):
    reports = run("table3", 50, variant="core")
    r25, r50 = reports["p25"], reports["p50"]
    sh25, sh50 = (r.estimate("SH-BCF", "test", "rpehe") for r in (r25, r50))
    b25, b50 = (r.estimate("BCF", "test", "rpehe") for r in (r25, r50))
    o25, o50 = (r.estimate("S-OLS", "test", "rpehe") for r in (r25, r50))
    conclude(acceptance_record, 3, [
        (f"SH-BCF test rPEHE {sh25:.3f}/{sh50:.3f} <= 0.65", max(sh25, sh50) <= 0.65),
        (f"BCF degrades {b25:.3f} -> {b50:.3f}", b50 > b25),
        (f"SH-BCF change {abs(sh50 - sh25):.3f} <= 0.05", abs(sh50 - sh25) <= 0.05),
        (f"S-OLS {o25:.3f}/{o50:.3f} within 1.91 +/- 0.05",
         abs(o25 - 1.91) <= 0.05 and abs(o50 - 1.91) <= 0.05),
    ])


def _variant_rows(rep):
    names = ["BCF", "SH-BCF", "SH-BCF (no PS)", "I-BCF (k_PS=50)", "I-BCF (k_PS=100)"]
    return {n: rep.estimate(n, "train", "rpehe") for n in names}


def test_criterion_04_targeted_selection(acceptance_record):
    (rep,) = run("table4", 50).values()
    r = _variant_rows(rep)
    share = rep.split_probs[("SH-BCF", "mu")][-1]
    ii = r["SH-BCF"]
    close = {n: abs(r[n] - ii) for n in ("SH-BCF (no PS)", "I-BCF (k_PS=50)", "I-BCF (k_PS=100)")}
    conclude(acceptance_record, 4, [
        (f"SH-BCF {ii:.3f} < BCF {r['BCF']:.3f}", ii < r["BCF"]),
        (f"SH-BCF share on pi_hat {share:.4f} < 0.02", share < 0.02),
        ("variants iii-v within 0.05 of ii ("
         + ", ".join(f"{d:.3f}" for d in close.values()) + ")",
         all(d <= 0.05 for d in close.values())),
    ])


def test_criterion_05_known_propensity(acceptance_record):
    (rep,) = run("a1", 25).values()
    r = _variant_rows(rep)
    others = {n: r[n] for n in ("SH-BCF", "I-BCF (k_PS=50)", "I-BCF (k_PS=100)")}
    shares = {n: rep.split_probs[(n, "mu")][-1] for n in others}
    conclude(acceptance_record, 5, [
        (f"no-PS {r['SH-BCF (no PS)']:.3f} worst among ii-v "
         f"({', '.join(f'{v:.3f}' for v in others.values())})",
         r["SH-BCF (no PS)"] > max(others.values())),
        ("pi share > 0.80 (" + ", ".join(f"{v:.3f}" for v in shares.values()) + ")",
         all(v > 0.80 for v in shares.values())),
    ])


def test_criterion_06_dart_prediction(acceptance_record):
    (rep,) = run("a2", 50, variant="short").values()
    bart = rep.estimate("BART", "test", "rmse")
    dart = rep.estimate("DART", "test", "rmse")
    relevant = [0, 1, 2, 3, 19]
    cb = rep.split_counts[("BART", "f")][relevant]
    cd = rep.split_counts[("DART", "f")][relevant]
    conclude(acceptance_record, 6, [
        (f"DART RMSE {dart:.3f} <= BART {bart:.3f} - 0.2", dart <= bart - 0.2),
        ("DART split counts exceed BART on X1-X4, X20 ("
         + ", ".join(f"{d:.1f}>{b:.1f}" for d, b in zip(cd, cb)) + ")", bool(np.all(cd > cb))),
    ])


def test_criterion_07_growing_dimension(acceptance_record):
    reports = run("a3", 25, variant="core")
    bcf = [reports[k].estimate("BCF", "test", "rpehe") for k in ("p5", "p50", "p150")]
    sh = [reports[k].estimate("SH-BCF", "test", "rpehe") for k in ("p5", "p50", "p150")]
    conclude(acceptance_record, 7, [
        ("BCF strictly increasing " + " < ".join(f"{v:.3f}" for v in bcf),
         bcf[0] < bcf[1] < bcf[2]),
        (f"SH-BCF increase {sh[2] - sh[0]:.3f} <= half of BCF's {bcf[2] - bcf[0]:.3f}",
         sh[2] - sh[0] <= 0.5 * (bcf[2] - bcf[0])),
    ])


def test_criterion_08_sparsity_types(acceptance_record):
    reports = run("a4", 25)
    res = {k: (reports[k].estimate("SH-BCF", "test", "rpehe"),
               reports[k].estimate("BCF", "test", "rpehe")) for k in ("none", "pi", "mu", "tau")}
    sh, b = res["none"]
    checks = [(f"not sparse: SH-BCF {sh:.3f} <= BCF {b:.3f} + 0.03", sh <= b + 0.03)]
    for k in ("pi", "mu", "tau"):
        sh, b = res[k]
        checks.append((f"sparse {k}: SH-BCF {sh:.3f} <= BCF {b:.3f}", sh <= b))
    conclude(acceptance_record, 8, checks)


PROPERTY_SUITE = {
    "conjugate leaf moments": "tests/test_bart.py::TestLeafPosterior::test_conjugate_moments",
    "sigma posterior": "tests/test_bart.py::TestSigma",
    "Dirichlet mean identity": "tests/test_shrinkage.py::TestUpdateSplitProbs",
    "alpha grid vs quadrature":
        "tests/test_shrinkage.py::TestUpdateAlpha::test_grid_matches_independent_quadrature",
    "exhaustive tree posterior": "tests/test_bart.py::test_exhaustive_tree_posterior",
    "decomposition coherence": "tests/test_bcf.py::TestPosterior::test_decomposition_coherence",
    "metric oracles": "tests/test_simlab.py::TestMetrics",
    "determinism": "tests/test_bart.py::TestFitBart::test_deterministic "
                   "tests/test_bcf.py::TestPosterior::test_deterministic "
                   "tests/test_simlab.py::TestRunner::test_bit_identical_rerun",
}


def test_criterion_09_property_suite(acceptance_record):
    root = Path(__file__).resolve().parent.parent
    checks = []
    for label, ids in PROPERTY_SUITE.items():
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                               *ids.split()], cwd=root, capture_output=True, text=True)
        checks.append((label, proc.returncode == 0))
        if proc.returncode:
            print(proc.stdout[-3000:])
    conclude(acceptance_record, 9, checks)


def test_criterion_10_operational(acceptance_record, tmp_path):
    rng = np.random.default_rng(SEED)
    sim = generate(comparison(25), rng)
    d = sim.data
    path = tmp_path / "data.csv"
    header = ",".join(["y", "z", *d.names])
    np.savetxt(path, np.column_stack([d.Y, d.Z, d.X]), delimiter=",", header=header,
               comments="", fmt="%.17g")
    cli = [sys.executable, "-m", "shbcf"]
    env = dict(os.environ)
    t0 = time.perf_counter()
    fit = subprocess.run(cli + ["fit", "--data", str(path), "--outcome", "y", "--treatment", "z",
                                "--n-iter", "4000", "--n-burn", "2000", "--seed", "1",
                                "--out", str(tmp_path / "fit")],
                         capture_output=True, text=True, env=env)
    t_fit = time.perf_counter() - t0
    t0 = time.perf_counter()
    sim_run = subprocess.run(cli + ["simulate", "--study", "table1", "--reps", "5", "--seed", "7",
                                    "--out", str(tmp_path / "sim")],
                             capture_output=True, text=True, env=env)
    t_sim = time.perf_counter() - t0
    for proc in (fit, sim_run):
        if proc.returncode:
            print(proc.stderr[-3000:])
    conclude(acceptance_record, 10, [
        (f"fit 1000x25, 4000 iterations: {t_fit:.0f}s < 300s (exit {fit.returncode})",
         fit.returncode == 0 and t_fit < 300),
        (f"simulate table1 x5: {t_sim:.0f}s < 180s (exit {sim_run.returncode})",
         sim_run.returncode == 0 and t_sim < 180),
    ])
