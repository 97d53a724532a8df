import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from shbcf.bcf import Dataset
from shbcf.errors import ConfigurationError, InputError
from shbcf.simlab import (
    DgpSpec,
    Expression,
    KnnT,
    MethodOutput,
    MetricsReport,
    OlsS,
    OlsT,
    Problem,
    SLearner,
    TLearner,
    available_studies,
    bias_and_coverage,
    correlation_matrix,
    generate,
    get_dgp,
    get_study,
    mc_interval,
    rmse,
    rpehe,
    run_study,
)
from shbcf.simlab.runner import stream
from shbcf.simlab.studies import comparison, targeted_selection, toy_ric, toy_sparse


# ---------------------------------------------------------------- expressions

class TestExpression:
    def test_evaluates(self):
        X = np.array([[1.0, 2.0], [0.0, -1.0]])
        e = Expression("3 + X1 + 0.5*X2**2 - abs(X2)")
        np.testing.assert_allclose(e.evaluate(X), [3 + 1 + 2 - 2, 3 + 0 + 0.5 - 1])
        assert e.covariates == {1, 2}

    def test_constant_broadcasts(self):
        np.testing.assert_array_equal(Expression("0.5").evaluate(np.zeros((3, 1))), 0.5)

    def test_special_names(self):
        X = np.zeros((2, 1))
        out = Expression("Phi(0*X1) + sin(PI/2) + U").evaluate(X, U=np.array([0.1, 0.2]))
        np.testing.assert_allclose(out, [1.6, 1.7])

    @pytest.mark.parametrize("src", ["__import__('os')", "X1.real", "foo(X1)", "X0", "Y1 + 1",
                                     "[X1]", "X1 +", "lambda: 1", "max(X1, X2)"])
    def test_rejected(self, src):
        with pytest.raises(ConfigurationError):
            Expression(src)


# ---------------------------------------------------------------- data generation

class TestDgp:
    def test_correlation_matrix(self):
        C = correlation_matrix(3, 0.6)
        np.testing.assert_allclose(C, [[1, .7, .46], [.7, 1, .7], [.46, .7, 1]])

    def test_gaussian_correlation(self):
        sim = generate(toy_sparse(N=100_000), np.random.default_rng(0))
        r = np.corrcoef(sim.data.X[:, 0], sim.data.X[:, 1])[0, 1]
        assert r == pytest.approx(0.7, abs=0.05)

    def test_out_of_range_index_caught(self):
        with pytest.raises(ConfigurationError, match="X12"):
            toy_sparse().with_(tau="2 + 0.8*X1 - 0.3*X12**2")
        assert get_dgp("toy_sparse_p12").P == 12

    def test_targeted_selection_range(self):
        sim = generate(targeted_selection(N=20_000), np.random.default_rng(1))
        assert np.all((sim.pi > 0) & (sim.pi < 0.9))

    def test_not_positive_definite(self):
        spec = DgpSpec("bad", 50, 5, "X1", "1", "0.5", corr_base=0.0, corr_offset=-0.5)
        with pytest.raises(ConfigurationError, match="positive definite"):
            generate(spec, np.random.default_rng(0))

    def test_propensity_outside_unit_interval(self):
        spec = DgpSpec("bad", 50, 2, "X1", "1", "1.5")
        with pytest.raises(ConfigurationError):
            generate(spec, np.random.default_rng(0))

    @pytest.mark.parametrize("kw", [dict(mu="mu + 1"), dict(law="t"), dict(noise=("rel", 1.0)),
                                    dict(law="copula", n_continuous=9), dict(N=1),
                                    dict(law="copula", binary_rule="upper")])
    def test_invalid_spec(self, kw):
        base = dict(name="x", N=10, P=3, mu="X1", tau="1", pi="0.5")
        base.update(kw)
        with pytest.raises(ConfigurationError):
            DgpSpec(**base)

    def test_copula_marginals(self):
        spec = comparison(25, N=100_000)
        sim = generate(spec, np.random.default_rng(2))
        X = sim.data.X
        cont, binary = X[:, :10], X[:, 10:]
        for j in range(cont.shape[1]):
            col = cont[:, j]
            assert abs(col.mean()) < 0.02 and abs(col.std() - 1) < 0.02
            assert stats.kstest(col, "norm").pvalue > 1e-3
        se = math.sqrt(0.3 * 0.7 / X.shape[0])
        assert set(np.unique(binary)) == {0.0, 1.0}
        assert np.all(np.abs(binary.mean(axis=0) - 0.3) < 3 * se)

    def test_binary_rule_readings(self):
        # both readings keep the marginal rate; they differ in the sign of the dependence
        spec = comparison(25, N=50_000)
        lo = generate(spec.with_(binary_rule="lower"), np.random.default_rng(3)).data.X
        q = generate(spec, np.random.default_rng(3)).data.X
        for X in (lo, q):
            assert X[:, 20].mean() == pytest.approx(0.3, abs=0.01)
        assert np.corrcoef(q[:, 9], q[:, 10])[0, 1] > 0  # continuous X10 vs binary X11
        assert np.corrcoef(lo[:, 9], lo[:, 10])[0, 1] < 0

    @pytest.mark.parametrize("spec,attr", [(comparison(25, N=100_000), "mu"),
                                           (targeted_selection(N=100_000), "tau")])
    def test_noise_rule(self, spec, attr):
        sim = generate(spec, np.random.default_rng(4))
        eps = sim.data.Y - sim.mu - sim.tau * sim.data.Z
        target = 0.5 * np.std(getattr(sim, attr), ddof=1)
        assert sim.noise_sd == pytest.approx(target)
        assert np.std(eps, ddof=1) == pytest.approx(target, rel=0.02)

    def test_treatment_follows_propensity(self):
        sim = generate(toy_ric(N=50_000), np.random.default_rng(5))
        assert sim.data.Z.mean() == pytest.approx(sim.pi.mean(), abs=0.01)

    def test_deterministic(self):
        a = generate(toy_ric(N=100), np.random.default_rng(9))
        b = generate(toy_ric(N=100), np.random.default_rng(9))
        np.testing.assert_array_equal(a.data.Y, b.data.Y)

    def test_named_scenarios_build(self):
        for name in ("toy_sparse", "comparison_p50", "high_dim_p150", "sparse_tau",
                     "dart_prediction"):
            sim = generate(get_dgp(name).with_(N=50), np.random.default_rng(0))
            assert sim.data.X.shape == (50, get_dgp(name).P)
        with pytest.raises(ConfigurationError, match="available"):
            get_dgp("nope")


# ---------------------------------------------------------------- metrics

class TestMetrics:
    def test_rpehe_examples(self):
        tau = np.array([1.0, -2.0, 0.5])
        assert rpehe(tau, tau) == 0.0
        assert rpehe(tau + 0.5, tau) == pytest.approx(0.5)
        assert rpehe([3.0, 4.0], [0.0, 0.0]) == pytest.approx(math.sqrt(25 / 2))

    def test_rpehe_errors(self):
        with pytest.raises(InputError):
            rpehe([1.0, 2.0], [1.0])
        with pytest.raises(InputError):
            rpehe([], [])

    def test_degenerate_draws(self):
        truth = np.array([1.0, 2.0, 3.0])
        assert bias_and_coverage(np.tile(truth, (5, 1)), truth) == (0.0, 1.0)

    def test_truth_outside(self):
        draws = np.random.default_rng(0).normal(size=(100, 4))
        assert bias_and_coverage(draws, np.full(4, 50.0))[1] == 0.0

    def test_calibrated_coverage(self):
        rng = np.random.default_rng(1)
        n = 10_000
        center = rng.normal(size=n)
        draws = center + rng.normal(size=(2000, n))
        truth = center + rng.normal(size=n)
        assert bias_and_coverage(draws, truth, 0.95)[1] == pytest.approx(0.95, abs=0.01)

    def test_coverage_errors(self):
        with pytest.raises(InputError):
            bias_and_coverage(np.zeros((1, 3)), np.zeros(3))
        with pytest.raises(InputError):
            bias_and_coverage(np.zeros((4, 3)), np.zeros(2))

    @given(st.integers(2, 30), st.integers(1, 20), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_oracles(self, n_draws, n, seed):
        rng = np.random.default_rng(seed)
        draws, truth = rng.normal(size=(n_draws, n)), rng.normal(size=n)
        est = draws.mean(axis=0)
        assert rpehe(est, truth) == math.sqrt(np.mean((est - truth) ** 2))
        assert rmse(est, truth) == rpehe(est, truth)
        bias, cov = bias_and_coverage(draws, truth)
        lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
        assert bias == np.mean(est - truth)
        assert cov == np.mean((lo <= truth) & (truth <= hi))
        assert 0.0 <= cov <= 1.0

    def test_mc_interval(self):
        v = np.array([1.0, 2.0, 3.0, np.nan])
        mean, half, n = mc_interval(v)
        assert (mean, n) == (2.0, 3)
        assert half == pytest.approx(1.96 * 1.0 / math.sqrt(3))
        assert math.isnan(mc_interval([np.nan])[0])

    def test_report_csv(self, tmp_path):
        rep = MetricsReport("s", 2, ["A"], {("A", "test", "rpehe"): np.array([0.5, 0.7])})
        rep.split_probs[("A", "mu")] = np.array([0.75, 0.25])
        rep.covariates[("A", "mu")] = ["X1", "X2"]
        text = rep.to_csv(tmp_path / "r.csv").read_text().splitlines()
        assert text[0] == "method,split,metric,estimate,half_width,n_reps"
        assert text[1].startswith("A,test,rpehe,0.6")
        probs = rep.split_probs_to_csv(tmp_path / "p.csv").read_text().splitlines()
        assert probs[1].startswith("A,mu,X1,0.75")
        assert "rpehe" in rep.format_table()


# ---------------------------------------------------------------- runner

@dataclass(frozen=True)
class ZeroEffect:
    name: str = "zero"
    needs_propensity = False
    predicts_outcome = False

    def __call__(self, problem, seed):
        return MethodOutput(np.zeros(problem.train.n), np.zeros(problem.X_test.shape[0]))


@dataclass(frozen=True)
class NoisyTruthless:
    """Random draws around zero; exercises seeding and coverage bookkeeping."""

    name: str = "noisy"
    needs_propensity = False
    predicts_outcome = False

    def __call__(self, problem, seed):
        rng = np.random.default_rng(seed)
        return MethodOutput(rng.normal(size=(20, problem.train.n)),
                            rng.normal(size=(20, problem.X_test.shape[0])),
                            split_probs={"f": (["X1"], np.array([rng.random()]))})


@dataclass(frozen=True)
class FailsOnce:
    name: str = "flaky"
    needs_propensity = False
    predicts_outcome = False

    def __call__(self, problem, seed):
        if problem.train.X[0, 0] > 0:
            raise RuntimeError("boom")
        return MethodOutput(np.zeros(problem.train.n), np.zeros(problem.X_test.shape[0]))


class TestRunner:
    def test_zero_estimator_recovers_second_moment(self):
        # tau = 0.5 + 0.5 X2^2 with X2 ~ N(0, 1): E[tau^2] = 0.25 + 0.5 + 0.75
        rep = run_study(toy_ric(N=5000), [ZeroEffect()], 4, train_frac=1.0, seed=0)
        assert rep.estimate("zero", "train", "rpehe") == pytest.approx(math.sqrt(1.5), abs=0.04)

    def test_bit_identical_rerun(self):
        spec = toy_ric(N=200)
        a = run_study(spec, [NoisyTruthless()], 2, seed=7)
        b = run_study(spec, [NoisyTruthless()], 2, seed=7)
        assert a.values.keys() == b.values.keys()
        for k in a.values:
            np.testing.assert_array_equal(a.values[k], b.values[k])

    def test_method_order_and_workers_irrelevant(self):
        spec = toy_ric(N=200)
        ab = run_study(spec, [NoisyTruthless(), ZeroEffect()], 3, seed=3)
        ba = run_study(spec, [ZeroEffect(), NoisyTruthless()], 3, seed=3, workers=2)
        for k in ab.values:
            np.testing.assert_array_equal(ab.values[k], ba.values[k])
        np.testing.assert_array_equal(ab.split_probs[("noisy", "f")],
                                      ba.split_probs[("noisy", "f")])

    def test_failure_recorded_not_silent(self):
        spec = toy_ric(N=50)
        with pytest.warns(RuntimeWarning, match="failed"):
            rep = run_study(spec, [FailsOnce(), ZeroEffect()], 6, seed=1)
        vals = rep.series("flaky", "test", "rpehe")
        n_fail = len(rep.failures)
        assert 0 < n_fail < 6
        assert np.isnan(vals).sum() == n_fail
        assert all(m == "flaky" and "boom" in err for _, m, err in rep.failures)
        assert "failed: replication" in rep.format_table()
        assert np.all(np.isfinite(rep.series("zero", "test", "rpehe")))

    def test_train_test_split_sizes(self):
        seen = {}

        @dataclass(frozen=True)
        class Spy:
            name: str = "spy"
            needs_propensity = False
            predicts_outcome = False

            def __call__(self, problem, seed):
                seen["sizes"] = (problem.train.n, problem.X_test.shape[0])
                return MethodOutput(np.zeros(problem.train.n), np.zeros(problem.X_test.shape[0]))

        run_study(toy_ric(N=100), [Spy()], 1, train_frac=0.7)
        assert seen["sizes"] == (70, 30)

    def test_true_propensity_plugged(self):
        seen = {}

        @dataclass(frozen=True)
        class Spy:
            name: str = "spy"
            needs_propensity = True
            predicts_outcome = False

            def __call__(self, problem, seed):
                seen["pi"] = problem.pi_train
                return MethodOutput(np.zeros(problem.train.n), np.zeros(problem.X_test.shape[0]))

        run_study(toy_ric(N=60), [Spy()], 1, train_frac=1.0, seed=2, propensity="true")
        sim = generate(toy_ric(N=60), stream(2, 0, "data"))
        np.testing.assert_array_equal(seen["pi"], sim.pi)

    @pytest.mark.parametrize("kw", [dict(H=0), dict(methods=[]), dict(train_frac=0.0),
                                    dict(methods=[ZeroEffect(), ZeroEffect()]),
                                    dict(propensity="oracle")])
    def test_invalid(self, kw):
        args = dict(dgp=toy_ric(N=20), methods=[ZeroEffect()], H=1)
        args.update(kw)
        with pytest.raises(ConfigurationError):
            run_study(**args)

    def test_worker_env(self, monkeypatch):
        from shbcf.simlab.runner import default_workers

        monkeypatch.setenv("SHBCF_WORKERS", "3")
        assert default_workers() == 3
        monkeypatch.setenv("SHBCF_WORKERS", "zero")
        with pytest.raises(ConfigurationError):
            default_workers()


# ---------------------------------------------------------------- baselines

def mirrored_problem(n=60, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    Y = X[:, 0] + rng.normal(size=n)
    train = Dataset(np.vstack([X, X]), np.r_[np.ones(n), np.zeros(n)], np.r_[Y, Y])
    Xt = rng.normal(size=(10, 3))
    return Problem(train, Xt, np.zeros(10), np.zeros(10))


class TestBaselines:
    @pytest.mark.parametrize("method", [OlsT(), KnnT(5)])
    def test_identical_arms_exact_zero(self, method):
        out = method(mirrored_problem(), None)
        np.testing.assert_allclose(out.tau_train, 0.0, atol=1e-10)
        np.testing.assert_allclose(out.tau_test, 0.0, atol=1e-10)

    def test_identical_arms_forest(self):
        out = TLearner("bart", n_iter=300, n_burn=150)(mirrored_problem(), np.random.default_rng(1))
        assert abs(out.tau_train.mean()) < 0.15
        assert np.mean(np.abs(out.tau_train.mean(axis=0))) < 0.3
        assert set(out.split_probs) == {"f1", "f0"}

    @pytest.mark.parametrize("method", [TLearner("bart", 50, 10), OlsT(), KnnT(), OlsS()])
    def test_empty_arm(self, method):
        p = mirrored_problem()
        p.train = Dataset(p.train.X, np.ones(p.train.n), p.train.Y)
        with pytest.raises(InputError, match="arm"):
            method(p, np.random.default_rng(0))

    def test_s_learner_shapes(self):
        p = mirrored_problem()
        out = SLearner("dart", n_iter=100, n_burn=50)(p, np.random.default_rng(0))
        assert out.tau_train.shape == (50, p.train.n)
        assert out.tau_test.shape == (50, 10)
        names, probs = out.split_probs["f"]
        assert names[-1] == "Z" and probs.sum() == pytest.approx(1.0)

    def test_s_ols_recovers_constant_effect(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(400, 2))
        Z = (rng.random(400) < 0.5).astype(float)
        Y = X @ [1.0, -2.0] + 1.7 * Z + 0.1 * rng.normal(size=400)
        out = OlsS()(Problem(Dataset(X, Z, Y), X[:5], Y[:5], Z[:5]))
        assert out.tau_test == pytest.approx(np.full(5, 1.7), abs=0.05)

    def test_bad_engine(self):
        with pytest.raises(ConfigurationError):
            SLearner("xgb")
        with pytest.raises(ConfigurationError):
            KnnT(0)

    @pytest.mark.slow
    def test_s_ols_plateau_on_comparison_dgp(self):
        rep = run_study(comparison(25), [OlsS()], 30, seed=11)
        assert rep.estimate("S-OLS", "test", "rpehe") == pytest.approx(1.91, abs=0.06)


# ---------------------------------------------------------------- studies

class TestStudies:
    def test_catalogue(self):
        names = available_studies()
        assert {"table1", "table2", "table3", "table4", "a1", "a2", "a3", "a4"} <= set(names)
        for name in names:
            study = get_study(name, n_iter=20, n_burn=10)
            assert study.scenarios and all(sc.methods for sc in study.scenarios)

    def test_unknown_study_lists_names(self):
        with pytest.raises(ConfigurationError, match="table1"):
            get_study("table99")

    def test_table1_rows(self):
        (sc,) = get_study("table1").scenarios
        assert [m.name for m in sc.methods] == ["BCF", "SH-BCF"]
        assert sc.train_frac == 1.0 and sc.dgp.P == 10

    def test_table4_variant_v(self):
        (sc,) = get_study("table4").select("v")
        (m,) = sc.methods
        assert m.k_ps == 100.0 and m.shrink

    def test_bad_variant(self):
        with pytest.raises(ConfigurationError, match="available"):
            get_study("table1").select("v")

    def test_known_propensity_study(self):
        assert get_study("a1").scenarios[0].propensity == "true"
