import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from shbcf.errors import ConfigurationError
from shbcf.shrinkage import (
    ShrinkConfig,
    alpha_grid,
    alpha_grid_posterior,
    init_split_state,
    record_attempt,
    update_alpha,
    update_split_probs,
)


def dirichlet_mean(k, alpha, u):
    base = np.asarray(k) * alpha / len(k) + np.asarray(u)
    return base / base.sum()


def mean_of_draws(state, n_draws, seed):
    rng = np.random.default_rng(seed)
    draws = np.empty((n_draws, state.n_predictors))
    for i in range(n_draws):
        draws[i] = update_split_probs(state, rng)
    return draws


class TestInit:
    def test_uniform(self):
        st_ = init_split_state(4)
        np.testing.assert_array_equal(st_.s, [0.25] * 4)
        assert st_.alpha == st_.rho == 4.0
        assert (st_.a, st_.b) == (0.5, 1.0)
        np.testing.assert_array_equal(st_.u, 0)

    def test_tau_forest_rho(self):
        assert init_split_state(10, rho=10 / 2).rho == 5.0

    def test_flat_hyperprior_accepted(self):
        # Beta(1, 1) puts no preference on sparsity; it is a legal configuration
        st_ = init_split_state(5, a=1.0, b=1.0)
        assert (st_.a, st_.b) == (1.0, 1.0)

    @pytest.mark.parametrize("kwargs", [dict(rho=0.0), dict(rho=-1.0), dict(k=[1, 0, 1]),
                                        dict(k=[1, 1]), dict(a=0.0)])
    def test_bad(self, kwargs):
        with pytest.raises(ConfigurationError):
            init_split_state(3, **kwargs)

    def test_zero_predictors(self):
        with pytest.raises(ConfigurationError):
            init_split_state(0)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            ShrinkConfig(count_mode="kept")


class TestRecordAttempt:
    def test_counts(self):
        st_ = init_split_state(5)
        record_attempt(st_, 2)
        record_attempt(st_, 2)
        np.testing.assert_array_equal(st_.u, [0, 0, 2, 0, 0])
        st_.reset_counts()
        np.testing.assert_array_equal(st_.u, 0)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            record_attempt(init_split_state(3), 3)


class TestUpdateSplitProbs:
    def test_prior_reproduction(self):
        draws = mean_of_draws(init_split_state(5), 20000, 1)
        se = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - 0.2) < 4 * se)

    def test_large_alpha_is_uniform(self):
        st_ = init_split_state(6)
        st_.alpha = 1e9
        s = update_split_probs(st_, np.random.default_rng(0))
        np.testing.assert_allclose(s, 1 / 6, atol=1e-3)

    def test_mean_identity_example(self):
        st_ = init_split_state(3, rho=3.0)
        st_.u[:] = [10, 0, 0]
        draws = mean_of_draws(st_, 100000, 2)
        se = draws[:, 0].std() / np.sqrt(len(draws))
        assert abs(draws[:, 0].mean() - 11 / 13) < 3 * se

    def test_simplex(self):
        st_ = init_split_state(200)
        st_.alpha = 1e-3
        s = update_split_probs(st_, np.random.default_rng(5))
        assert abs(s.sum() - 1.0) < 1e-12
        assert np.all(s > 0)

    @settings(max_examples=15, deadline=None)
    @given(P=st.integers(2, 6), alpha=st.floats(0.2, 20.0), seed=st.integers(0, 2**31),
           data=st.data())
    def test_mean_identity_random(self, P, alpha, seed, data):
        k = np.array(data.draw(st.lists(st.floats(0.2, 5.0), min_size=P, max_size=P)))
        u = np.array(data.draw(st.lists(st.integers(0, 15), min_size=P, max_size=P)))
        st_ = init_split_state(P, k=k)
        st_.alpha = alpha
        st_.u[:] = u
        draws = mean_of_draws(st_, 4000, seed)
        se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        # five-s.e. band keeps the family-wise false-alarm rate negligible
        assert np.all(np.abs(draws.mean(axis=0) - dirichlet_mean(k, alpha, u)) <= 5 * se + 1e-12)

    def test_informative_weight_monotone(self):
        u = np.array([3, 1, 0, 2])
        for j in range(4):
            k = np.ones(4)
            lo = dirichlet_mean(k, 2.0, u)[j]
            k[j] = 3.0
            assert dirichlet_mean(k, 2.0, u)[j] > lo
        # and the sampler follows the weighted base measure
        heavy = init_split_state(4, k=[5, 1, 1, 1])
        plain = init_split_state(4)
        assert (mean_of_draws(heavy, 5000, 3)[:, 0].mean()
                > mean_of_draws(plain, 5000, 3)[:, 0].mean())


def quadrature_weights(s, k, rho, a, b, grid_size):
    lam = (np.arange(grid_size) + 1.0) / (grid_size + 1.0)
    alpha = rho * lam / (1 - lam)
    logd = np.array([stats.dirichlet.logpdf(s, k * al / len(s)) for al in alpha])
    logd += stats.beta.logpdf(lam, a, b)
    w = np.exp(logd - logd.max())
    return w / w.sum()


class TestUpdateAlpha:
    def test_grid(self):
        g = alpha_grid(4)
        np.testing.assert_allclose(g, [0.2, 0.4, 0.6, 0.8])

    def test_weights_normalized(self):
        _, w = alpha_grid_posterior(init_split_state(10))
        assert abs(w.sum() - 1) < 1e-12

    def test_uniform_s_favours_large_alpha(self):
        st_ = init_split_state(100)
        lam, w = alpha_grid_posterior(st_)
        assert w @ lam > 0.5 / 1.5 + 0.2

    def test_one_hot_s_favours_small_alpha(self):
        st_ = init_split_state(100)
        s = np.full(100, 1e-8)
        s[0] = 1 - s[1:].sum()
        st_.s, st_.log_s = s, np.log(s)
        lam, w = alpha_grid_posterior(st_)
        assert w @ lam < 0.5 / 1.5 - 0.2

    def test_alpha_finite_positive(self):
        st_ = init_split_state(30)
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = update_alpha(st_, rng)
            assert 0 < a < np.inf

    def test_bad_grid(self):
        with pytest.raises(ConfigurationError):
            update_alpha(init_split_state(3), np.random.default_rng(0), grid_size=1)

    def test_grid_matches_independent_quadrature(self):
        P = 8
        k = np.array([1, 1, 2, 1, 1, 0.5, 1, 1.5])
        st_ = init_split_state(P, rho=P / 2, k=k)
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(25):
            st_.u[:] = [40, 0, 1, 0, 0, 0, 2, 0]
            update_split_probs(st_, rng)
            update_alpha(st_, rng)
            if np.any(st_.s < 1e-250):
                continue
            _, w = alpha_grid_posterior(st_, 1000)
            ref = quadrature_weights(st_.s / st_.s.sum(), k, st_.rho, st_.a, st_.b, 1000)
            worst = max(worst, np.max(np.abs(w - ref)))
        assert worst < 1e-6
