import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

import lmmselect as lm
from lmmselect.gibbs import (GibbsState, Precompute, intercept_conditional,
                             sample_beta_joint, sample_horseshoe,
                             sample_random_intercepts, sample_variances)


def balanced_dataset(n, m, p, seed=0, correlated=False):
    rng = np.random.default_rng(seed)
    Xs = rng.standard_normal((n, p))
    if correlated:
        Xs = Xs + rng.standard_normal((n, 1))  # shared factor, off-diagonal mass
    X = np.repeat(Xs, m, axis=0)
    y = rng.standard_normal(n * m)
    return lm.LongitudinalDataset.from_arrays(np.repeat(np.arange(n), m), y, X)


def dense_intercept_precision(s2e, s2u, sizes):
    blocks = [
        np.linalg.inv(s2u * np.ones((m, m)) + s2e * np.eye(m)) for m in sizes
    ]
    return linalg.block_diag(*blocks)


class TestSampleBetaJoint:
    def test_prior_dominated_draws_concentrate_at_zero(self):
        data = balanced_dataset(8, 2, 3, seed=1)
        pre = Precompute.from_dataset(data)
        state = GibbsState(beta=np.zeros(3), u=np.zeros(8), sigma2_eps=1.0, sigma2_u=1.0)
        prec = 1e12 * np.eye(3)
        gen = np.random.default_rng(5)
        draws = np.array([sample_beta_joint(state, pre, prec, gen) for _ in range(10_000)])
        mc_se = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0)) < 3 * mc_se + 1e-12)

    def test_conditional_mean_matches_dense_gls(self):
        n, m, p = 10, 3, 4
        data = balanced_dataset(n, m, p, seed=2)
        pre = Precompute.from_dataset(data)
        s2e, s2u = 1.4, 0.7
        state = GibbsState(beta=np.zeros(p), u=np.zeros(n), sigma2_eps=s2e, sigma2_u=s2u)
        prec = np.eye(p) / 9.0

        Omega = dense_intercept_precision(s2e, s2u, data.group_sizes)
        Q = data.X.T @ Omega @ data.X + prec
        mu_dense = np.linalg.solve(Q, data.X.T @ Omega @ data.y)

        # The sampler's mean is its draw at z = 0; recover it by averaging the
        # analytic form used internally via a large antithetic trick instead:
        # draw mean directly from the same internal quantities.
        inv_e = 1.0 / s2e
        c = 1.0 / (s2e / s2u + pre.m)
        Q_block = inv_e * (pre.XtX - (pre.Sx * c[:, None]).T @ pre.Sx) + prec
        ell = inv_e * (pre.Xty - pre.Sx.T @ (c * pre.sy))
        mu_block = np.linalg.solve(Q_block, ell)
        rel = np.abs(mu_block - mu_dense).max() / np.abs(mu_dense).max()
        assert rel < 1e-10
        assert np.abs(Q_block - Q).max() / np.abs(Q).max() < 1e-12

    def test_draw_covariance_matches_conditional(self):
        n, m, p = 12, 2, 4
        data = balanced_dataset(n, m, p, seed=3, correlated=True)
        pre = Precompute.from_dataset(data)
        s2e, s2u = 1.0, 0.5
        state = GibbsState(beta=np.zeros(p), u=np.zeros(n), sigma2_eps=s2e, sigma2_u=s2u)
        prec = np.eye(p) / 4.0
        Omega = dense_intercept_precision(s2e, s2u, data.group_sizes)
        exact = np.linalg.inv(data.X.T @ Omega @ data.X + prec)
        gen = np.random.default_rng(11)
        T = 200_000
        draws = np.empty((T, p))
        for t in range(T):
            draws[t] = sample_beta_joint(state, pre, prec, gen)
        emp = np.cov(draws.T)
        assert np.all(np.abs(emp - exact) <= 0.05 * np.abs(exact))

    def test_unbalanced_block_sums_match_dense(self):
        rng = np.random.default_rng(9)
        for trial in range(3):
            sizes = rng.integers(1, 6, size=7)
            n, p = sizes.size, 3
            X = rng.standard_normal((int(sizes.sum()), p))
            y = rng.standard_normal(int(sizes.sum()))
            data = lm.LongitudinalDataset.from_arrays(
                np.repeat(np.arange(n), sizes), y, X
            )
            pre = Precompute.from_dataset(data)
            s2e, s2u = rng.uniform(0.5, 2.0, size=2)
            inv_e = 1.0 / s2e
            c = 1.0 / (s2e / s2u + pre.m)
            Q_block = inv_e * (pre.XtX - (pre.Sx * c[:, None]).T @ pre.Sx)
            Omega = dense_intercept_precision(s2e, s2u, sizes)
            Q_dense = data.X.T @ Omega @ data.X
            assert np.abs(Q_block - Q_dense).max() / np.abs(Q_dense).max() < 1e-12

    def test_jitter_then_hard_error(self):
        # A singular precision with no data curvature trips the hard error.
        data = balanced_dataset(4, 1, 2, seed=4)
        zero_data = lm.LongitudinalDataset.from_arrays(
            data.subject, data.y, np.zeros_like(data.X)
        )
        pre = Precompute.from_dataset(zero_data)
        state = GibbsState(beta=np.zeros(2), u=np.zeros(4), sigma2_eps=1.0, sigma2_u=1.0)
        with pytest.raises(lm.NumericalError):
            sample_beta_joint(state, pre, np.zeros((2, 2)), np.random.default_rng(0))


class TestRandomIntercepts:
    def test_degenerate_prior_pins_intercepts_at_zero(self, tiny_dataset):
        pre = Precompute.from_dataset(tiny_dataset)
        state = GibbsState(
            beta=np.zeros(4), u=np.zeros(12), sigma2_eps=1.0, sigma2_u=1e-14
        )
        mean, var = intercept_conditional(state, pre)
        assert np.all(np.abs(mean) < 1e-10)
        assert np.all(var < 1e-13)

    def test_data_free_limit_returns_prior(self, tiny_dataset):
        pre = Precompute.from_dataset(tiny_dataset)
        state = GibbsState(
            beta=np.zeros(4), u=np.zeros(12), sigma2_eps=1e12, sigma2_u=0.8
        )
        mean, var = intercept_conditional(state, pre)
        assert np.all(np.abs(mean) < 1e-6)
        assert np.allclose(var, 0.8, rtol=1e-6)

    def test_balanced_equal_residuals_closed_form(self):
        n, m = 5, 4
        X = np.zeros((n * m, 1))
        r = 0.37
        y = np.full(n * m, r)
        data = lm.LongitudinalDataset.from_arrays(np.repeat(np.arange(n), m), y, X)
        pre = Precompute.from_dataset(data)
        s2e, s2u = 1.3, 0.9
        state = GibbsState(beta=np.zeros(1), u=np.zeros(n), sigma2_eps=s2e, sigma2_u=s2u)
        mean, _ = intercept_conditional(state, pre)
        expect = (m / s2e * r) / (m / s2e + 1.0 / s2u)
        assert np.allclose(mean, expect, rtol=1e-12)

    def test_draws_are_independent_gaussians(self, tiny_dataset):
        pre = Precompute.from_dataset(tiny_dataset)
        state = GibbsState(beta=np.zeros(4), u=np.zeros(12), sigma2_eps=1.0, sigma2_u=1.0)
        gen = np.random.default_rng(0)
        draws = np.array([sample_random_intercepts(state, pre, gen) for _ in range(4000)])
        mean, var = intercept_conditional(state, pre)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * np.sqrt(var / 4000))


class TestVariances:
    def _resid_dataset(self):
        # Two one-row subjects, X = 0, y = (1, 1): residuals are exactly (1, 1).
        return lm.LongitudinalDataset.from_arrays(
            ["a", "b"], [1.0, 1.0], np.zeros((2, 1))
        )

    def test_sigma_eps_inverse_gamma_oracle(self):
        data = self._resid_dataset()
        config = lm.ModelConfig(n_save=1000, seed=0)
        state = GibbsState(beta=np.zeros(1), u=np.zeros(2), sigma2_eps=1.0, sigma2_u=1.0)
        gen = np.random.default_rng(21)
        draws = np.array([
            sample_variances(state, data, config, gen)[0] for _ in range(100_000)
        ])
        # IG(1, 1): E[1/x] = 1 with MC s.e. 1/sqrt(T); median = 1/log 2.
        prec = 1.0 / draws
        assert abs(prec.mean() - 1.0) < 3.0 / np.sqrt(draws.size)
        assert abs(np.median(draws) - 1.0 / np.log(2)) < 0.02

    def test_sigma_u_concentrates_when_intercepts_vanish(self):
        n = 100
        data = lm.LongitudinalDataset.from_arrays(
            np.arange(n), np.ones(n), np.zeros((n, 1))
        )
        config = lm.ModelConfig(n_save=1000, seed=0)
        state = GibbsState(beta=np.zeros(1), u=np.zeros(n), sigma2_eps=1.0, sigma2_u=1.0)
        gen = np.random.default_rng(3)
        draws = np.array([
            sample_variances(state, data, config, gen)[1] for _ in range(2000)
        ])
        assert np.median(np.sqrt(draws)) < 0.01 * config.sigma_u_upper

    def test_truncation_never_exceeded(self):
        n = 4
        data = lm.LongitudinalDataset.from_arrays(
            np.arange(n), np.ones(n), np.zeros((n, 1))
        )
        config = lm.ModelConfig(n_save=1000, sigma_u_upper=0.5, seed=0)
        state = GibbsState(
            beta=np.zeros(1), u=np.full(n, 50.0), sigma2_eps=1.0, sigma2_u=1.0
        )
        gen = np.random.default_rng(8)
        for _ in range(2000):
            _, s2u = sample_variances(state, data, config, gen)
            assert np.sqrt(s2u) < 0.5

    def test_zero_rss_is_degenerate(self):
        data = lm.LongitudinalDataset.from_arrays(["a", "b"], [0.0, 0.0], np.zeros((2, 1)))
        config = lm.ModelConfig(n_save=1000, seed=0)
        state = GibbsState(beta=np.zeros(1), u=np.zeros(2), sigma2_eps=1.0, sigma2_u=1.0)
        with pytest.raises(ValueError, match="degenerate"):
            sample_variances(state, data, config, np.random.default_rng(0))


class TestHorseshoe:
    def _state(self, beta):
        beta = np.asarray(beta, dtype=float)
        p = beta.size
        return GibbsState(
            beta=beta, u=np.zeros(1), sigma2_eps=1.0, sigma2_u=1.0,
            lambda2=np.ones(p), tau2=1.0, nu=np.ones(p), xi=1.0,
        )

    def test_null_signal_stays_finite_and_positive(self):
        config = lm.ModelConfig(n_save=1000, seed=0)
        state = self._state(np.zeros(3))
        gen = np.random.default_rng(17)
        for _ in range(500):
            sample_horseshoe(state, config, gen)
            assert np.all(np.isfinite(state.lambda2)) and np.all(state.lambda2 > 0)
            assert np.isfinite(state.tau2) and state.tau2 > 0

    def test_local_scale_grows_with_signal(self):
        config = lm.ModelConfig(n_save=1000, seed=0)
        medians = []
        for magnitude in (0.1, 1.0, 10.0):
            state = self._state([magnitude])
            gen = np.random.default_rng(29)
            draws = []
            for _ in range(4000):
                sample_horseshoe(state, config, gen)
                draws.append(state.lambda2[0])
            medians.append(np.median(draws))
        assert medians[0] < medians[1] < medians[2]

    def test_positivity_over_a_million_updates(self):
        config = lm.ModelConfig(n_save=1000, seed=0)
        state = self._state(np.linspace(-3, 3, 100))
        gen = np.random.default_rng(31)
        for _ in range(10_000):
            sample_horseshoe(state, config, gen)
            if not (state.lambda2.min() > 0 and state.tau2 > 0
                    and state.nu.min() > 0 and state.xi > 0):
                pytest.fail("positivity violated")


class TestRunChain:
    def test_seed_identical_reruns_are_bit_identical(self, tiny_dataset):
        config = lm.ModelConfig(n_burn=50, n_save=100, seed=77)
        a, _ = lm.run_chain(tiny_dataset, config)
        b, _ = lm.run_chain(tiny_dataset, config)
        assert np.array_equal(a.beta, b.beta)
        assert np.array_equal(a.u, b.u)
        assert np.array_equal(a.sigma2_eps, b.sigma2_eps)
        c, _ = lm.run_chain(tiny_dataset, dataclasses.replace(config, seed=78))
        assert not np.array_equal(a.beta, c.beta)

    def test_saved_draws_satisfy_invariants(self, tiny_dataset):
        config = lm.ModelConfig(n_burn=20, n_save=200, seed=5)
        draws, info = lm.run_chain(tiny_dataset, config)
        assert np.all(draws.sigma2_eps > 0) and np.all(draws.sigma2_u > 0)
        assert np.all(np.isfinite(draws.beta))
        assert set(info["ess"]) == {f"beta[{j}]" for j in range(4)} | {"sigma2_eps", "sigma2_u"}

    def test_intraclass_coverage_over_replications(self):
        # rho* = 0.25 at n=300: the 95% interval for s2u/(s2u+s2e) should
        # cover the truth in at least 16 of 20 replications.
        hits = 0
        for rep in range(20):
            design = lm.SimDesign(n=300, p=15, m=4, rho_star=0.25, seed=1000 + rep)
            data, truth = lm.generate(design)
            config = lm.ModelConfig(n_burn=400, n_save=800, seed=rep)
            draws, _ = lm.run_chain(data, config)
            icc = draws.sigma2_u / (draws.sigma2_u + draws.sigma2_eps)
            lo, hi = np.quantile(icc, [0.025, 0.975])
            hits += lo <= 0.25 <= hi
        assert hits >= 16


@settings(max_examples=10, deadline=None)
@given(
    n=st.integers(3, 8), m=st.integers(1, 3), p=st.integers(1, 4),
    seed=st.integers(0, 10_000),
)
def test_chain_state_invariants_on_random_data(n, m, p, seed):
    rng = np.random.default_rng(seed)
    data = lm.LongitudinalDataset.from_arrays(
        np.repeat(np.arange(n), m),
        rng.standard_normal(n * m),
        rng.standard_normal((n * m, p)),
    )
    draws, _ = lm.run_chain(data, lm.ModelConfig(n_burn=10, n_save=30, seed=seed))
    assert np.all(draws.sigma2_eps > 0)
    assert np.all(draws.sigma2_u > 0)
    assert np.sqrt(draws.sigma2_u.max()) < 100.0
