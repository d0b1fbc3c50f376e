import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg, optimize

import lmmselect as lm
from lmmselect.decision import weighted_gram


def fixed_weight_draws(T, n, m, s2e, s2u, seed=0, y_scale=1.0):
    """Draws with constant variances; y_tilde arbitrary."""
    rng = np.random.default_rng(seed)
    N = n * m
    return lm.PosteriorDraws(
        beta=np.zeros((T, 1)),
        u=np.zeros((T, n)),
        sigma2_eps=np.full(T, s2e),
        sigma2_u=np.full(T, s2u),
        y_tilde=y_scale * rng.standard_normal((T, N)),
    ), lm.PredictionDesign(X_tilde=np.ones((n, 1)), m_tilde=np.full(n, m))


class TestWeightBlocks:
    def test_direct_evaluation(self):
        block = lm.weight_block_random_intercept(1.0, 1.0, 2)
        assert np.allclose(block, [[2 / 3, -1 / 3], [-1 / 3, 2 / 3]], atol=1e-14)

    def test_no_random_effect_limit(self):
        block = lm.weight_block_random_intercept(2.0, 0.0, 3)
        assert np.allclose(block, np.eye(3) / 2.0, atol=1e-14)

    def test_matches_dense_inverse(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            s2e = rng.uniform(0.05, 4.0)
            s2u = rng.uniform(0.01, 4.0)
            m = int(rng.integers(1, 7))
            block = lm.weight_block_random_intercept(s2e, s2u, m)
            dense = np.linalg.inv(s2u * np.ones((m, m)) + s2e * np.eye(m))
            assert np.abs(block - dense).max() <= 1e-10 * np.abs(dense).max()

    def test_slope_no_heterogeneity_limit(self):
        assert lm.weight_random_slope(2.0, np.zeros((2, 2)), np.ones(2)) == pytest.approx(0.5)

    def test_slope_direct_evaluation(self):
        w = lm.weight_random_slope(1.0, np.eye(2), np.array([1.0, 1.0]))
        assert w == pytest.approx(1.0 / 3.0)

    def test_slope_matches_dense_diagonal(self):
        rng = np.random.default_rng(3)
        n, p = 5, 3
        s2e = 0.8
        xs = rng.standard_normal((n, p))
        covs = []
        for _ in range(n):
            A = rng.standard_normal((p, p))
            covs.append(A @ A.T)
        Z = linalg.block_diag(*[x[None, :] for x in xs])
        Sigma_u = linalg.block_diag(*covs)
        dense = np.linalg.inv(Z @ Sigma_u @ Z.T + s2e * np.eye(n))
        for i in range(n):
            w = lm.weight_random_slope(s2e, covs[i], xs[i])
            assert abs(w - dense[i, i]) <= 1e-10 * abs(dense[i, i])
        assert np.abs(dense - np.diag(np.diag(dense))).max() < 1e-12

    def test_slope_rejects_non_psd(self):
        with pytest.raises(ValueError, match="semidefinite"):
            lm.weight_random_slope(1.0, np.array([[1.0, 0.0], [0.0, -1.0]]), np.ones(2))


class TestSummarizeWeights:
    def test_single_draw_is_that_draws_weight(self):
        draws, design = fixed_weight_draws(1, 3, 2, s2e=1.3, s2u=0.6)
        ws = lm.summarize_weights(draws, design)
        expect = lm.weight_block_random_intercept(1.3, 0.6, 2)
        for block in ws.blocks:
            assert np.allclose(block, expect, rtol=1e-12)
        dense = ws.dense()
        y = draws.y_tilde[0]
        assert np.allclose(ws.y_omega, dense @ y, rtol=1e-10)

    def test_constant_weights_factorize_expectation(self):
        draws, design = fixed_weight_draws(50, 4, 3, s2e=0.9, s2u=0.4, seed=5)
        ws = lm.summarize_weights(draws, design)
        assert np.allclose(ws.y_omega, ws.apply(draws.y_tilde.mean(axis=0)), rtol=1e-10)

    def test_blockwise_average_matches_dense_average(self):
        rng = np.random.default_rng(14)
        T, m_sizes = 40, np.array([2, 4, 1, 3])
        n = m_sizes.size
        N = int(m_sizes.sum())
        draws = lm.PosteriorDraws(
            beta=np.zeros((T, 1)), u=np.zeros((T, n)),
            sigma2_eps=rng.uniform(0.5, 2.0, T),
            sigma2_u=rng.uniform(0.1, 1.5, T),
            y_tilde=rng.standard_normal((T, N)),
        )
        design = lm.PredictionDesign(X_tilde=np.ones((n, 1)), m_tilde=m_sizes)
        ws = lm.summarize_weights(draws, design)

        omega_sum = np.zeros((N, N))
        y_omega_sum = np.zeros(N)
        for t in range(T):
            blocks = [
                np.linalg.inv(draws.sigma2_u[t] * np.ones((m, m))
                              + draws.sigma2_eps[t] * np.eye(m))
                for m in m_sizes
            ]
            dense = linalg.block_diag(*blocks)
            omega_sum += dense
            y_omega_sum += dense @ draws.y_tilde[t]
        assert np.abs(ws.dense() - omega_sum / T).max() <= 1e-10 * np.abs(omega_sum / T).max()
        assert np.abs(ws.y_omega - y_omega_sum / T).max() <= 1e-10 * np.abs(y_omega_sum).max() / T

    def test_random_slope_summary(self):
        rng = np.random.default_rng(2)
        T, n, p = 30, 4, 2
        s2e = rng.uniform(0.5, 1.5, T)
        X = rng.standard_normal((n, p))
        Sigma = np.eye(p) * 0.3
        y = rng.standard_normal((T, n))
        ws = lm.summarize_weights_random_slope(s2e, Sigma, X, y)
        w_expect = np.array([
            np.mean(1.0 / (s2e + X[i] @ Sigma @ X[i])) for i in range(n)
        ])
        assert np.allclose(np.concatenate([b.ravel() for b in ws.blocks]), w_expect)

    def test_cholesky_failure_names_block(self):
        from lmmselect.decision import _summary_from_blocks
        with pytest.raises(lm.NumericalError, match="block 1"):
            _summary_from_blocks(
                [np.eye(2), -np.eye(2)], np.zeros(4)
            )


@pytest.fixture(scope="module")
def weighted_instance():
    """Posterior-style summary with varying weights over a 5-column design."""
    rng = np.random.default_rng(33)
    T, n, m, p = 400, 12, 3, 5
    N = n * m
    X_sub = rng.standard_normal((n, p))
    X_sub[:, 0] = 1.0
    design = lm.PredictionDesign(X_tilde=X_sub, m_tilde=np.full(n, m))
    draws = lm.PosteriorDraws(
        beta=np.zeros((T, p)), u=np.zeros((T, n)),
        sigma2_eps=rng.uniform(0.6, 1.8, T),
        sigma2_u=rng.uniform(0.2, 1.0, T),
        y_tilde=rng.standard_normal((T, N)) + design.row_matrix() @ np.array([0.5, 1.0, -1.0, 0.0, 0.3]),
    )
    ws = lm.summarize_weights(draws, design)
    return ws, design.row_matrix(), draws


class TestOptimalCoefficients:
    def test_exact_interpolation_recovers_coefficients(self):
        rng = np.random.default_rng(8)
        n, m, p = 10, 2, 4
        X_sub = rng.standard_normal((n, p))
        design = lm.PredictionDesign(X_tilde=X_sub, m_tilde=np.full(n, m))
        X = design.row_matrix()
        c = np.array([2.0, 0.0, -1.5, 0.0])
        # identity weights: sigma2_u -> 0, sigma2_eps = 1
        draws = lm.PosteriorDraws(
            beta=np.zeros((1, p)), u=np.zeros((1, n)),
            sigma2_eps=np.array([1.0]), sigma2_u=np.array([1e-300]),
            y_tilde=(X @ c)[None, :],
        )
        ws = lm.summarize_weights(draws, design)
        sc = lm.optimal_coefficients(ws, X, (0, 2))
        assert np.allclose(sc.delta_hat, c, atol=1e-8)

    def test_empty_subset_convention(self, weighted_instance):
        ws, X, _ = weighted_instance
        sc = lm.optimal_coefficients(ws, X, ())
        assert np.array_equal(sc.delta_hat, np.zeros(X.shape[1]))
        y_star, _ = lm.pseudo_data(ws, X)
        assert sc.expected_loss == pytest.approx(float(y_star @ y_star), rel=1e-12)

    def test_matches_direct_loss_minimization(self, weighted_instance):
        # Gradient-free oracle: minimize the Monte Carlo average of the
        # per-draw Mahalanobis loss over the stored draws directly.
        ws, X, draws = weighted_instance
        subset = (0, 1, 2)
        sc = lm.optimal_coefficients(ws, X, subset)
        m_sizes = np.diff(ws.row_offsets)

        def mc_loss(free):
            delta = np.zeros(X.shape[1])
            delta[list(subset)] = free
            resid = draws.y_tilde - (X @ delta)[None, :]
            return float(np.mean(lm.mahalanobis_loss_random_intercept(
                resid, m_sizes, draws.sigma2_eps, draws.sigma2_u)))

        res = optimize.minimize(mc_loss, np.zeros(3), method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
        scale = max(np.abs(res.x).max(), 1e-12)
        assert np.abs(sc.delta_hat[list(subset)] - res.x).max() < 1e-4 * scale

    def test_rank_deficiency_uses_minimum_norm(self, weighted_instance):
        ws, X, _ = weighted_instance
        X_dup = np.column_stack([X, X[:, 1]])  # duplicated column
        sc = lm.optimal_coefficients(ws, X_dup, (0, 1, 5))
        baseline = lm.optimal_coefficients(ws, X, (0, 1))
        # duplicated columns split the coefficient evenly in the min-norm solve
        assert sc.delta_hat[1] == pytest.approx(sc.delta_hat[5], rel=1e-8)
        assert sc.delta_hat[1] * 2 == pytest.approx(baseline.delta_hat[1], rel=1e-6)


class TestPseudoData:
    def test_identity_weights_are_identity_transform(self):
        n, m = 6, 2
        rng = np.random.default_rng(4)
        X_sub = rng.standard_normal((n, 3))
        design = lm.PredictionDesign(X_tilde=X_sub, m_tilde=np.full(n, m))
        X = design.row_matrix()
        draws = lm.PosteriorDraws(
            beta=np.zeros((1, 3)), u=np.zeros((1, n)),
            sigma2_eps=np.array([1.0]), sigma2_u=np.array([1e-300]),
            y_tilde=rng.standard_normal((1, n * m)),
        )
        ws = lm.summarize_weights(draws, design)
        y_star, X_star = lm.pseudo_data(ws, X)
        assert np.allclose(y_star, ws.y_omega, atol=1e-12)
        assert np.allclose(X_star, X, atol=1e-12)

    def test_factor_reconstructs_weight_matrix(self, weighted_instance):
        ws, _, _ = weighted_instance
        for L, block in zip(ws.chol, ws.blocks):
            assert np.abs(L @ L.T - block).max() <= 1e-10 * np.abs(block).max()

    def test_all_255_subsets_match_lemma_coefficients(self):
        rng = np.random.default_rng(10)
        T, n, m, p = 200, 16, 2, 8
        X_sub = rng.standard_normal((n, p))
        design = lm.PredictionDesign(X_tilde=X_sub, m_tilde=np.full(n, m))
        X = design.row_matrix()
        draws = lm.PosteriorDraws(
            beta=np.zeros((T, p)), u=np.zeros((T, n)),
            sigma2_eps=rng.uniform(0.5, 2.0, T), sigma2_u=rng.uniform(0.1, 1.0, T),
            y_tilde=rng.standard_normal((T, n * m)),
        )
        ws = lm.summarize_weights(draws, design)
        y_star, X_star = lm.pseudo_data(ws, X)
        gram = weighted_gram(ws, X)
        for r in range(1, p + 1):
            for S in itertools.combinations(range(p), r):
                lemma = lm.optimal_coefficients(ws, X, S, gram=gram).delta_hat
                coef, *_ = np.linalg.lstsq(X_star[:, list(S)], y_star, rcond=None)
                ols = np.zeros(p)
                ols[list(S)] = coef
                scale = max(np.abs(lemma).max(), 1e-12)
                assert np.abs(lemma - ols).max() <= 1e-8 * scale


class TestProjectedDraws:
    def test_projection_of_exact_fit_is_constant(self):
        rng = np.random.default_rng(6)
        n, m, p = 8, 2, 4
        design = lm.PredictionDesign(
            X_tilde=rng.standard_normal((n, p)), m_tilde=np.full(n, m)
        )
        X = design.row_matrix()
        c = np.array([1.0, 0.0, -2.0, 0.0])
        T = 30
        draws = lm.PosteriorDraws(
            beta=np.zeros((T, p)), u=np.zeros((T, n)),
            sigma2_eps=rng.uniform(0.5, 1.5, T), sigma2_u=rng.uniform(0.1, 1.0, T),
            y_tilde=np.tile(X @ c, (T, 1)),
        )
        ws = lm.summarize_weights(draws, design)
        proj = lm.project_predictive_draws(ws, X, (0, 2), draws.y_tilde)
        assert np.allclose(proj, np.tile(c, (T, 1)), atol=1e-8)

    def test_zero_noise_degenerate_predictive_has_zero_width(self):
        design = lm.SimDesign(n=10, p=4, m=2, p_star=2, rho_star=0.0, snr=1.0, seed=3)
        data, truth = lm.generate(design)
        pdesign = lm.PredictionDesign.from_dataset(data, mode="new_subject")
        T = 25
        draws = lm.PosteriorDraws(
            beta=np.tile(truth.beta_star, (T, 1)),
            u=np.zeros((T, 10)),
            sigma2_eps=np.full(T, 1e-300), sigma2_u=np.full(T, 1e-300),
        )
        draws = lm.predictive_draws(draws, pdesign, seed=6)
        ws = lm.summarize_weights(draws, pdesign)
        S = (0,) + truth.active_set
        proj = lm.project_predictive_draws(ws, pdesign.row_matrix(), S, draws.y_tilde)
        widths = np.quantile(proj, 0.95, axis=0) - np.quantile(proj, 0.05, axis=0)
        assert np.all(widths < 1e-6)

    def test_linearity_identity(self, weighted_instance):
        ws, X, draws = weighted_instance
        S = (0, 3, 4)
        proj = lm.project_predictive_draws(ws, X, S, draws.y_tilde)
        mean_first = lm.project_predictive_draws(
            ws, X, S, draws.y_tilde.mean(axis=0)[None, :]
        )[0]
        scale = max(np.abs(mean_first).max(), 1e-12)
        assert np.abs(proj.mean(axis=0) - mean_first).max() <= 1e-10 * scale


class TestLossProperties:
    def test_loss_decomposition_identity(self):
        rng = np.random.default_rng(19)
        sizes = np.array([1, 3, 2, 5])
        e = rng.standard_normal(int(sizes.sum()))
        s2e, s2u = 1.7, 0.4
        loss = lm.mahalanobis_loss_random_intercept(e, sizes, s2e, s2u)
        direct = 0.0
        off = 0
        for m_i in sizes:
            ei = e[off:off + m_i]
            off += m_i
            direct += ei @ ei - (ei.sum() ** 2) / (s2e / s2u + m_i)
        assert abs(s2e * loss - direct) <= 1e-12 * abs(direct)

    def test_same_sign_errors_are_cheaper(self):
        sizes = np.array([2])
        c = 0.8
        same = lm.mahalanobis_loss_random_intercept(np.array([c, c]), sizes, 1.0, 1.0)
        opposite = lm.mahalanobis_loss_random_intercept(np.array([c, -c]), sizes, 1.0, 1.0)
        assert same < opposite

    def test_full_subset_attains_minimum_loss(self, weighted_instance):
        ws, X, _ = weighted_instance
        p = X.shape[1]
        gram = weighted_gram(ws, X)
        full = lm.optimal_coefficients(ws, X, tuple(range(p)), gram=gram)
        # Corollary: the full subset solves the unconstrained problem ...
        direct = np.linalg.solve(gram.G, gram.b)
        assert np.allclose(full.delta_hat, direct, rtol=1e-10)
        # ... and no subset beats it.
        for r in range(p + 1):
            for S in itertools.combinations(range(p), r):
                sc = lm.optimal_coefficients(ws, X, S, gram=gram)
                assert sc.expected_loss >= full.expected_loss - 1e-10

    def test_nesting_monotonicity_exhaustive(self, weighted_instance):
        ws, X, _ = weighted_instance
        p = X.shape[1]
        gram = weighted_gram(ws, X)
        losses = {}
        for r in range(p + 1):
            for S in itertools.combinations(range(p), r):
                losses[S] = lm.optimal_coefficients(ws, X, S, gram=gram).expected_loss
        for S, loss_S in losses.items():
            for j in range(p):
                if j not in S:
                    bigger = tuple(sorted(S + (j,)))
                    assert losses[bigger] <= loss_S + 1e-10


@settings(max_examples=30, deadline=None)
@given(
    s2e=st.floats(0.05, 5.0), s2u=st.floats(0.0, 5.0), m=st.integers(1, 8)
)
def test_weight_block_is_dense_inverse(s2e, s2u, m):
    block = lm.weight_block_random_intercept(s2e, s2u, m)
    dense = np.linalg.inv(s2u * np.ones((m, m)) + s2e * np.eye(m))
    assert np.abs(block - dense).max() <= 1e-9 * np.abs(dense).max()
