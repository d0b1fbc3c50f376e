"""Mahalanobis-loss decision analysis over posterior draws.

Covers the closed-form weight blocks for the random-intercept and
random-slope models, the posterior-averaged weight summary (Omega_hat,
y_omega_hat), loss-optimal coefficients for any covariate subset, the
pseudo-data transform that reduces expected-loss minimization to ordinary
least squares, and projected per-draw coefficients for uncertainty
quantification.

The square-root convention throughout: per subject block, L is the lower
Cholesky factor of the Omega_hat block, the transformed design is L' X,
and the pseudo-response solves L y* = y_omega_hat.  Then X*'X* =
X'Omega_hat X and X*'y* = X'y_omega_hat, so subset OLS on (y*, X*)
reproduces the optimal coefficients exactly and residual sums of squares
order subsets identically to expected Mahalanobis loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import NumericalError, PosteriorDraws, PredictionDesign

PINV_RCOND = 1e-10


def weight_block_random_intercept(sigma2_eps: float, sigma2_u: float, m_i: int) -> np.ndarray:
    """Closed-form m_i x m_i precision block: sigma_eps^{-2} (I - c 11').

    c = 1/(sigma2_eps/sigma2_u + m_i); no matrix is inverted numerically.
    A zero sigma2_u degenerates to white noise, sigma_eps^{-2} I.
    """
    if sigma2_eps <= 0 or sigma2_u < 0 or m_i < 1:
        raise ValueError("need sigma2_eps > 0, sigma2_u >= 0, m_i >= 1")
    c = 0.0 if sigma2_u == 0.0 else 1.0 / (sigma2_eps / sigma2_u + m_i)
    block = np.full((m_i, m_i), -c)
    np.fill_diagonal(block, 1.0 - c)
    return block / sigma2_eps


def weight_random_slope(sigma2_eps: float, Sigma_u_i: np.ndarray, x_tilde_i: np.ndarray) -> float:
    """Scalar weight 1/(sigma2_eps + x' Sigma_u x) for one random-slope subject."""
    S = np.atleast_2d(np.asarray(Sigma_u_i, dtype=float))
    x = np.asarray(x_tilde_i, dtype=float)
    if not np.allclose(S, S.T):
        raise ValueError("subject slope covariance must be symmetric")
    if np.linalg.eigvalsh(S).min() < -1e-10 * max(1.0, np.abs(S).max()):
        raise ValueError("subject slope covariance must be positive semidefinite")
    return 1.0 / (sigma2_eps + float(x @ S @ x))


@dataclass(frozen=True)
class WeightSummary:
    """Posterior-averaged weight matrix and weighted predictive mean.

    ``blocks[i]`` is the i-th subject's block of Omega_hat, ``chol[i]`` its
    lower Cholesky factor, and ``y_omega`` the stacked E[Omega_psi y_tilde].
    """

    blocks: tuple
    chol: tuple
    y_omega: np.ndarray
    block_sizes: np.ndarray

    @property
    def n_rows(self) -> int:
        return int(self.block_sizes.sum())

    @property
    def row_offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.block_sizes)))

    def dense(self) -> np.ndarray:
        """Materialized Omega_hat; for small problems and oracle checks only."""
        return linalg.block_diag(*self.blocks)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Omega_hat @ v for row-aligned v of shape (N,) or (N, k)."""
        out = np.empty_like(np.asarray(v, dtype=float))
        offsets = self.row_offsets
        for i, block in enumerate(self.blocks):
            rows = slice(offsets[i], offsets[i + 1])
            out[rows] = block @ v[rows]
        return out

    def quadratic_form(self, v: np.ndarray) -> float:
        """v' Omega_hat v computed blockwise."""
        v = np.asarray(v, dtype=float)
        return float(v @ self.apply(v))


def _summary_from_blocks(blocks: list, y_omega: np.ndarray) -> WeightSummary:
    chol = []
    for i, block in enumerate(blocks):
        try:
            chol.append(np.linalg.cholesky(block))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"weight block {i} is not positive definite") from exc
    sizes = np.array([b.shape[0] for b in blocks], dtype=np.int64)
    return WeightSummary(
        blocks=tuple(blocks), chol=tuple(chol), y_omega=y_omega, block_sizes=sizes
    )


def summarize_weights(draws: PosteriorDraws, design: PredictionDesign) -> WeightSummary:
    """Average the random-intercept weight blocks and Omega_psi y_tilde over draws.

    Per draw, the block action on y_tilde uses the closed form
    sigma_eps^{-2} y_i - {sigma_eps^{-2} c_i sum_j y_ij} 1, so no matrix
    product is ever formed per draw.
    """
    if draws.y_tilde is None:
        raise ValueError("draws must include y_tilde aligned with the design")
    if draws.y_tilde.shape[1] != design.n_rows:
        raise ValueError("y_tilde and design row counts differ")
    m = design.m_tilde
    inv_e = 1.0 / draws.sigma2_eps                      # (T,)
    c = 1.0 / (draws.sigma2_eps[:, None] / draws.sigma2_u[:, None] + m[None, :])  # (T, n)
    a = float(inv_e.mean())
    b = -(inv_e[:, None] * c).mean(axis=0)              # (n,)

    offsets = design.row_offsets
    starts = offsets[:-1]
    sums = np.add.reduceat(draws.y_tilde, starts, axis=1)      # (T, n)
    y_omega = (inv_e[:, None] * draws.y_tilde).mean(axis=0)
    correction = (inv_e[:, None] * c * sums).mean(axis=0)       # (n,)
    y_omega = y_omega - np.repeat(correction, m)

    blocks = []
    for i, mi in enumerate(m):
        block = np.full((mi, mi), b[i])
        np.fill_diagonal(block, a + b[i])
        blocks.append(block)
    return _summary_from_blocks(blocks, y_omega)


def summarize_weights_random_slope(sigma2_eps: np.ndarray, Sigma_u: np.ndarray,
                                   X_tilde: np.ndarray, y_tilde: np.ndarray) -> WeightSummary:
    """Weight summary for the random-slope model from caller-supplied draws.

    ``Sigma_u`` may be (T, n, p, p), (n, p, p), or a single (p, p) shared
    across subjects and draws; Omega_psi is diagonal with
    omega_i = 1/(sigma2_eps + x_i' Sigma_u_i x_i).
    """
    X_tilde = np.atleast_2d(np.asarray(X_tilde, dtype=float))
    sigma2_eps = np.asarray(sigma2_eps, dtype=float)
    T, (n, p) = sigma2_eps.size, X_tilde.shape
    S = np.asarray(Sigma_u, dtype=float)
    if S.shape == (p, p):
        S = np.broadcast_to(S, (T, n, p, p))
    elif S.shape == (n, p, p):
        S = np.broadcast_to(S[None], (T, n, p, p))
    elif S.shape != (T, n, p, p):
        raise ValueError("Sigma_u must be (p,p), (n,p,p), or (T,n,p,p)")
    quad = np.einsum("ij,tijk,ik->ti", X_tilde, S, X_tilde)
    if quad.min() < -1e-10:
        raise ValueError("subject slope covariances must be positive semidefinite")
    omega = 1.0 / (sigma2_eps[:, None] + np.maximum(quad, 0.0))   # (T, n)
    blocks = [np.array([[w]]) for w in omega.mean(axis=0)]
    y_omega = (omega * np.asarray(y_tilde, dtype=float)).mean(axis=0)
    return _summary_from_blocks(blocks, y_omega)


@dataclass(frozen=True)
class SubsetCoefficients:
    """A covariate subset with its loss-optimal coefficients.

    ``delta_hat`` is a full-length p vector, zero off the subset;
    ``expected_loss`` is the pseudo-data residual sum of squares
    ||y* - X* delta||^2, i.e. the expected Mahalanobis loss up to the
    delta-independent constant.
    """

    subset: tuple
    delta_hat: np.ndarray
    expected_loss: float


@dataclass(frozen=True)
class WeightedGram:
    """Shared cross-products for repeated subset solves against one design."""

    G: np.ndarray        # X' Omega_hat X
    b: np.ndarray        # X' y_omega_hat
    y_star_norm2: float  # ||y*||^2 = y_omega' Omega_hat^{-1} y_omega


def weighted_gram(ws: WeightSummary, X_rows: np.ndarray) -> WeightedGram:
    X_rows = np.asarray(X_rows, dtype=float)
    OX = ws.apply(X_rows)
    y_star = _whiten_response(ws)
    return WeightedGram(G=X_rows.T @ OX, b=X_rows.T @ ws.y_omega,
                        y_star_norm2=float(y_star @ y_star))


def _spd_solver(A: np.ndarray):
    """Multi-use solver for an SPD system via Cholesky.

    Falls back to the minimum-norm pseudo-inverse (singular values below
    1e-10 of the largest treated as zero) when factorization fails or a
    pivot reveals rank deficiency.
    """
    try:
        c, lower = linalg.cho_factor(A)
        d = np.diag(c)
        if d.min() ** 2 > PINV_RCOND * d.max() ** 2:
            return lambda B: linalg.cho_solve((c, lower), B)
    except np.linalg.LinAlgError:
        pass
    P = np.linalg.pinv(A, rcond=PINV_RCOND, hermitian=True)
    return lambda B: P @ B


def _solve_spd(A: np.ndarray, b: np.ndarray):
    return _spd_solver(A)(b)


def optimal_coefficients(ws: WeightSummary, X_rows: np.ndarray, subset,
                         gram: WeightedGram | None = None) -> SubsetCoefficients:
    """Loss-optimal coefficients for a given subset.

    Solves (X_S' Omega_hat X_S) delta = X_S' y_omega_hat via Cholesky,
    falling back to the minimum-norm pseudo-inverse solution under rank
    deficiency.  The empty subset returns the zero vector by convention,
    with expected_loss ||y*||^2.
    """
    X_rows = np.asarray(X_rows, dtype=float)
    if gram is None:
        gram = weighted_gram(ws, X_rows)
    p = X_rows.shape[1]
    subset = tuple(sorted(int(j) for j in subset))
    delta = np.zeros(p)
    if subset:
        cols = list(subset)
        delta[cols] = _solve_spd(gram.G[np.ix_(cols, cols)], gram.b[cols])
    loss = gram.y_star_norm2 - 2.0 * float(delta @ gram.b) + float(delta @ gram.G @ delta)
    return SubsetCoefficients(subset=subset, delta_hat=delta, expected_loss=max(loss, 0.0))


def _whiten_response(ws: WeightSummary) -> np.ndarray:
    y_star = np.empty(ws.n_rows)
    offsets = ws.row_offsets
    for i, L in enumerate(ws.chol):
        rows = slice(offsets[i], offsets[i + 1])
        y_star[rows] = linalg.solve_triangular(L, ws.y_omega[rows], lower=True)
    return y_star


def pseudo_data(ws: WeightSummary, X_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Transformed (y*, X*) such that subset OLS reproduces optimal coefficients.

    y* is computed by per-block triangular solves (never by inverting
    Omega_hat) and X* = L' X per block.
    """
    X_rows = np.asarray(X_rows, dtype=float)
    if X_rows.shape[0] != ws.n_rows:
        raise ValueError("design rows do not match the weight summary")
    X_star = np.empty_like(X_rows)
    offsets = ws.row_offsets
    for i, L in enumerate(ws.chol):
        rows = slice(offsets[i], offsets[i + 1])
        X_star[rows] = L.T @ X_rows[rows]
    return _whiten_response(ws), X_star


def project_predictive_draws(ws: WeightSummary, X_rows: np.ndarray, subset,
                             y_tilde: np.ndarray) -> np.ndarray:
    """Per-draw projected coefficients (X_S'Omega X_S)^{-1} X_S'Omega y_tilde.

    The projection operator is factorized once and applied to every draw;
    interval estimates are empirical quantiles across the returned rows.
    """
    X_rows = np.asarray(X_rows, dtype=float)
    Y = np.atleast_2d(np.asarray(y_tilde, dtype=float))
    if Y.shape[1] != ws.n_rows:
        raise ValueError("y_tilde draws do not match the weight summary rows")
    subset = tuple(sorted(int(j) for j in subset))
    T, p = Y.shape[0], X_rows.shape[1]
    out = np.zeros((T, p))
    if not subset:
        return out
    cols = list(subset)
    OXs = ws.apply(X_rows[:, cols])                  # Omega_hat X_S, (N, |S|)
    A = X_rows[:, cols].T @ OXs
    B = Y @ OXs                                      # (T, |S|)
    out[:, cols] = _spd_solver(A)(B.T).T
    return out


def mahalanobis_loss_random_intercept(resid: np.ndarray, group_sizes: np.ndarray,
                                      sigma2_eps, sigma2_u) -> np.ndarray:
    """Per-draw Mahalanobis loss of row-level residuals under Eq.-(9)-form blocks.

    ``resid`` is (N,) or (T, N) grouped by subject; the variances are
    scalars or (T,) aligned with the leading axis.  Returns a scalar or a
    (T,) array:  sigma_eps^{-2} sum_i [ sum_j e_ij^2 - c_i (sum_j e_ij)^2 ].
    """
    resid = np.asarray(resid, dtype=float)
    squeeze = resid.ndim == 1
    R = np.atleast_2d(resid)
    m = np.asarray(group_sizes, dtype=float)
    starts = np.concatenate(([0], np.cumsum(m.astype(np.int64))))[:-1]
    s1 = np.add.reduceat(R, starts, axis=1)
    s2 = np.add.reduceat(R * R, starts, axis=1)
    s2e = np.atleast_1d(np.asarray(sigma2_eps, dtype=float))[:, None]
    s2u = np.atleast_1d(np.asarray(sigma2_u, dtype=float))[:, None]
    c = np.where(s2u > 0, 1.0 / (s2e / np.where(s2u > 0, s2u, 1.0) + m[None, :]), 0.0)
    loss = ((s2 - c * s1 ** 2) / s2e).sum(axis=1)
    return float(loss[0]) if squeeze else loss
