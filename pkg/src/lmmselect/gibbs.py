"""Gibbs sampler for the Gaussian random-intercept LMM.

The coefficient block is drawn jointly from its conditional with the
random intercepts marginalized out, so the update has the same form as
high-dimensional Bayesian linear regression: Q_beta = X'OmegaX +
Sigma_beta^{-1} and ell_beta = X'Omega y, where Omega is block diagonal
with closed-form blocks sigma_eps^{-2}(I - c_i 11') and c_i =
1/(sigma_eps^2/sigma_u^2 + m_i).  The block sums are accumulated per
subject, which costs O(N p^2) once plus O(n p^2) per sweep, supports
unbalanced groups and row-varying covariates, and never materializes Z
or any N x N matrix.

Priors: horseshoe (inverse-gamma auxiliary representation, all-conjugate
updates) or fixed Gaussian on beta; IG(a0, b0) on sigma_eps^2 with
a0 = b0 = 0 the Jeffreys default; sigma_u ~ Uniform(0, B) handled by
rejection from the unconstrained inverse-gamma conditional.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from . import rng
from .data import LongitudinalDataset, ModelConfig, NumericalError, PosteriorDraws

_TINY = 1e-300


@dataclass
class GibbsState:
    """Current sweep state; variance-type fields are strictly positive."""

    beta: np.ndarray
    u: np.ndarray
    sigma2_eps: float
    sigma2_u: float
    lambda2: np.ndarray | None = None  # horseshoe local scales, squared
    tau2: float | None = None          # horseshoe global scale, squared
    nu: np.ndarray | None = None       # local inverse-gamma auxiliaries
    xi: float | None = None            # global inverse-gamma auxiliary


@dataclass
class Precompute:
    """Per-dataset sufficient pieces reused across sweeps."""

    XtX: np.ndarray   # (p, p)
    Xty: np.ndarray   # (p,)
    Sx: np.ndarray    # (n, p) per-subject column sums of X
    sy: np.ndarray    # (n,) per-subject sums of y
    m: np.ndarray     # (n,) group sizes

    @classmethod
    def from_dataset(cls, data: LongitudinalDataset) -> "Precompute":
        starts = data.row_offsets[:-1]
        return cls(
            XtX=data.X.T @ data.X,
            Xty=data.X.T @ data.y,
            Sx=np.add.reduceat(data.X, starts, axis=0),
            sy=np.add.reduceat(data.y, starts),
            m=data.group_sizes.astype(float),
        )


def _inverse_gamma(generator, shape, rate, size=None):
    """Draw from IG(shape, rate): density proportional to x^{-shape-1} e^{-rate/x}."""
    g = generator.gamma(shape, size=size)
    return np.asarray(rate) / np.maximum(g, _TINY)


def prior_precision(state: GibbsState, config: ModelConfig, p: int) -> np.ndarray:
    """Sigma_beta^{-1} for the current state: horseshoe diag or fixed Gaussian."""
    if config.prior_kind == "horseshoe":
        return np.diag(1.0 / (state.tau2 * state.lambda2))
    cov = config.gaussian_prior_cov
    if np.isscalar(cov):
        return np.eye(p) / float(cov)
    return np.linalg.inv(np.asarray(cov, dtype=float))


def sample_beta_joint(state: GibbsState, pre: Precompute, prior_prec: np.ndarray,
                      generator) -> np.ndarray:
    """Joint draw of all coefficients from N(Q^{-1} ell, Q^{-1}).

    Q and ell use the per-subject block sums of the closed-form weight
    blocks; on a failed factorization the diagonal is jittered by
    1e-10 * trace(Q)/p once, then the failure is a hard error.
    """
    inv_e = 1.0 / state.sigma2_eps
    c = 1.0 / (state.sigma2_eps / state.sigma2_u + pre.m)
    Q = inv_e * (pre.XtX - (pre.Sx * c[:, None]).T @ pre.Sx) + prior_prec
    ell = inv_e * (pre.Xty - pre.Sx.T @ (c * pre.sy))
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        Q = Q + np.eye(Q.shape[0]) * (1e-10 * np.trace(Q) / Q.shape[0])
        try:
            L = np.linalg.cholesky(Q)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("coefficient precision is not positive definite") from exc
    mu = linalg.cho_solve((L, True), ell)
    z = generator.standard_normal(Q.shape[0])
    return mu + linalg.solve_triangular(L, z, lower=True, trans="T")


def intercept_conditional(state: GibbsState, pre: Precompute) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject conditional mean and variance of the random intercepts."""
    resid_sum = pre.sy - pre.Sx @ state.beta
    q = pre.m / state.sigma2_eps + 1.0 / state.sigma2_u
    return (resid_sum / state.sigma2_eps) / q, 1.0 / q


def sample_random_intercepts(state: GibbsState, pre: Precompute, generator) -> np.ndarray:
    mean, var = intercept_conditional(state, pre)
    return mean + np.sqrt(var) * generator.standard_normal(mean.size)


def sample_variances(state: GibbsState, data: LongitudinalDataset, config: ModelConfig,
                     generator) -> tuple[float, float]:
    """Draw (sigma2_eps, sigma2_u) from their conditionals.

    sigma2_eps ~ IG(a0 + N/2, b0 + RSS/2).  sigma2_u is drawn from the
    unconstrained IG((n-1)/2, sum u_i^2 / 2) and rejected while
    sigma_u > B; after a bounded number of rejections the draw falls back
    to the exact inverse-CDF of the same truncated distribution.
    """
    resid = data.y - data.X @ state.beta - state.u[data.subject]
    rss = float(resid @ resid)
    if rss <= 0.0:
        raise ValueError("degenerate data: residual sum of squares is zero")
    a_eps = config.sigma_eps_prior_shape + 0.5 * data.n_rows
    b_eps = config.sigma_eps_prior_rate + 0.5 * rss
    sigma2_eps = float(_inverse_gamma(generator, a_eps, b_eps))

    n = data.n_subjects
    shape = 0.5 * (n - 1)
    rate = max(0.5 * float(state.u @ state.u), _TINY)
    bound = config.sigma_u_upper ** 2
    sigma2_u = None
    for _ in range(1000):
        draw = float(_inverse_gamma(generator, shape, rate))
        if draw < bound:
            sigma2_u = draw
            break
    if sigma2_u is None:
        # Exact truncated draw: condition the gamma precision on g > rate/bound.
        lo = special.gammainc(shape, rate / bound)
        quantile = lo + (1.0 - lo) * generator.uniform()
        g = special.gammaincinv(shape, min(quantile, 1.0 - 1e-16))
        sigma2_u = min(float(rate / max(g, rate / bound)), bound * (1.0 - 1e-12))
    return sigma2_eps, max(sigma2_u, _TINY)


def sample_horseshoe(state: GibbsState, config: ModelConfig, generator) -> None:
    """All-conjugate horseshoe update of (lambda2, nu, tau2, xi) in place."""
    b2 = state.beta ** 2
    state.lambda2 = _inverse_gamma(
        generator, 1.0, 1.0 / state.nu + b2 / (2.0 * state.tau2), size=b2.size
    )
    state.nu = _inverse_gamma(generator, 1.0, 1.0 + 1.0 / state.lambda2, size=b2.size)
    p = b2.size
    state.tau2 = float(_inverse_gamma(
        generator, 0.5 * (p + 1), 1.0 / state.xi + 0.5 * float(np.sum(b2 / state.lambda2))
    ))
    state.xi = float(_inverse_gamma(
        generator, 1.0, 1.0 / config.horseshoe_global_scale ** 2 + 1.0 / state.tau2
    ))


def gibbs_sweep(state: GibbsState, data: LongitudinalDataset, pre: Precompute,
                config: ModelConfig, generator) -> None:
    """One full blocked sweep: beta | y, then u | beta, variances, prior scales."""
    prior_prec = prior_precision(state, config, data.n_columns)
    state.beta = sample_beta_joint(state, pre, prior_prec, generator)
    state.u = sample_random_intercepts(state, pre, generator)
    if config.fixed_variances is None:
        state.sigma2_eps, state.sigma2_u = sample_variances(state, data, config, generator)
    if config.prior_kind == "horseshoe":
        sample_horseshoe(state, config, generator)


def initial_state(data: LongitudinalDataset, config: ModelConfig) -> GibbsState:
    p = data.n_columns
    if config.fixed_variances is not None:
        s2e, s2u = (float(v) for v in config.fixed_variances)
    else:
        total = float(np.var(data.y)) or 1.0
        s2e = s2u = 0.5 * total
    state = GibbsState(
        beta=np.zeros(p),
        u=np.zeros(data.n_subjects),
        sigma2_eps=s2e,
        sigma2_u=min(s2u, config.sigma_u_upper ** 2 * 0.5),
    )
    if config.prior_kind == "horseshoe":
        state.lambda2 = np.ones(p)
        state.nu = np.ones(p)
        state.tau2 = 1.0
        state.xi = 1.0
    return state


def run_chain(data: LongitudinalDataset, config: ModelConfig) -> tuple[PosteriorDraws, dict]:
    """Run the sampler; returns saved draws and per-parameter ESS diagnostics.

    Deterministic given ``config.seed``; the chain consumes one labeled
    Philox stream sequentially.
    """
    if data.n_subjects < 2:
        raise ValueError("at least two subjects are required")
    pre = Precompute.from_dataset(data)
    state = initial_state(data, config)
    generator = rng.stream(config.seed, rng.CHAIN)
    T, p, n = config.n_save, data.n_columns, data.n_subjects
    beta = np.empty((T, p))
    u = np.empty((T, n))
    s2e = np.empty(T)
    s2u = np.empty(T)
    for sweep in range(config.n_burn + T):
        gibbs_sweep(state, data, pre, config, generator)
        k = sweep - config.n_burn
        if k >= 0:
            beta[k] = state.beta
            u[k] = state.u
            s2e[k] = state.sigma2_eps
            s2u[k] = state.sigma2_u
    draws = PosteriorDraws(beta=beta, u=u, sigma2_eps=s2e, sigma2_u=s2u)
    ess = {f"beta[{j}]": effective_sample_size(beta[:, j]) for j in range(p)}
    ess["sigma2_eps"] = effective_sample_size(s2e)
    ess["sigma2_u"] = effective_sample_size(s2u)
    info = {"ess": ess, "n_burn": config.n_burn, "n_save": T, "seed": config.seed}
    return draws, info


def effective_sample_size(x: np.ndarray) -> float:
    """ESS from the autocorrelation function, Geyer initial positive sequence."""
    x = np.asarray(x, dtype=float)
    T = x.size
    if T < 4:
        return float(T)
    centered = x - x.mean()
    var0 = float(centered @ centered) / T
    if var0 == 0.0:
        return float(T)
    size = 1 << (2 * T - 1).bit_length()
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:T].real / T
    rho = acov / var0
    # Sum even/odd autocorrelation pairs while the pair sums stay positive.
    tau = -1.0
    for k in range(T // 2):
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
    tau = max(tau, 1e-12)
    return float(min(T, T / tau))
