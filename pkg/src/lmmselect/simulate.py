"""Synthetic-data generator and evaluation metrics for the benchmark study.

Covariates are marginally standard normal with AR-style correlation
corr_base^|j-j'| between columns, randomly permuted (the permutation is
recorded so the active set stays traceable), and augmented with an
intercept.  Responses follow the random-intercept model with variance
components set from the intraclass correlation and signal-to-noise ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .data import INTERCEPT_COLUMN, LongitudinalDataset
from .decision import mahalanobis_loss_random_intercept


@dataclass(frozen=True)
class SimDesign:
    n: int = 300
    p: int = 15
    m: int = 4
    rho_star: float = 0.25
    snr: float = 1.0
    p_star: int = 5
    corr_base: float = 0.75
    n_reps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho_star < 1.0:
            raise ValueError("rho_star must lie in [0, 1)")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if self.p_star > self.p:
            raise ValueError("p_star cannot exceed p")


@dataclass(frozen=True)
class SimTruth:
    """Ground truth for one replication, indexed against the final design.

    ``beta_star`` has length p+1 with the intercept first; ``active_set``
    are the nonzero non-intercept column indices of the permuted design;
    ``x_subjects`` is the subject-level design (n, p+1) so loss evaluation
    is self-contained; ``permutation`` maps original to final covariate
    positions.
    """

    beta_star: np.ndarray
    sigma2_u: float
    sigma2_eps: float
    y_star: np.ndarray
    active_set: tuple
    x_subjects: np.ndarray
    permutation: np.ndarray


def generate(design: SimDesign) -> tuple[LongitudinalDataset, SimTruth]:
    """One replication: (dataset, truth), deterministic given design.seed."""
    gen = rng.stream(design.seed, rng.SIM)
    n, p, m = design.n, design.p, design.m
    z = gen.standard_normal((n, p))
    X = np.empty((n, p))
    X[:, 0] = z[:, 0]
    phi = design.corr_base
    scale = math.sqrt(1.0 - phi * phi)
    for j in range(1, p):
        X[:, j] = phi * X[:, j - 1] + scale * z[:, j]

    # Signals occupy the first p_star pre-permutation columns; the recorded
    # permutation keeps their final positions traceable.
    beta_cov = np.zeros(p)
    n_pos = math.ceil(design.p_star / 2)
    beta_cov[:n_pos] = 1.0
    beta_cov[n_pos:design.p_star] = -1.0
    perm = gen.permutation(p)
    X = X[:, perm]
    final_pos = np.empty(p, dtype=np.int64)
    final_pos[perm] = np.arange(p)      # original column j sits at final_pos[j]
    beta_perm = np.zeros(p)
    beta_perm[final_pos] = beta_cov
    active = tuple(sorted(int(final_pos[j]) + 1 for j in range(design.p_star)))

    beta_star = np.concatenate(([-1.0], beta_perm))
    x_subjects = np.column_stack([np.ones(n), X])
    y_star = x_subjects @ beta_star

    sigma2_tot = float(np.var(y_star, ddof=1)) / design.snr
    sigma2_u = design.rho_star * sigma2_tot
    sigma2_eps = sigma2_tot - sigma2_u
    u = gen.standard_normal(n) * math.sqrt(sigma2_u)
    eps = gen.standard_normal((n, m)) * math.sqrt(sigma2_eps)
    y = (y_star + u)[:, None] + eps

    labels = np.repeat([f"s{i:05d}" for i in range(n)], m)
    columns = [INTERCEPT_COLUMN] + [f"x{j + 1}" for j in range(p)]
    data = LongitudinalDataset.from_arrays(
        labels, y.ravel(), np.repeat(x_subjects, m, axis=0), columns=columns
    )
    truth = SimTruth(
        beta_star=beta_star,
        sigma2_u=sigma2_u,
        sigma2_eps=sigma2_eps,
        y_star=y_star,
        active_set=active,
        x_subjects=x_subjects,
        permutation=perm,
    )
    return data, truth


def true_mahalanobis_loss(delta: np.ndarray, truth: SimTruth, design: SimDesign) -> float:
    """Oracle-weighted loss for predicting the true expectations.

    The per-subject residual y_i* - x_i' delta is replicated m times and
    scored under the closed-form weight blocks at the true variance
    parameters, normalized by the total row count.
    """
    resid = truth.y_star - truth.x_subjects @ np.asarray(delta, dtype=float)
    rows = np.repeat(resid, design.m)
    sizes = np.full(truth.y_star.size, design.m)
    loss = mahalanobis_loss_random_intercept(rows, sizes, truth.sigma2_eps, truth.sigma2_u)
    return float(loss) / rows.size


def selection_metrics(selected, truth: SimTruth) -> tuple[float, float]:
    """(TPR, TNR) over non-intercept covariates; the intercept is ignored."""
    p = truth.beta_star.size - 1
    sel = {int(j) for j in selected} - {0}
    active = set(truth.active_set)
    inactive = set(range(1, p + 1)) - active
    tpr = len(sel & active) / len(active) if active else 1.0
    tnr = len(inactive - sel) / len(inactive) if inactive else 1.0
    return tpr, tnr


def family_quantile_loss(family, truth: SimTruth, design: SimDesign, q: float,
                         coefficients: dict) -> float:
    """q-quantile (type-7) of true losses over acceptable-family members.

    ``coefficients`` maps each member subset to its full-data optimal
    coefficient vector.
    """
    if not family.members:
        raise ValueError("family has no members")
    losses = [
        true_mahalanobis_loss(coefficients[m.subset], truth, design)
        for m in family.members
    ]
    return float(np.quantile(losses, q))


def interval_metrics(intervals: np.ndarray, truth: SimTruth) -> tuple[float, float]:
    """(mean width, coverage fraction) of per-coefficient intervals.

    ``intervals`` is (p+1, 2) with lower <= upper per coordinate.
    """
    intervals = np.asarray(intervals, dtype=float)
    lower, upper = intervals[:, 0], intervals[:, 1]
    if np.any(lower > upper):
        raise ValueError("interval lower bounds exceed upper bounds")
    width = float(np.mean(upper - lower))
    covered = (truth.beta_star >= lower) & (truth.beta_star <= upper)
    return width, float(np.mean(covered))
