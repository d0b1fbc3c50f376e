"""Cross-validated subset evaluation and the acceptable family.

Folds are taken across subjects.  Each fold is refit from scratch on its
training subjects (exact per-fold posteriors; no importance-sampling
shortcut), producing a validation-design weight summary, per-fold optimal
coefficients, and new-subject predictive draws.  Empirical losses use the
point-averaged weight matrix; predictive-loss draws use each draw's own
weight parameters, paired across subsets by common random numbers so that
acceptance probabilities and the family are deterministic given the seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .data import (LongitudinalDataset, ModelConfig, PosteriorDraws,
                   PredictionDesign, predictive_draws)
from .decision import (WeightSummary, mahalanobis_loss_random_intercept,
                       optimal_coefficients, summarize_weights, weighted_gram)

LOSS_FLOOR = 1e-12
THIN_TARGET = 2000


@dataclass(frozen=True)
class FoldPlan:
    """Random balanced partition of subjects into K validation folds."""

    K: int
    assignment: np.ndarray  # (n,) fold id per subject, 0..K-1
    seed: int

    def validation_subjects(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def training_subjects(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)


def make_folds(n: int, K: int, seed: int) -> FoldPlan:
    """K equally-sized (within one), mutually exclusive random subject folds."""
    if K < 2:
        raise ValueError("K must be at least 2: a single fold leaves no holdout")
    if K > n:
        raise ValueError(f"cannot split {n} subjects into {K} folds")
    perm = rng.stream(seed, rng.FOLDS).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for k, chunk in enumerate(np.array_split(perm, K)):
        assignment[chunk] = k
    return FoldPlan(K=K, assignment=assignment, seed=int(seed))


@dataclass(frozen=True)
class FoldFit:
    """Training-data posterior artifacts needed to score one validation fold."""

    fold: int
    validation_subjects: np.ndarray
    X_val_rows: np.ndarray
    y_val: np.ndarray
    m_val: np.ndarray
    ws: WeightSummary
    draws: PosteriorDraws  # training posterior; y_tilde at the validation design


def _fold_digest(data: LongitudinalDataset, plan: FoldPlan, k: int,
                 config: ModelConfig, fold_seed: int) -> str:
    h = hashlib.sha256()
    for block in (data.y, data.X, data.subject, plan.assignment):
        h.update(np.ascontiguousarray(block).tobytes())
    h.update(json.dumps(config.to_jsonable(), sort_keys=True).encode())
    h.update(f"fold={k} seed={fold_seed} K={plan.K}".encode())
    return h.hexdigest()


def refit_fold(data: LongitudinalDataset, plan: FoldPlan, k: int,
               config: ModelConfig, cache_dir=None) -> FoldFit:
    """Fit the sampler on the training subjects of fold k and prepare scoring.

    The chain seed derives from (config.seed, fold id); results are cached
    on disk keyed by (data, fold plan, config, seed) when ``cache_dir`` is
    given, and cache hits reproduce the fit bit-exactly.
    """
    from .gibbs import run_chain

    val = plan.validation_subjects(k)
    train = data.subset_subjects(plan.training_subjects(k))
    val_data = data.subset_subjects(val)
    design = PredictionDesign.from_dataset(val_data, mode="new_subject")
    fold_seed = rng.derive_seed(config.seed, rng.FOLD_SEED, k)
    fold_config = dataclasses.replace(config, seed=fold_seed)

    cached = None
    cache_path = None
    if cache_dir is not None:
        digest = _fold_digest(data, plan, k, config, fold_seed)
        cache_path = Path(cache_dir) / f"fold-{digest}.npz"
        if cache_path.exists():
            with np.load(cache_path) as payload:
                cached = PosteriorDraws(
                    beta=payload["beta"], u=payload["u"],
                    sigma2_eps=payload["sigma2_eps"], sigma2_u=payload["sigma2_u"],
                    y_tilde=payload["y_tilde"],
                )
    if cached is None:
        draws, _ = run_chain(train, fold_config)
        draws = predictive_draws(draws, design, fold_seed)
        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache_path.with_suffix(".tmp.npz")
            np.savez(tmp, beta=draws.beta, u=draws.u, sigma2_eps=draws.sigma2_eps,
                     sigma2_u=draws.sigma2_u, y_tilde=draws.y_tilde)
            tmp.replace(cache_path)
    else:
        draws = cached

    ws = summarize_weights(draws, design)
    return FoldFit(
        fold=k,
        validation_subjects=val,
        X_val_rows=design.row_matrix(),
        y_val=val_data.y,
        m_val=val_data.group_sizes,
        ws=ws,
        draws=draws,
    )


def _refit_fold_task(args):
    data, plan, k, config, cache_dir = args
    return refit_fold(data, plan, k, config, cache_dir)


def fit_folds(data: LongitudinalDataset, plan: FoldPlan, config: ModelConfig,
              cache_dir=None, threads: int = 1) -> list:
    """Refit every fold, optionally across processes; order is by fold id."""
    tasks = [(data, plan, k, config, cache_dir) for k in range(plan.K)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_refit_fold_task, tasks))
    return [_refit_fold_task(t) for t in tasks]


@dataclass(frozen=True)
class SubsetEvaluation:
    """Out-of-sample empirical and predictive losses for one subset."""

    subset: tuple
    empirical_loss: float
    predictive_loss_draws: np.ndarray  # (T',), >= 0
    delta_hat_per_fold: np.ndarray     # (K, p)


def evaluate_subsets(subsets, fold_fits, loss_draw_budget: int = 20_000_000) -> tuple[dict, dict]:
    """Score every subset on every fold; returns ({subset: evaluation}, info).

    Empirical loss: K^{-1} sum_k |I_k|^{-1} * quadratic form of the
    validation residuals under the fold's point-averaged weights.
    Predictive-loss draws: the same form per posterior draw, with that
    draw's weight parameters and new-subject predictive response.  Draws
    are thinned by a common stride when total draw-cells exceed the
    budget; the stride is reported in ``info``.
    """
    K = len(fold_fits)
    T = fold_fits[0].draws.n_draws
    total_cells = T * sum(f.y_val.size for f in fold_fits)
    stride = 1
    if total_cells > loss_draw_budget and T > THIN_TARGET:
        stride = int(np.ceil(T / THIN_TARGET))
    kept = np.arange(0, T, stride)

    grams = [weighted_gram(f.ws, f.X_val_rows) for f in fold_fits]
    n_val = [float(f.validation_subjects.size) for f in fold_fits]
    evaluations = {}
    for subset in subsets:
        subset = tuple(sorted(int(j) for j in subset))
        if subset in evaluations:
            continue
        p = fold_fits[0].X_val_rows.shape[1]
        deltas = np.zeros((K, p))
        empirical = 0.0
        pred = np.zeros(kept.size)
        for k, fit in enumerate(fold_fits):
            sc = optimal_coefficients(fit.ws, fit.X_val_rows, subset, gram=grams[k])
            deltas[k] = sc.delta_hat
            fitted = fit.X_val_rows @ sc.delta_hat
            empirical += fit.ws.quadratic_form(fit.y_val - fitted) / n_val[k]
            resid = fit.draws.y_tilde[kept] - fitted[None, :]
            pred += mahalanobis_loss_random_intercept(
                resid, fit.m_val,
                fit.draws.sigma2_eps[kept], fit.draws.sigma2_u[kept],
            ) / n_val[k]
        evaluations[subset] = SubsetEvaluation(
            subset=subset,
            empirical_loss=empirical / K,
            predictive_loss_draws=pred / K,
            delta_hat_per_fold=deltas,
        )
    info = {"thin_stride": stride, "loss_draws": int(kept.size), "K": K}
    return evaluations, info


def relative_increase_draws(eval_S: SubsetEvaluation, eval_Smin: SubsetEvaluation,
                            floor: float = LOSS_FLOOR) -> tuple[np.ndarray, int]:
    """Paired draws of the percent increase over the best subset, plus the
    count of draws whose denominator hit the degeneracy floor."""
    base = eval_Smin.predictive_loss_draws
    floored = int(np.count_nonzero(base < floor))
    denom = np.maximum(base, floor)
    return 100.0 * (eval_S.predictive_loss_draws - base) / denom, floored


def acceptance_probability(eval_S: SubsetEvaluation, eval_Smin: SubsetEvaluation,
                           eta: float = 0.0) -> float:
    """Monte Carlo P(D <= eta) with draws paired by common random numbers.

    The comparison is non-strict so the best subset accepts itself at
    eta = 0, preserving its guaranteed family membership.
    """
    d, _ = relative_increase_draws(eval_S, eval_Smin)
    return float(np.mean(d <= eta))


@dataclass(frozen=True)
class FamilyMember:
    subset: tuple
    probability: float
    empirical_loss: float
    predictive_loss_mean: float


@dataclass(frozen=True)
class AcceptableFamily:
    """Accepted subsets with the two key members and per-covariate importance."""

    eta: float
    epsilon: float
    members: tuple
    s_min: tuple
    s_small: tuple
    vi: np.ndarray
    n_floored_draws: int = 0

    def member_subsets(self) -> list:
        return [m.subset for m in self.members]


def select_s_min(evaluations) -> tuple:
    """Best subset for out-of-sample point prediction: minimal empirical loss."""
    evals = list(evaluations.values())
    if not evals:
        raise ValueError("no candidate evaluations supplied")
    best = min(evals, key=lambda e: (e.empirical_loss, len(e.subset), e.subset))
    return best.subset


def build_family(evaluations: dict, eta: float, epsilon: float) -> AcceptableFamily:
    """Collect the subsets within an eta percent margin of the best subset
    with predictive probability at least epsilon."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if eta < 0.0:
        raise ValueError("eta must be nonnegative")
    s_min = select_s_min(evaluations)
    eval_min = evaluations[s_min]
    members = []
    n_floored = 0
    for subset in sorted(evaluations, key=lambda s: (len(s), s)):
        ev = evaluations[subset]
        d, floored = relative_increase_draws(ev, eval_min)
        n_floored = max(n_floored, floored)
        prob = float(np.mean(d <= eta))
        if prob >= epsilon:
            members.append(FamilyMember(
                subset=subset,
                probability=prob,
                empirical_loss=ev.empirical_loss,
                predictive_loss_mean=float(ev.predictive_loss_draws.mean()),
            ))
    s_small = min(
        members, key=lambda m: (len(m.subset), m.empirical_loss, m.subset)
    ).subset
    p = next(iter(evaluations.values())).delta_hat_per_fold.shape[1]
    vi = np.zeros(p)
    for m in members:
        vi[list(m.subset)] += 1.0
    vi /= len(members)
    return AcceptableFamily(
        eta=float(eta), epsilon=float(epsilon), members=tuple(members),
        s_min=s_min, s_small=s_small, vi=vi, n_floored_draws=n_floored,
    )
