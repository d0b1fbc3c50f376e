"""End-to-end orchestration: fit -> search -> select, and the study driver.

One master seed drives everything through labeled streams: the chain and
in-sample predictive draws consume (seed, tag) streams directly, fold
chains use seeds derived from (seed, FOLD_SEED, fold), and replication r
of a study runs the whole pipeline under derive_seed(seed, REP_SEED, r).
Workers receive work by id, so schedules and thread counts cannot change
any output.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng
from .data import (LongitudinalDataset, ModelConfig, PosteriorDraws,
                   PredictionDesign, predictive_draws)
from .decision import (SubsetCoefficients, WeightSummary, pseudo_data,
                       project_predictive_draws, summarize_weights)
from .family import (AcceptableFamily, build_family, evaluate_subsets,
                     fit_folds, make_folds)
from .gibbs import run_chain
from .search import CandidateList, SearchConfig, branch_and_bound, prescreen
from .simulate import (SimDesign, generate, interval_metrics,
                       selection_metrics, true_mahalanobis_loss)


@dataclass(frozen=True)
class FitResult:
    draws: PosteriorDraws          # includes y_tilde at the in-sample design
    design: PredictionDesign
    ws: WeightSummary
    info: dict


def fit_model(data: LongitudinalDataset, config: ModelConfig) -> FitResult:
    """Run the chain and summarize weights at the default in-sample design."""
    import warnings

    rank = data.column_rank()
    if rank < data.n_columns:
        warnings.warn(
            f"design has rank {rank} < {data.n_columns}; rank-deficient "
            "subsets fall back to minimum-norm solutions",
            stacklevel=2,
        )
    draws, info = run_chain(data, config)
    design = PredictionDesign.from_dataset(data, mode="existing_subject")
    draws = predictive_draws(draws, design, config.seed)
    ws = summarize_weights(draws, design)
    return FitResult(draws=draws, design=design, ws=ws, info=info)


def search_candidates(fit: FitResult, config: SearchConfig) -> tuple[CandidateList, np.ndarray]:
    """Pre-screen, transform to pseudo-data, and search; returns candidates
    in original column indices plus the kept-column index set."""
    X_rows = fit.design.row_matrix()
    p = X_rows.shape[1]
    s_max = config.resolved_s_max(p)
    keep = prescreen(fit.draws, s_max, config.forced_in)
    y_star, X_star = pseudo_data(fit.ws, X_rows)
    sub_forced = tuple(int(np.searchsorted(keep, f)) for f in config.forced_in)
    sub_config = SearchConfig(
        s_max=min(s_max, keep.size), s_k=config.s_k, forced_in=sub_forced
    )
    found = branch_and_bound(y_star, X_star[:, keep], sub_config)
    by_size = {}
    for size, items in found.by_size.items():
        out = []
        for sc in items:
            subset = tuple(int(keep[j]) for j in sc.subset)
            delta = np.zeros(p)
            delta[list(subset)] = sc.delta_hat[list(sc.subset)]
            out.append(SubsetCoefficients(
                subset=subset, delta_hat=delta, expected_loss=sc.expected_loss
            ))
        by_size[size] = tuple(out)
    remapped = CandidateList(
        by_size=by_size,
        nodes_visited=found.nodes_visited,
        nodes_pruned=found.nodes_pruned,
    )
    return remapped, keep


@dataclass(frozen=True)
class SelectionResult:
    family: AcceptableFamily
    evaluations: dict
    info: dict


def select_family(data: LongitudinalDataset, candidates: CandidateList,
                  K: int, eta: float, epsilon: float, seed: int,
                  config: ModelConfig, threads: int = 1, cache_dir=None,
                  loss_draw_budget: int = 20_000_000) -> SelectionResult:
    """Cross-validate every candidate subset and build the acceptable family."""
    plan = make_folds(data.n_subjects, K, seed)
    fold_config = dataclasses.replace(config, seed=seed)
    fits = fit_folds(data, plan, fold_config, cache_dir=cache_dir, threads=threads)
    subsets = [c.subset for c in candidates.candidates()]
    evaluations, info = evaluate_subsets(subsets, fits, loss_draw_budget=loss_draw_budget)
    family = build_family(evaluations, eta, epsilon)
    info["K"] = K
    return SelectionResult(family=family, evaluations=evaluations, info=info)


def coefficient_intervals(fit: FitResult, subset, level: float = 0.90) -> dict:
    """Point estimate and central predictive interval for one subset."""
    from .decision import optimal_coefficients

    X_rows = fit.design.row_matrix()
    point = optimal_coefficients(fit.ws, X_rows, subset)
    draws = project_predictive_draws(fit.ws, X_rows, subset, fit.draws.y_tilde)
    alpha = 0.5 * (1.0 - level)
    lower = np.quantile(draws, alpha, axis=0)
    upper = np.quantile(draws, 1.0 - alpha, axis=0)
    return {
        "subset": list(point.subset),
        "estimate": point.delta_hat.tolist(),
        "lower": lower.tolist(),
        "upper": upper.tolist(),
        "level": level,
    }


@dataclass(frozen=True)
class StudyProfile:
    """Chain lengths and selection settings for a simulation study run.

    The defaults are desk-scale: long enough for this model family to mix
    (the coefficient block is drawn jointly from its marginal conditional),
    short enough that a 20-replication study completes on a laptop.
    """

    n_burn: int = 1000
    n_save: int = 2000
    K: int = 10
    s_k: int = 15
    s_max: int | None = None
    eta: float = 0.0
    epsilon: float = 0.10
    loss_draw_budget: int = 20_000_000
    interval_level: float = 0.90


def run_replication(design: SimDesign, profile: StudyProfile) -> list[dict]:
    """One full fit -> search -> select pass; returns metric rows for the
    best subset and the smallest acceptable subset."""
    import warnings

    data, truth = generate(design)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # desk-scale draw counts are intentional
        config = ModelConfig(seed=design.seed, n_burn=profile.n_burn, n_save=profile.n_save)
    fit = fit_model(data, config)
    candidates, _ = search_candidates(
        fit, SearchConfig(s_max=profile.s_max, s_k=profile.s_k, forced_in=(0,))
    )
    selection = select_family(
        data, candidates, K=profile.K, eta=profile.eta, epsilon=profile.epsilon,
        seed=design.seed, config=config, threads=1,
        loss_draw_budget=profile.loss_draw_budget,
    )
    family = selection.family
    delta_by_subset = {c.subset: c.delta_hat for c in candidates.candidates()}
    rows = []
    for method, subset in (("s_min", family.s_min), ("s_small", family.s_small)):
        delta = delta_by_subset[subset]
        loss = true_mahalanobis_loss(delta, truth, design)
        tpr, tnr = selection_metrics(subset, truth)
        ci = coefficient_intervals(fit, subset, level=profile.interval_level)
        intervals = np.column_stack([ci["lower"], ci["upper"]])
        width, coverage = interval_metrics(intervals, truth)
        rows.append({
            "rep": None,  # filled by the study driver
            "method": method,
            "size": len(subset),
            "loss": loss,
            "tpr": tpr,
            "tnr": tnr,
            "width": width,
            "coverage": coverage,
        })
    return rows


def _replication_task(args):
    base_design, profile, rep = args
    rep_seed = rng.derive_seed(base_design.seed, rng.REP_SEED, rep)
    design = dataclasses.replace(base_design, seed=rep_seed)
    rows = run_replication(design, profile)
    for row in rows:
        row["rep"] = rep
    return rep, rows


def run_study(design: SimDesign, profile: StudyProfile, threads: int = 1) -> list[dict]:
    """Independent replications with derived seeds; row order is by (rep, method)."""
    tasks = [(design, profile, rep) for rep in range(design.n_reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replication_task, tasks))
    else:
        results = [_replication_task(t) for t in tasks]
    rows = []
    for _, rep_rows in sorted(results, key=lambda r: r[0]):
        rows.extend(rep_rows)
    return rows
