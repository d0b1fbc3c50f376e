"""Bayesian decision-analysis subset selection for linear mixed models.

Fit a Gaussian random-intercept LMM by Gibbs sampling, compute
loss-optimal sparse coefficients for any covariate subset under a
Mahalanobis predictive loss, enumerate near-optimal subsets exactly by
branch-and-bound, and summarize the acceptable family of subsets with
cross-validated uncertainty quantification.
"""

__version__ = "0.1.0"

from .data import (INTERCEPT_COLUMN, LongitudinalDataset, ModelConfig,
                   NumericalError, ParseError, PosteriorDraws,
                   PredictionDesign, SchemaError, load_dataset, load_draws,
                   predictive_draws, save_dataset, save_draws)
from .decision import (SubsetCoefficients, WeightSummary,
                       mahalanobis_loss_random_intercept,
                       optimal_coefficients, project_predictive_draws,
                       pseudo_data, summarize_weights,
                       summarize_weights_random_slope,
                       weight_block_random_intercept, weight_random_slope,
                       weighted_gram)
from .family import (AcceptableFamily, FamilyMember, FoldPlan,
                     SubsetEvaluation, acceptance_probability, build_family,
                     evaluate_subsets, fit_folds, make_folds, refit_fold)
from .gibbs import GibbsState, effective_sample_size, run_chain
from .pipeline import (FitResult, SelectionResult, StudyProfile,
                       coefficient_intervals, fit_model, run_replication,
                       run_study, search_candidates, select_family)
from .search import (CandidateList, SearchConfig, branch_and_bound,
                     prescreen, rss)
from .simulate import (SimDesign, SimTruth, family_quantile_loss, generate,
                       interval_metrics, selection_metrics,
                       true_mahalanobis_loss)

__all__ = [name for name in dir() if not name.startswith("_")]
