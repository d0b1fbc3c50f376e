import warnings
from types import SimpleNamespace

import numpy as np
import pytest

import lmmselect as lm

warnings.filterwarnings("ignore", message="n_save < 1000")


@pytest.fixture(scope="session")
def small_study():
    """One small end-to-end run shared across test modules.

    n=40 subjects, m=3, p=8 covariates (3 active), short chains: big enough
    for the pipeline to behave, small enough to fit and cross-validate in
    seconds.
    """
    design = lm.SimDesign(n=40, p=8, m=3, p_star=3, n_reps=1, seed=21)
    data, truth = lm.generate(design)
    config = lm.ModelConfig(n_burn=300, n_save=600, seed=13)
    fit = lm.fit_model(data, config)
    candidates, kept = lm.search_candidates(fit, lm.SearchConfig(s_k=5, forced_in=(0,)))
    selection = lm.select_family(
        data, candidates, K=5, eta=0.0, epsilon=0.10, seed=13, config=config
    )
    return SimpleNamespace(
        design=design, data=data, truth=truth, config=config, fit=fit,
        candidates=candidates, kept=kept, selection=selection,
    )


@pytest.fixture()
def tiny_dataset():
    rng = np.random.default_rng(7)
    n, m, p = 12, 3, 4
    Xs = rng.standard_normal((n, p))
    X = np.repeat(Xs, m, axis=0)
    X[:, 0] = 1.0
    beta = np.array([0.5, 1.0, 0.0, -1.0])
    u = 0.6 * rng.standard_normal(n)
    y = X @ beta + np.repeat(u, m) + 0.4 * rng.standard_normal(n * m)
    return lm.LongitudinalDataset.from_arrays(
        np.repeat([f"s{i}" for i in range(n)], m), y, X,
        columns=[lm.INTERCEPT_COLUMN, "a", "b", "c"],
    )
