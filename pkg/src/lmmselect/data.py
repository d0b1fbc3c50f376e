"""Grouped longitudinal data, model configuration, and posterior-draw containers.

Long-format CSV is the canonical input: one row per within-subject
measurement, columns selected by name through a schema mapping.  Subjects
are re-indexed to contiguous 0..n-1 in order of first appearance; original
labels are retained for reports.  The random-intercept design Z is never
materialized — all downstream algebra works on group-indexed sums.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import rng

INTERCEPT_COLUMN = "(intercept)"


class SchemaError(ValueError):
    """A required column is missing from the input file or schema."""


class ParseError(ValueError):
    """A cell could not be converted to a number."""


class NumericalError(RuntimeError):
    """A numerical operation (factorization, sampler step) failed hard."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LongitudinalDataset:
    """Long-format grouped data with rows sorted so each subject is contiguous.

    Attributes
    ----------
    y : ndarray (N,)
        Response per row.
    X : ndarray (N, p)
        Fixed-effects design, optionally with a leading intercept column.
    subject : ndarray (N,) int
        Contiguous group index 0..n-1 per row, non-decreasing.
    group_sizes : ndarray (n,) int
        Rows per subject, all >= 1, summing to N.
    labels : tuple of str
        Original subject labels in group order.
    columns : tuple of str
        Design column names (including the intercept column when present).
    """

    y: np.ndarray
    X: np.ndarray
    subject: np.ndarray
    group_sizes: np.ndarray
    labels: tuple
    columns: tuple

    def __post_init__(self):
        y = _readonly(np.asarray(self.y, dtype=float))
        X = _readonly(np.asarray(self.X, dtype=float))
        subject = _readonly(np.asarray(self.subject, dtype=np.int64))
        sizes = _readonly(np.asarray(self.group_sizes, dtype=np.int64))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "subject", subject)
        object.__setattr__(self, "group_sizes", sizes)
        object.__setattr__(self, "labels", tuple(str(l) for l in self.labels))
        object.__setattr__(self, "columns", tuple(str(c) for c in self.columns))
        n = sizes.size
        if y.ndim != 1 or X.ndim != 2 or X.shape[0] != y.size or subject.size != y.size:
            raise ValueError("inconsistent row counts across y, X, subject")
        if np.any(sizes < 1):
            raise ValueError("every subject needs at least one row")
        if sizes.sum() != y.size:
            raise ValueError("group sizes do not sum to the row count")
        if len(self.labels) != n:
            raise ValueError("one label per subject required")
        if len(self.columns) != X.shape[1]:
            raise ValueError("one column name per design column required")
        expected = np.repeat(np.arange(n), sizes)
        if not np.array_equal(subject, expected):
            raise ValueError("rows must be grouped contiguously by subject index")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("non-finite values in y or X")

    @property
    def n_rows(self) -> int:
        return self.y.size

    @property
    def n_subjects(self) -> int:
        return self.group_sizes.size

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]

    @property
    def row_offsets(self) -> np.ndarray:
        """Start offset of each subject's row block, plus the final N."""
        return np.concatenate(([0], np.cumsum(self.group_sizes)))

    def column_rank(self) -> int:
        return int(np.linalg.matrix_rank(self.X))

    def subset_subjects(self, subjects) -> "LongitudinalDataset":
        """Dataset restricted to the given subject indices (re-indexed)."""
        subjects = np.asarray(sorted(int(s) for s in subjects))
        keep = np.isin(self.subject, subjects)
        remap = {int(s): i for i, s in enumerate(subjects)}
        new_subject = np.array([remap[int(s)] for s in self.subject[keep]])
        return LongitudinalDataset(
            y=self.y[keep],
            X=self.X[keep],
            subject=new_subject,
            group_sizes=self.group_sizes[subjects],
            labels=tuple(self.labels[s] for s in subjects),
            columns=self.columns,
        )

    @classmethod
    def from_arrays(cls, subject_labels, y, X, columns=None) -> "LongitudinalDataset":
        """Build a dataset from row-level arrays in any row order.

        Rows are stably grouped by subject in order of first appearance.
        """
        labels_raw = [str(l) for l in subject_labels]
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        order_of = {}
        for lab in labels_raw:
            if lab not in order_of:
                order_of[lab] = len(order_of)
        idx = np.fromiter((order_of[lab] for lab in labels_raw), dtype=np.int64)
        perm = np.argsort(idx, kind="stable")
        idx = idx[perm]
        sizes = np.bincount(idx, minlength=len(order_of))
        if np.any(sizes < 1):
            raise ValueError("empty subject group")
        if columns is None:
            columns = tuple(f"x{j}" for j in range(X.shape[1]))
        return cls(
            y=y[perm],
            X=X[perm],
            subject=idx,
            group_sizes=sizes,
            labels=tuple(order_of.keys()),
            columns=tuple(columns),
        )


def load_dataset(path, schema: dict, include_intercept: bool = True) -> LongitudinalDataset:
    """Load a long-format CSV through a column-mapping schema.

    ``schema`` maps roles to column names:
    ``{"subject": <col>, "response": <col>, "covariates": [<cols>...]}``.
    When ``include_intercept`` is set, a literal ones column is prepended
    so the intercept participates in the subset machinery.
    """
    for key in ("subject", "response", "covariates"):
        if key not in schema:
            raise SchemaError(f"schema is missing the {key!r} entry")
    covariates = list(schema["covariates"])
    if not covariates:
        raise SchemaError("schema lists no covariate columns")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    wanted = [schema["subject"], schema["response"], *covariates]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing columns in {path}: {', '.join(missing)}")
    if len(frame) == 0:
        raise ValueError(f"{path} has no data rows")

    def numeric(col: str) -> np.ndarray:
        # float() is correctly rounded, so save-then-load round-trips bit-exactly
        # (pandas' fast to_numeric parser is not).
        cells = frame[col].to_numpy()
        out = np.empty(cells.size)
        for i, text in enumerate(cells):
            try:
                out[i] = float(text)
            except (TypeError, ValueError):
                raise ParseError(
                    f"non-numeric value {text!r} in column {col!r}, data row {i + 1}"
                ) from None
        return out

    y = numeric(schema["response"])
    X = np.column_stack([numeric(c) for c in covariates])
    names = list(covariates)
    if include_intercept:
        X = np.column_stack([np.ones(len(frame)), X])
        names = [INTERCEPT_COLUMN, *names]
    return LongitudinalDataset.from_arrays(
        frame[schema["subject"]].tolist(), y, X, columns=names
    )


def save_dataset(data: LongitudinalDataset, path) -> dict:
    """Write a dataset back to long-format CSV; returns the matching schema.

    The intercept column, when present, is dropped on write and restored
    by ``load_dataset`` so that save-then-load is the identity.
    """
    keep = [j for j, c in enumerate(data.columns) if c != INTERCEPT_COLUMN]
    names = [data.columns[j] for j in keep]
    labels = np.repeat(np.asarray(data.labels, dtype=object), data.group_sizes)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["subject", "response", *names]) + "\n")
        for i in range(data.n_rows):
            cells = [str(labels[i]), repr(float(data.y[i]))]
            cells += [repr(float(v)) for v in data.X[i, keep]]
            fh.write(",".join(cells) + "\n")
    return {"subject": "subject", "response": "response", "covariates": names}


@dataclass(frozen=True)
class ModelConfig:
    """Sampler and prior configuration for the random-intercept LMM.

    ``prior_kind`` selects the fixed-effects prior: ``"horseshoe"`` (the
    default) or ``"gaussian"`` with covariance ``gaussian_prior_cov``
    (scalar c meaning c·I, or a full p×p matrix).  ``sigma_u_upper`` is the
    upper bound B of the uniform prior on sigma_u.  ``sigma_eps_prior_*``
    parameterize an IG(a0, b0) prior on the noise variance; the (0, 0)
    default is the Jeffreys prior.  ``fixed_variances`` freezes
    (sigma2_eps, sigma2_u), which turns the sampler into the conjugate
    fixed-variance special case.
    """

    prior_kind: str = "horseshoe"
    gaussian_prior_cov: object = 100.0
    horseshoe_global_scale: float = 1.0
    sigma_u_upper: float = 100.0
    sigma_eps_prior_shape: float = 0.0
    sigma_eps_prior_rate: float = 0.0
    n_burn: int = 5000
    n_save: int = 10000
    seed: int = 0
    include_intercept: bool = True
    fixed_variances: tuple | None = None

    def __post_init__(self):
        if self.prior_kind not in ("horseshoe", "gaussian"):
            raise ValueError(f"unknown prior_kind {self.prior_kind!r}")
        if self.sigma_u_upper <= 0:
            raise ValueError("sigma_u_upper must be positive")
        if self.n_save < 1:
            raise ValueError("n_save must be at least 1")
        if self.n_save < 1000:
            warnings.warn(
                "n_save < 1000 is below the recommended draw count for "
                "acceptable-family runs",
                stacklevel=2,
            )

    def to_jsonable(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(d["gaussian_prior_cov"], np.ndarray):
            d["gaussian_prior_cov"] = d["gaussian_prior_cov"].tolist()
        if d["fixed_variances"] is not None:
            d["fixed_variances"] = [float(v) for v in d["fixed_variances"]]
        return d


@dataclass(frozen=True)
class PosteriorDraws:
    """Matrix-of-draws container for the saved chain.

    ``beta`` is (T, p), ``u`` is (T, n), the variance draws are (T,), and
    ``y_tilde`` — when present — is (T, N_tilde) aligned with the rows of a
    stated prediction design.
    """

    beta: np.ndarray
    u: np.ndarray
    sigma2_eps: np.ndarray
    sigma2_u: np.ndarray
    y_tilde: np.ndarray | None = None

    def __post_init__(self):
        for name in ("beta", "u", "sigma2_eps", "sigma2_u"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=float)))
        if self.y_tilde is not None:
            object.__setattr__(self, "y_tilde", _readonly(np.asarray(self.y_tilde, dtype=float)))
        T = self.beta.shape[0]
        fields = [self.u, self.sigma2_eps, self.sigma2_u]
        if self.y_tilde is not None:
            fields.append(self.y_tilde)
        if any(f.shape[0] != T for f in fields):
            raise ValueError("all draw blocks must share the same draw count T")
        if np.any(self.sigma2_eps <= 0) or np.any(self.sigma2_u <= 0):
            raise ValueError("variance draws must be strictly positive")

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    @property
    def n_coefficients(self) -> int:
        return self.beta.shape[1]

    @property
    def n_subjects(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class PredictionDesign:
    """Covariate targets for posterior-predictive draws.

    One covariate row per prediction subject, replicated ``m_tilde[i]``
    times at the row level.  ``new_subject`` mode draws a fresh random
    intercept per posterior draw; ``existing_subject`` reuses the stored
    u_i given by ``subject_indices``.
    """

    X_tilde: np.ndarray
    m_tilde: np.ndarray
    mode: str = "new_subject"
    subject_indices: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "X_tilde", _readonly(np.atleast_2d(np.asarray(self.X_tilde, dtype=float))))
        object.__setattr__(self, "m_tilde", _readonly(np.asarray(self.m_tilde, dtype=np.int64)))
        if self.subject_indices is not None:
            object.__setattr__(self, "subject_indices", _readonly(np.asarray(self.subject_indices, dtype=np.int64)))
        if self.mode not in ("new_subject", "existing_subject"):
            raise ValueError(f"unknown prediction mode {self.mode!r}")
        if self.m_tilde.shape != (self.X_tilde.shape[0],):
            raise ValueError("m_tilde must give one replication count per design row")
        if np.any(self.m_tilde < 1):
            raise ValueError("replication counts must be at least 1")
        if self.mode == "existing_subject":
            if self.subject_indices is None:
                raise ValueError("existing_subject mode requires subject_indices")
            if self.subject_indices.shape != (self.X_tilde.shape[0],):
                raise ValueError("one stored-subject index per design row required")

    @property
    def n_subjects(self) -> int:
        return self.X_tilde.shape[0]

    @property
    def n_rows(self) -> int:
        return int(self.m_tilde.sum())

    @property
    def row_offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.m_tilde)))

    def row_matrix(self) -> np.ndarray:
        """Row-level design: each subject's covariate row repeated m_tilde[i] times."""
        return np.repeat(self.X_tilde, self.m_tilde, axis=0)

    @classmethod
    def from_dataset(cls, data: LongitudinalDataset, mode: str = "existing_subject") -> "PredictionDesign":
        """Default in-sample design: observed covariates and group sizes.

        Requires covariates constant within subject (the decision-analysis
        design is subject-level); supply an explicit design otherwise.
        """
        offsets = data.row_offsets
        X_sub = data.X[offsets[:-1]]
        expanded = np.repeat(X_sub, data.group_sizes, axis=0)
        if not np.array_equal(expanded, data.X):
            raise ValueError(
                "covariates vary within subject; build the PredictionDesign explicitly"
            )
        idx = np.arange(data.n_subjects) if mode == "existing_subject" else None
        return cls(X_tilde=X_sub, m_tilde=data.group_sizes, mode=mode, subject_indices=idx)


def predictive_draws(draws: PosteriorDraws, design: PredictionDesign, seed: int) -> PosteriorDraws:
    """Posterior-predictive draws y_tilde at the given design.

    For each saved draw t, y_tilde = X_row beta_t + u-part + eps with
    eps ~ N(0, sigma2_eps_t I); new_subject mode samples one fresh
    u_i ~ N(0, sigma2_u_t) per prediction subject and draw.  Deterministic
    given ``seed``: the new-intercept block is consumed first, then the
    noise block, from a single labeled stream.
    """
    X_row = design.row_matrix()
    if X_row.shape[1] != draws.n_coefficients:
        raise ValueError(
            f"design has {X_row.shape[1]} columns but draws have {draws.n_coefficients}"
        )
    T = draws.n_draws
    rep = np.repeat(np.arange(design.n_subjects), design.m_tilde)
    gen = rng.stream(seed, rng.PREDICTIVE)
    mean = draws.beta @ X_row.T
    if design.mode == "new_subject":
        u_new = gen.standard_normal((T, design.n_subjects))
        u_new *= np.sqrt(draws.sigma2_u)[:, None]
        mean += u_new[:, rep]
    else:
        mean += draws.u[:, design.subject_indices][:, rep]
    eps = gen.standard_normal((T, X_row.shape[0]))
    eps *= np.sqrt(draws.sigma2_eps)[:, None]
    return dataclasses.replace(draws, y_tilde=mean + eps)


# --------------------------------------------------------------------------
# Draw storage: one .npy per parameter block plus a JSON manifest.
# --------------------------------------------------------------------------

_BLOCKS = ("beta", "u", "sigma2_eps", "sigma2_u", "y_tilde")


def save_draws(directory, draws: PosteriorDraws, manifest: dict | None = None) -> None:
    """Write one .npy per block, atomically, with the manifest written first."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "T": draws.n_draws,
        "p": draws.n_coefficients,
        "n": draws.n_subjects,
    }
    payload.update(manifest or {})
    tmp = directory / "manifest.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    tmp.replace(directory / "manifest.json")
    for name in _BLOCKS:
        block = getattr(draws, name)
        if block is not None:
            tmp = directory / f"{name}.npy.tmp"
            with open(tmp, "wb") as fh:  # np.save(path) would append .npy
                np.save(fh, block)
            tmp.replace(directory / f"{name}.npy")


def load_draws(directory) -> tuple[PosteriorDraws, dict]:
    directory = Path(directory)
    blocks = {}
    for name in _BLOCKS:
        path = directory / f"{name}.npy"
        blocks[name] = np.load(path) if path.exists() else None
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    draws = PosteriorDraws(
        beta=blocks["beta"],
        u=blocks["u"],
        sigma2_eps=blocks["sigma2_eps"],
        sigma2_u=blocks["sigma2_u"],
        y_tilde=blocks["y_tilde"],
    )
    return draws, manifest
