"""Covariate pre-screening and exact best-subsets search on pseudo-data.

Because expected Mahalanobis loss and pseudo-data residual sum of squares
order subsets identically, any least-squares best-subsets engine applies.
The search here is a lexicographic branch-and-bound over the free columns
(forced-in columns are residualized out first, then reinserted): a branch
is pruned only when the RSS of its largest unconstrained superset — a
valid lower bound for every completion, by nesting — strictly exceeds the
current worst retained candidate of every size the branch could still
produce.  RSS values are maintained incrementally with a Schur-complement
(sweep) update and restored exactly on backtracking, so the enumeration is
deterministic and exact up to floating point.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .data import PosteriorDraws
from .decision import PINV_RCOND, SubsetCoefficients

_DEP_TOL = 1e-12


@dataclass(frozen=True)
class SearchConfig:
    """Search-space bounds: maximum size, subsets kept per size, forced columns."""

    s_max: int | None = None          # default min(p, 35), resolved at run time
    s_k: int = 15
    forced_in: tuple = (0,)           # column indices always included

    def __post_init__(self):
        if self.s_k < 1:
            raise ValueError("s_k must be at least 1")
        object.__setattr__(self, "forced_in", tuple(sorted(set(int(j) for j in self.forced_in))))

    def resolved_s_max(self, p: int) -> int:
        s = min(p, 35) if self.s_max is None else int(self.s_max)
        if not 1 <= s <= p:
            raise ValueError(f"s_max must lie in 1..{p}")
        return s


@dataclass
class CandidateList:
    """Retained subsets per size, each sorted by expected loss ascending."""

    by_size: dict
    nodes_visited: int = 0
    nodes_pruned: int = 0

    def sizes(self):
        return sorted(self.by_size)

    def candidates(self):
        """All retained subsets, sizes ascending then loss rank."""
        for k in self.sizes():
            yield from self.by_size[k]

    def best(self) -> SubsetCoefficients:
        return min(self.candidates(), key=lambda c: (c.expected_loss, c.subset))


def prescreen(draws: PosteriorDraws, s_max: int, forced_in=()) -> np.ndarray:
    """Keep the s_max columns with the largest standardized posterior means.

    Columns are ranked by |posterior mean| / posterior s.d. (s.d. floored
    at 1e-12 so constant draws rank by |mean|); forced columns are always
    kept.  Returns sorted original column indices.
    """
    p = draws.n_coefficients
    forced = sorted(set(int(j) for j in forced_in))
    if s_max >= p:
        return np.arange(p)
    if s_max < len(forced):
        raise ValueError("s_max is smaller than the forced-in set")
    mean = draws.beta.mean(axis=0)
    sd = draws.beta.std(axis=0)
    score = np.abs(mean) / np.maximum(sd, 1e-12)
    ranked = np.argsort(-score, kind="stable")
    keep = list(forced)
    for j in ranked:
        if len(keep) >= s_max:
            break
        if int(j) not in forced:
            keep.append(int(j))
    return np.array(sorted(keep))


def rss(y_star: np.ndarray, X_star: np.ndarray, subset) -> float:
    """RSS of least squares on the pseudo-data columns in ``subset``.

    Rank-deficient subsets use the minimum-norm solution; the empty subset
    returns ||y*||^2.
    """
    y = np.asarray(y_star, dtype=float)
    cols = sorted(int(j) for j in subset)
    if not cols:
        return float(y @ y)
    coef, *_ = np.linalg.lstsq(np.asarray(X_star, dtype=float)[:, cols], y, rcond=PINV_RCOND)
    resid = y - np.asarray(X_star, dtype=float)[:, cols] @ coef
    return float(resid @ resid)


class _SweepState:
    """Incremental RSS via Schur-complement updates with exact backtracking."""

    def __init__(self, G: np.ndarray, b: np.ndarray, yty: float):
        self.E = G.copy()
        self.r = b.copy()
        self.rss = yty
        self.diag0 = np.maximum(np.diag(G).copy(), 1.0)
        self._stack = []

    def push(self, j: int) -> None:
        self._stack.append((self.E, self.r, self.rss))
        d = self.E[j, j]
        if d <= _DEP_TOL * self.diag0[j]:
            return  # dependent given the current set: no RSS change
        col = self.E[:, j]
        rj = self.r[j]
        self.rss = self.rss - rj * rj / d
        self.r = self.r - col * (rj / d)
        self.E = self.E - np.outer(col, col / d)

    def pop(self) -> None:
        self.E, self.r, self.rss = self._stack.pop()


class _SizeHeap:
    """Best-s_k candidates of one size, ordered by (rss, lexicographic subset)."""

    def __init__(self, cap: int):
        self.cap = cap
        self.entries = []  # sorted list of (rss, subset_tuple)

    def offer(self, rss_value: float, subset: tuple) -> None:
        item = (rss_value, subset)
        pos = bisect.bisect_left(self.entries, item)
        if pos < self.cap:
            self.entries.insert(pos, item)
            if len(self.entries) > self.cap:
                self.entries.pop()

    def threshold(self) -> float:
        if len(self.entries) < self.cap:
            return np.inf
        return self.entries[-1][0]


def _orthogonal_basis(F: np.ndarray) -> np.ndarray:
    U, s, _ = np.linalg.svd(F, full_matrices=False)
    keep = s > PINV_RCOND * (s[0] if s.size else 0.0)
    return U[:, keep]


def branch_and_bound(y_star: np.ndarray, X_star: np.ndarray,
                     config: SearchConfig) -> CandidateList:
    """Exactly the s_k minimum-RSS subsets of each size 1..s_max.

    Every returned subset contains ``config.forced_in``; RSS ties are
    broken lexicographically on the sorted index sets, so output is
    deterministic across platforms and schedules.
    """
    y = np.asarray(y_star, dtype=float)
    X = np.asarray(X_star, dtype=float)
    p = X.shape[1]
    forced = config.forced_in
    if any(j < 0 or j >= p for j in forced):
        raise ValueError("forced_in indices out of range")
    s_max = config.resolved_s_max(p)
    n_forced = len(forced)
    free = [j for j in range(p) if j not in forced]

    if forced:
        basis = _orthogonal_basis(X[:, forced])
        yf = y - basis @ (basis.T @ y)
        Xf = X[:, free] - basis @ (basis.T @ X[:, free])
    else:
        yf = y
        Xf = X[:, free]

    G = Xf.T @ Xf
    b = Xf.T @ yf
    yty = float(yf @ yf)
    n_free = len(free)
    s_max_free = min(s_max - n_forced, n_free)

    # Preorder free columns by |correlation| with the (residualized) response;
    # a pure pruning heuristic, provably output-invariant.
    diag = np.diag(G)
    corr = np.abs(b) / np.sqrt(np.maximum(diag, 1e-300))
    order = np.argsort(-corr, kind="stable")
    original = [free[j] for j in order]

    heaps = {k: _SizeHeap(config.s_k) for k in range(s_max_free + 1)}
    state = _SweepState(G[np.ix_(order, order)], b[order], yty)
    counters = {"visited": 0, "pruned": 0}

    def subset_key(chosen: list) -> tuple:
        return tuple(sorted(list(forced) + [original[i] for i in chosen]))

    if n_forced and s_max_free >= 0:
        heaps[0].offer(yty, tuple(forced))

    def descend(chosen: list, start: int) -> None:
        depth = len(chosen)
        remaining = n_free - start
        if depth >= s_max_free or remaining == 0:
            return
        # Lower bounds for each child's subtree: RSS of the child joined with
        # everything after it.  Computed by pushing the suffix in reverse, and
        # only once a prune is possible (every reachable size heap full).
        reach_lo = depth + 1
        reach_hi = min(s_max_free, depth + remaining)
        thresholds = [heaps[k].threshold() for k in range(reach_lo, reach_hi + 1)]
        bound_cap = max(thresholds)
        suffix_bound = None
        if np.isfinite(bound_cap):
            suffix_bound = np.empty(n_free)
            for j in range(n_free - 1, start - 1, -1):
                state.push(j)
                suffix_bound[j] = state.rss
            for j in range(start, n_free):
                state.pop()
        for j in range(start, n_free):
            if suffix_bound is not None:
                hi = min(s_max_free, depth + 1 + (n_free - 1 - j))
                cap = max(heaps[k].threshold() for k in range(depth + 1, hi + 1))
                if suffix_bound[j] > cap:
                    counters["pruned"] += 1
                    continue
            state.push(j)
            chosen.append(j)
            counters["visited"] += 1
            heaps[len(chosen)].offer(state.rss, subset_key(chosen))
            descend(chosen, j + 1)
            chosen.pop()
            state.pop()

    descend([], 0)

    by_size = {}
    for k_free in range(s_max_free + 1):
        k_total = k_free + n_forced
        if k_total < 1 or not heaps[k_free].entries:
            continue
        retained = []
        for rss_value, subset in heaps[k_free].entries:
            cols = list(subset)
            coef, *_ = np.linalg.lstsq(X[:, cols], y, rcond=PINV_RCOND)
            delta = np.zeros(p)
            delta[cols] = coef
            retained.append(SubsetCoefficients(
                subset=subset, delta_hat=delta, expected_loss=float(rss_value)
            ))
        by_size[k_total] = tuple(retained)
    return CandidateList(
        by_size=by_size,
        nodes_visited=counters["visited"],
        nodes_pruned=counters["pruned"],
    )
