"""Feature-selection methods of the search space.

Selection operates on source-feature groups (a group is one source feature
with all of its encoded columns), matching how the final signature is
reported. SES runs the forward/backward conditional-independence search,
LASSO the coordinate-descent L1 path point, and the univariate method a
BH-corrected screen. A per-dataset cache shares LRT results across
hyperparameter settings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .preprocess import FeatureMatrix
from .stats import NullFit, PValue, bh_select, fit_null_logistic, lrt_ci_test_many

log = logging.getLogger(__name__)

__all__ = [
    "Signature",
    "StabilityTable",
    "CITestCache",
    "ses_select",
    "lasso_select",
    "univariate_select",
    "stability_select",
]

COEF_NONZERO_TOL = 1e-10


@dataclass
class Signature:
    """Feature groups chosen by one selector run."""

    selected: list[str]
    method: str
    hyperparameters: dict
    converged: bool = True
    equivalents: list[list[str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("signature contains duplicate feature groups")

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "method": self.method,
            "hyperparameters": dict(self.hyperparameters),
            "converged": self.converged,
        }


class CITestCache:
    """Memoized likelihood-ratio conditional-independence tests on one dataset.

    Keys are (candidate group, frozenset of conditioning groups); SES runs at
    different alpha or kmax on the same training rows share every test.
    """

    def __init__(self, matrix: FeatureMatrix):
        self.matrix = matrix
        self.groups = matrix.group_names()
        self._cols = {g: matrix.group_columns(g) for g in self.groups}
        self._cache: dict[tuple[str, frozenset], PValue] = {}
        self._nulls: dict[frozenset, NullFit] = {}

    def width(self, group: str) -> int:
        return int(self._cols[group].size)

    def _z_columns(self, z_groups: frozenset) -> Optional[np.ndarray]:
        if not z_groups:
            return None
        cols = np.concatenate([self._cols[g] for g in sorted(z_groups)])
        return self.matrix.X[:, cols]

    def pvalues(self, candidates: Sequence[str], z_groups: frozenset) -> dict[str, PValue]:
        missing = [g for g in candidates if (g, z_groups) not in self._cache]
        if missing:
            z = self._z_columns(z_groups)
            null = self._nulls.get(z_groups)
            if null is None:
                null = fit_null_logistic(self.matrix.y, z)
                self._nulls[z_groups] = null
            by_width: dict[int, list[str]] = {}
            for g in missing:
                by_width.setdefault(self.width(g), []).append(g)
            for _, names in sorted(by_width.items()):
                xs = [self.matrix.X[:, self._cols[g]] for g in names]
                results = lrt_ci_test_many(xs, self.matrix.y, z, null=null)
                for g, res in zip(names, results):
                    self._cache[(g, z_groups)] = res
        return {g: self._cache[(g, z_groups)] for g in candidates}

    def pvalue(self, candidate: str, z_groups: frozenset) -> PValue:
        return self.pvalues([candidate], z_groups)[candidate]


def ses_select(
    matrix: FeatureMatrix,
    kmax: int,
    alpha: float,
    cache: Optional[CITestCache] = None,
    equivalence_ratio: float = 0.95,
) -> Signature:
    """Forward/backward selection driven by conditional-independence tests.

    Forward: repeatedly add the candidate with the smallest worst-case
    (max over conditioning subsets of the selected set, sizes <= kmax)
    p-value, dropping candidates whose worst case exceeds alpha for good.
    Backward: remove any selected group rendered conditionally independent
    (p > alpha) by some subset of the others. Returns the single surviving
    signature; near-ties at each forward step are reported as equivalents.
    """
    if not 1 <= kmax <= 5:
        raise ValueError("kmax must be in 1..5")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    cache = cache or CITestCache(matrix)
    groups = list(cache.groups)
    hyper = {"kmax": kmax, "alpha": alpha}

    res = cache.pvalues(groups, frozenset())
    pmax = {g: res[g].value for g in groups}
    alive = [g for g in groups if pmax[g] <= alpha]
    selected: list[str] = []
    equivalents: list[list[str]] = []

    while alive:
        best = min(alive, key=lambda g: (pmax[g], g))
        near = [
            g
            for g in alive
            if g != best and pmax[g] > 0 and pmax[best] / pmax[g] >= equivalence_ratio
        ]
        equivalents.append(sorted(near))
        selected.append(best)
        alive.remove(best)
        if not alive:
            break
        older = [g for g in selected if g != best]
        for size in range(0, kmax):
            for combo in combinations(older, size):
                z = frozenset(combo) | {best}
                res = cache.pvalues(alive, z)
                for g in alive:
                    if res[g].value > pmax[g]:
                        pmax[g] = res[g].value
        alive = [g for g in alive if pmax[g] <= alpha]

    # backward: drop groups made redundant by later additions
    retained = list(selected)
    for g in list(selected):
        others = [h for h in retained if h != g]
        independent = False
        for size in range(0, min(kmax, len(others)) + 1):
            for combo in combinations(others, size):
                if cache.pvalue(g, frozenset(combo)).value > alpha:
                    independent = True
                    break
            if independent:
                break
        if independent:
            retained.remove(g)

    return Signature(selected=retained, method="SES", hyperparameters=hyper,
                     equivalents=equivalents)


# ---------------------------------------------------------------------------
# LASSO logistic regression by cyclic coordinate descent


def _lasso_cd(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    max_outer: int = 100,
    max_inner: int = 1000,
    tol: float = 1e-7,
) -> tuple[np.ndarray, float, bool]:
    """L1-penalized logistic regression on already-standardized columns.

    Quadratic majorization (IRLS working response) with cyclic coordinate
    descent and soft thresholding; the intercept is unpenalized.
    """
    n, p = X.shape
    yf = y.astype(np.float64)
    ybar = yf.mean()
    beta = np.zeros(p)
    b0 = float(np.log(ybar / (1.0 - ybar))) if 0.0 < ybar < 1.0 else 0.0

    converged = False
    for _ in range(max_outer):
        eta = b0 + X @ beta
        mu = expit(eta)
        w = np.clip(mu * (1.0 - mu), 1e-5, None)
        z = eta + (yf - mu) / w
        wsum = w.sum()
        denom = (w[:, None] * X * X).sum(axis=0) / n

        r = z - eta  # residual of the working response
        inner_done = False
        for _sweep in range(max_inner):
            delta = 0.0
            for j in range(p):
                bj = beta[j]
                num = float(w @ (X[:, j] * r)) / n + denom[j] * bj
                new = float(np.sign(num) * max(abs(num) - lam, 0.0)) / denom[j] if denom[j] > 0 else 0.0
                if new != bj:
                    r -= X[:, j] * (new - bj)
                    beta[j] = new
                    delta = max(delta, abs(new - bj))
            shift = float(w @ r) / wsum
            if shift != 0.0:
                b0 += shift
                r -= shift
                delta = max(delta, abs(shift))
            if delta < tol:
                inner_done = True
                break
        new_eta = b0 + X @ beta
        if inner_done and float(np.max(np.abs(new_eta - eta))) < tol * 10:
            converged = True
            break
    return beta, b0, converged


def lasso_select(matrix: FeatureMatrix, penalty: float) -> Signature:
    """Groups with any nonzero coefficient under an L1 logistic fit.

    The unitless penalty in [0, 2] maps to penalty * lambda_max / 2, where
    lambda_max is the smallest strength zeroing every coefficient, so 2.0
    forces the empty model and 0 is unpenalized.
    """
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    X = matrix.X
    y = matrix.y.astype(np.float64)
    n = X.shape[0]
    means = X.mean(axis=0)
    scales = X.std(axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    Xs = (X - means) / scales

    lam_max = float(np.max(np.abs(Xs.T @ (y - y.mean()))) / n) if X.shape[1] else 0.0
    lam = penalty * lam_max / 2.0
    beta, _, converged = _lasso_cd(Xs, matrix.y, lam)
    if not converged:
        log.warning("lasso_select(penalty=%g) hit the iteration budget; flagged", penalty)

    selected = [
        g for g in matrix.group_names()
        if np.any(np.abs(beta[matrix.group_columns(g)]) > COEF_NONZERO_TOL)
    ]
    return Signature(selected=selected, method="Lasso",
                     hyperparameters={"penalty": penalty}, converged=converged)


def univariate_select(
    matrix: FeatureMatrix,
    alpha: float,
    cache: Optional[CITestCache] = None,
) -> Signature:
    """Per-group unconditional LRT screen with BH correction at level alpha."""
    cache = cache or CITestCache(matrix)
    groups = list(cache.groups)
    if not groups:
        return Signature(selected=[], method="Univariate", hyperparameters={"alpha": alpha})
    res = cache.pvalues(groups, frozenset())
    pvals = np.array([res[g].value for g in groups])
    rejected = bh_select(pvals, alpha)
    chosen = [groups[i] for i in rejected]
    chosen.sort(key=lambda g: (res[g].value, g))
    return Signature(selected=chosen, method="Univariate", hyperparameters={"alpha": alpha})


# ---------------------------------------------------------------------------
# Cross-subset stability


@dataclass
class StabilityTable:
    """Per-feature selection counts over the subset runs."""

    counts: dict[str, int]
    n_runs: int
    threshold: float
    runs: list[list[str]]

    def stable_features(self) -> list[str]:
        keep = [f for f, c in self.counts.items() if c / self.n_runs >= self.threshold]
        keep.sort(key=lambda f: (-self.counts[f], f))
        return keep

    def to_dict(self) -> dict:
        return {
            "counts": dict(sorted(self.counts.items())),
            "n_runs": self.n_runs,
            "threshold": self.threshold,
            "runs": [list(r) for r in self.runs],
        }

    def matrix_lines(self) -> list[str]:
        """feature x run presence grid for terminal display."""
        header = "feature".ljust(36) + " ".join(f"run{i+1}" for i in range(self.n_runs)) + "  count"
        lines = [header]
        run_sets = [set(r) for r in self.runs]
        for f in sorted(self.counts, key=lambda f: (-self.counts[f], f)):
            marks = " ".join(("  x " if f in rs else "  . ") for rs in run_sets)
            lines.append(f.ljust(36) + marks + f"  {self.counts[f]}/{self.n_runs}")
        return lines


def stability_select(
    signatures: Sequence[Signature],
    threshold: float,
) -> tuple[list[str], StabilityTable]:
    """Features selected in at least threshold of the runs.

    threshold 0.75 over four runs keeps features present in at least three.
    """
    if len(signatures) < 2:
        raise ValueError("stability aggregation needs at least 2 runs")
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    counts: dict[str, int] = {}
    for sig in signatures:
        for f in sig.selected:
            counts[f] = counts.get(f, 0) + 1
    table = StabilityTable(
        counts=counts,
        n_runs=len(signatures),
        threshold=threshold,
        runs=[list(s.selected) for s in signatures],
    )
    return table.stable_features(), table
