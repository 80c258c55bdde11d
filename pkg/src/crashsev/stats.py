"""Statistical kernels shared by feature selection and tuning.

AUC-ROC with midrank tie correction, the nested-logistic likelihood-ratio
conditional-independence test (single and batched over candidate columns),
Benjamini-Hochberg step-up selection, stratified fold assignment, and the
bootstrap bias correction of the winning configuration's score.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import chi2

__all__ = [
    "PValue",
    "RocCurve",
    "PerformanceEstimate",
    "NullFit",
    "SingleClassError",
    "auc_roc",
    "roc_curve",
    "fit_null_logistic",
    "lrt_ci_test",
    "lrt_ci_test_many",
    "bh_select",
    "stratified_folds",
    "bbc_correct",
]

log = logging.getLogger(__name__)

LOGISTIC_MAX_ITER = 100
LOGISTIC_GRAD_TOL = 1e-8
LOGISTIC_DEV_TOL = 1e-10


class SingleClassError(ValueError):
    """A metric that needs both classes saw only one."""


@dataclass(frozen=True)
class PValue:
    """Result of one likelihood-ratio conditional-independence test."""

    value: float
    statistic: float
    dof: int
    converged: bool = True


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass(frozen=True)
class PerformanceEstimate:
    """BBC-corrected point estimate with a percentile confidence interval."""

    point: float
    ci_low: float
    ci_high: float
    ci_level: float
    n_boot: int
    n_skipped: int = 0
    naive_point: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "ci_level": self.ci_level,
            "n_boot": self.n_boot,
            "n_skipped": self.n_skipped,
            "naive_point": self.naive_point,
        }


# ---------------------------------------------------------------------------
# AUC-ROC


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by the group midrank (exact halves)."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = x.size
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def _split_labels(labels) -> tuple[np.ndarray, int, int]:
    y = np.asarray(labels)
    pos = y == 1
    npos = int(np.count_nonzero(pos))
    nneg = int(y.size - npos)
    if npos == 0 or nneg == 0:
        raise SingleClassError("undefined AUC: labels contain a single class")
    return pos, npos, nneg


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 * P(score+ = score-).

    Computed from midranks in O(n log n); exact halves keep the result
    bit-identical to O(n^2) pair counting.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos, npos, nneg = _split_labels(labels)
    if s.size != pos.size:
        raise ValueError("scores and labels differ in length")
    rpos = float(np.sum(_midranks(s)[pos]))
    return (rpos - npos * (npos + 1) / 2.0) / (npos * nneg)


def roc_curve(scores, labels) -> RocCurve:
    """ROC points from a descending threshold sweep, tie groups collapsed."""
    s = np.asarray(scores, dtype=np.float64)
    pos, npos, nneg = _split_labels(labels)
    order = np.argsort(-s, kind="mergesort")
    y = pos[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[s[order][1:] != s[order][:-1], True]
    tpr = np.r_[0.0, tp[last] / npos]
    fpr = np.r_[0.0, fp[last] / nneg]
    return RocCurve(fpr=fpr, tpr=tpr, auc=auc_roc(s, labels))


# ---------------------------------------------------------------------------
# Logistic likelihood-ratio test


def _nll_many(A: np.ndarray, beta: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted negative log-likelihood per candidate; stable for large |eta|."""
    eta = np.einsum("cnm,cm->cn", A, beta)
    return np.einsum("cn,n->c", np.logaddexp(0.0, eta) - y * eta, w)


def _newton_logistic_many(
    A: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    l2: np.ndarray | None = None,
    beta0: np.ndarray | None = None,
    max_iter: int = LOGISTIC_MAX_ITER,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fit C logistic models sharing (y, w): A is (C, n, m).

    Returns (beta (C, m), loglik (C,), converged (C,) bool). Convergence is
    gradient norm < 1e-8 or objective change < 1e-10 relative; iteration
    exhaustion or numerical breakdown leaves converged False.
    """
    C, n, m = A.shape
    yf = np.asarray(y, dtype=np.float64)
    beta = np.zeros((C, m)) if beta0 is None else np.array(beta0, dtype=np.float64)
    pen = np.zeros(m) if l2 is None else np.asarray(l2, dtype=np.float64)

    def objective(b: np.ndarray) -> np.ndarray:
        return _nll_many(A, b, yf, w) + 0.5 * (pen * b * b).sum(axis=1)

    obj = objective(beta)
    done = np.zeros(C, dtype=bool)
    failed = np.zeros(C, dtype=bool)
    eye = np.eye(m)

    for _ in range(max_iter):
        eta = np.einsum("cnm,cm->cn", A, beta)
        mu = expit(eta)
        grad = np.einsum("cnm,cn->cm", A, w * (yf - mu)) - pen * beta
        gnorm = np.abs(grad).max(axis=1)
        done |= gnorm < LOGISTIC_GRAD_TOL
        if bool(np.all(done | failed)):
            break
        wgt = w * mu * (1.0 - mu)
        hess = np.einsum("cnm,cn,cnl->cml", A, wgt, A) + pen * eye + 1e-12 * eye
        try:
            step = np.linalg.solve(hess, grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            failed |= ~done
            break
        active = ~(done | failed)
        new_beta = np.where(active[:, None], beta + step, beta)
        new_obj = objective(new_beta)
        bad = ~np.isfinite(new_obj)
        # step halving where the Newton step overshoots
        t = np.ones(C)
        worse = active & ((new_obj > obj + 1e-12) | bad)
        for _half in range(30):
            if not worse.any():
                break
            t = np.where(worse, t * 0.5, t)
            new_beta = np.where(
                active[:, None], beta + t[:, None] * step, beta
            )
            new_obj = objective(new_beta)
            worse = active & ((new_obj > obj + 1e-12) | ~np.isfinite(new_obj))
        failed |= worse
        delta = np.abs(obj - new_obj)
        beta = np.where((active & ~worse)[:, None], new_beta, beta)
        obj = np.where(active & ~worse, new_obj, obj)
        done |= (~failed) & (delta < LOGISTIC_DEV_TOL * (1.0 + np.abs(obj)))

    loglik = -_nll_many(A, beta, yf, w)
    return beta, loglik, done & ~failed


def _as_columns(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


@dataclass(frozen=True)
class NullFit:
    """Fitted intercept + Z logistic model, reusable across many LRT calls."""

    beta: np.ndarray
    loglik: float
    converged: bool


def fit_null_logistic(y, z=None, *, sample_weight=None, max_iter: int = LOGISTIC_MAX_ITER) -> NullFit:
    """Fit the reduced model y ~ Z once, for reuse as the LRT null."""
    yf = np.asarray(y, dtype=np.float64)
    n = yf.size
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    zc = np.empty((n, 0)) if z is None else _as_columns(z)
    base = np.column_stack([np.ones(n), zc])
    beta, ll, conv = _newton_logistic_many(base[None, :, :], yf, w, max_iter=max_iter)
    return NullFit(beta=beta[0], loglik=float(ll[0]), converged=bool(conv[0]))


def lrt_ci_test_many(
    xs,
    y,
    z=None,
    *,
    sample_weight=None,
    null: NullFit | None = None,
    max_iter: int = LOGISTIC_MAX_ITER,
) -> list[PValue]:
    """Likelihood-ratio tests of y ~ Z vs y ~ Z + x for each candidate x.

    All candidates must add the same number of columns (they are fitted as one
    batched Newton solve, warm-started from the null fit). Non-convergence is
    conservative: p = 1.0, flagged.
    """
    cols = [_as_columns(x) for x in xs]
    if not cols:
        return []
    width = cols[0].shape[1]
    if any(c.shape[1] != width for c in cols):
        raise ValueError("all candidates in one batch must have equal width")
    yf = np.asarray(y, dtype=np.float64)
    n = yf.size
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    zc = np.empty((n, 0)) if z is None else _as_columns(z)

    base = np.column_stack([np.ones(n), zc])
    kz = base.shape[1]
    if null is None:
        null = fit_null_logistic(y, zc, sample_weight=sample_weight, max_iter=max_iter)

    C = len(cols)
    A = np.empty((C, n, kz + width))
    A[:, :, :kz] = base
    for i, c in enumerate(cols):
        A[i, :, kz:] = c
    beta0 = np.zeros((C, kz + width))
    beta0[:, :kz] = null.beta
    _, ll_alt, conv_alt = _newton_logistic_many(A, yf, w, beta0=beta0, max_iter=max_iter)

    out = []
    for i in range(C):
        stat = max(2.0 * (float(ll_alt[i]) - null.loglik), 0.0)
        ok = null.converged and bool(conv_alt[i])
        if ok:
            p = float(chi2.sf(stat, width))
        else:
            p = 1.0
        out.append(PValue(value=p, statistic=stat, dof=width, converged=ok))
    return out


def lrt_ci_test(x, y, z=None, *, sample_weight=None, max_iter: int = LOGISTIC_MAX_ITER) -> PValue:
    """p-value of the nested-logistic LRT for x against y given columns Z."""
    return lrt_ci_test_many([x], y, z, sample_weight=sample_weight, max_iter=max_iter)[0]


# ---------------------------------------------------------------------------
# Benjamini-Hochberg


def bh_select(pvalues, alpha: float) -> np.ndarray:
    """Indices rejected by the BH step-up rule at level alpha (sorted)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    if m == 0:
        return np.array([], dtype=np.intp)
    order = np.argsort(p, kind="mergesort")
    passed = np.flatnonzero(p[order] <= alpha * np.arange(1, m + 1) / m)
    if passed.size == 0:
        return np.array([], dtype=np.intp)
    k = int(passed[-1])
    return np.sort(order[: k + 1])


# ---------------------------------------------------------------------------
# Stratified folds


def stratified_folds(labels, k: int, seed) -> np.ndarray:
    """Fold index in [0, k) per sample; per-class counts differ by at most 1."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    y = np.asarray(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    assign = np.empty(y.size, dtype=np.intp)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if idx.size < k:
            raise ValueError(f"class {cls!r} has {idx.size} members, fewer than k={k}")
        perm = rng.permutation(idx)
        offset = int(rng.integers(k))
        assign[perm] = (np.arange(idx.size) + offset) % k
    return assign


# ---------------------------------------------------------------------------
# Bootstrap bias correction


def _sorted_tie_groups(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(ascending order permutation, tie-group start offsets in sorted order)."""
    perm = np.argsort(scores, kind="mergesort")
    s = scores[perm]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    return perm, starts


def _inbag_auc_matrix(scores: np.ndarray, y: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Weighted AUC of every configuration under every bootstrap replicate.

    scores is (C, n), counts is (B, n) bootstrap multiplicities; returns (B, C).
    """
    B = counts.shape[0]
    C = scores.shape[0]
    yf = y.astype(np.float64)
    out = np.empty((B, C))
    for c in range(C):
        perm, starts = _sorted_tie_groups(scores[c])
        ys = yf[perm]
        wc = counts[:, perm]
        pos = wc * ys
        neg = wc - pos
        pg = np.add.reduceat(pos, starts, axis=1)
        ng = np.add.reduceat(neg, starts, axis=1)
        cum_before = np.cumsum(ng, axis=1) - ng
        numer = np.sum(pg * (cum_before + 0.5 * ng), axis=1)
        wpos = pos.sum(axis=1)
        wneg = neg.sum(axis=1)
        out[:, c] = numer / (wpos * wneg)
    return out


def _draw_counts(rng: np.random.Generator, y: np.ndarray, n: int, max_redraws: int) -> np.ndarray | None:
    """One bootstrap replicate's multiplicity vector, redrawn until both the
    in-bag multiset and the out-of-bag remainder contain both classes."""
    for _ in range(max_redraws + 1):
        counts = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
        inbag = counts > 0
        oob = ~inbag
        if not oob.any():
            continue
        if y[inbag].min() == y[inbag].max():
            continue
        if y[oob].min() == y[oob].max():
            continue
        return counts
    return None


def bbc_correct(
    oof_scores,
    labels,
    n_boot: int = 500,
    ci_level: float = 0.95,
    seed=0,
    max_redraws: int = 100,
) -> PerformanceEstimate:
    """Bootstrap bias correction of the winning configuration's pooled AUC.

    Per replicate: resample sample indices with replacement, pick the
    configuration with the best weighted AUC on the in-bag multiset, and score
    it on the out-of-bag samples. The corrected point estimate is the mean of
    the out-of-bag AUCs; the CI is the percentile interval at ci_level.
    """
    S = np.asarray(oof_scores, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("oof_scores must be (configs, samples)")
    if not np.isfinite(S).all():
        raise ValueError("every configuration needs a score for every sample")
    if n_boot < 100:
        raise ValueError("n_boot must be at least 100")
    C, n = S.shape
    y = np.asarray(labels)
    _split_labels(y)  # both classes required

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = np.empty((n_boot, n))
    keep = np.ones(n_boot, dtype=bool)
    for b in range(n_boot):
        drawn = _draw_counts(rng, y, n, max_redraws)
        if drawn is None:
            keep[b] = False
            counts[b] = 0.0
            log.warning("bbc_correct: replicate %d skipped after %d redraws", b, max_redraws)
        else:
            counts[b] = drawn
    counts = counts[keep]

    inbag = _inbag_auc_matrix(S, y, counts)
    winners = np.argmax(inbag, axis=1)  # ties go to the lowest config index
    oob_auc = np.empty(counts.shape[0])
    for b in range(counts.shape[0]):
        oob = counts[b] == 0
        oob_auc[b] = auc_roc(S[winners[b]][oob], y[oob])

    lo = (1.0 - ci_level) / 2.0
    naive = max(auc_roc(S[c], y) for c in range(C))
    return PerformanceEstimate(
        point=float(np.mean(oob_auc)),
        ci_low=float(np.quantile(oob_auc, lo)),
        ci_high=float(np.quantile(oob_auc, 1.0 - lo)),
        ci_level=ci_level,
        n_boot=int(counts.shape[0]),
        n_skipped=int(n_boot - counts.shape[0]),
        naive_point=float(naive),
    )
