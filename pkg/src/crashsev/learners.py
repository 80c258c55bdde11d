"""The three learners of the configuration search space, plus the naive
baseline: ridge-penalized logistic regression, a chi-square-pruned decision
tree, and a bootstrap random forest. All accept per-class cost weights to
face the severe class imbalance.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import chi2

from .rng import substream

log = logging.getLogger(__name__)

__all__ = [
    "LinearModel",
    "TreeModel",
    "TreeNode",
    "ForestModel",
    "NaiveModel",
    "fit_ridge_logistic",
    "fit_decision_tree",
    "fit_random_forest",
    "naive_baseline",
    "predict_scores",
    "class_weight_vector",
    "save_model",
    "load_model",
]

MODEL_FORMAT_VERSION = 1


def class_weight_vector(y: np.ndarray, class_weights: Optional[tuple[float, float]]) -> np.ndarray:
    """Per-sample weights; None means inverse class frequency (balanced)."""
    y = np.asarray(y)
    if class_weights is None:
        n = y.size
        npos = int(np.count_nonzero(y == 1))
        nneg = n - npos
        if npos == 0 or nneg == 0:
            return np.ones(n)
        class_weights = (n / (2.0 * nneg), n / (2.0 * npos))
    w_neg, w_pos = class_weights
    return np.where(y == 1, float(w_pos), float(w_neg))


# ---------------------------------------------------------------------------
# Ridge logistic regression


@dataclass
class LinearModel:
    column_names: list[str]
    weights: np.ndarray
    intercept: float
    means: np.ndarray
    scales: np.ndarray
    lam: float
    class_weights: Optional[tuple[float, float]]
    converged: bool = True
    objective_trace: list[float] = field(default_factory=list)

    def standardized(self, X: np.ndarray) -> np.ndarray:
        return (X - self.means) / self.scales

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + self.standardized(X) @ self.weights


def fit_ridge_logistic(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    class_weights: Optional[tuple[float, float]] = None,
    column_names: Optional[Sequence[str]] = None,
    max_iter: int = 200,
    grad_tol: float = 1e-8,
) -> LinearModel:
    """Weighted ridge logistic fit by IRLS with step halving.

    Minimizes mean weighted negative log-likelihood + (lam/2)||w||^2 on
    standardized columns; the intercept is unpenalized. The weighted mean
    keeps the objective invariant under sample duplication, so doubling a
    class's weight equals duplicating its samples.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    n, p = X.shape
    w = class_weight_vector(y, class_weights)
    w = w / w.sum()

    # weight-aware standardization keeps class weighting exactly equivalent
    # to sample duplication
    means = w @ X
    scales = np.sqrt(w @ (X - means) ** 2)
    scales = np.where(scales > 0, scales, 1.0)
    Xs = (X - means) / scales
    A = np.column_stack([np.ones(n), Xs])
    pen = np.r_[0.0, np.full(p, lam)]
    yf = y.astype(np.float64)

    def objective(beta: np.ndarray) -> float:
        eta = A @ beta
        nll = float(np.dot(w, np.logaddexp(0.0, eta) - yf * eta))
        return nll + 0.5 * float(pen @ (beta * beta))

    beta = np.zeros(p + 1)
    trace = [objective(beta)]
    converged = False
    for _ in range(max_iter):
        eta = A @ beta
        mu = expit(eta)
        grad = A.T @ (w * (yf - mu)) - pen * beta
        if np.abs(grad).max() < grad_tol:
            converged = True
            break
        wgt = w * mu * (1.0 - mu)
        hess = (A * wgt[:, None]).T @ A + np.diag(pen) + 1e-12 * np.eye(p + 1)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        new_obj = objective(beta + t * step)
        for _half in range(30):
            if math.isfinite(new_obj) and new_obj <= trace[-1] + 1e-12:
                break
            t *= 0.5
            new_obj = objective(beta + t * step)
        else:
            break
        beta = beta + t * step
        if abs(trace[-1] - new_obj) < 1e-12 * (1.0 + abs(new_obj)):
            trace.append(new_obj)
            converged = True
            break
        trace.append(new_obj)

    if not converged:
        log.warning("ridge logistic did not converge (lam=%g): flagged", lam)
    names = list(column_names) if column_names is not None else [f"x{i}" for i in range(p)]
    return LinearModel(
        column_names=names,
        weights=beta[1:],
        intercept=float(beta[0]),
        means=means,
        scales=scales,
        lam=float(lam),
        class_weights=class_weights,
        converged=converged,
        objective_trace=trace,
    )


# ---------------------------------------------------------------------------
# Decision tree


@dataclass
class TreeNode:
    prob: float
    n_samples: int
    column: Optional[int] = None
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.column is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"prob": self.prob, "n": self.n_samples}
        return {
            "prob": self.prob,
            "n": self.n_samples,
            "column": self.column,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TreeNode":
        node = cls(prob=raw["prob"], n_samples=raw["n"])
        if "column" in raw:
            node.column = raw["column"]
            node.threshold = raw["threshold"]
            node.left = cls.from_dict(raw["left"])
            node.right = cls.from_dict(raw["right"])
        return node


@dataclass
class TreeModel:
    root: TreeNode
    min_leaf: int
    alpha_prune: Optional[float]
    class_weights: Optional[tuple[float, float]]
    column_names: list[str]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(X.shape[0])
        for i in range(X.shape[0]):
            node = self.root
            while not node.is_leaf:
                node = node.left if X[i, node.column] <= node.threshold else node.right
            out[i] = node.prob
        return out

    def leaves(self) -> list[TreeNode]:
        found: list[TreeNode] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                found.append(node)
            else:
                stack.extend([node.left, node.right])
        return found


def _chi2_split_pvalue(y_left: np.ndarray, y_right: np.ndarray) -> float:
    """Pearson chi-square p-value of the 2x2 (side x class) count table."""
    a = float(np.count_nonzero(y_left == 1))
    b = float(y_left.size - a)
    c = float(np.count_nonzero(y_right == 1))
    d = float(y_right.size - c)
    n = a + b + c + d
    margins = (a + b) * (c + d) * (a + c) * (b + d)
    if margins == 0:
        return 1.0
    stat = n * (a * d - b * c) ** 2 / margins
    return float(chi2.sf(stat, 1))


def _best_split(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    idx: np.ndarray,
    min_leaf: int,
    feature_pool: np.ndarray,
) -> Optional[tuple[int, float, float]]:
    """(column, threshold, gini decrease) of the best weighted-Gini split."""
    yy = y[idx].astype(np.float64)
    ww = w[idx]
    total_w = ww.sum()
    total_pos = float(np.dot(ww, yy))
    p_parent = total_pos / total_w
    g_parent = 2.0 * p_parent * (1.0 - p_parent)

    best: Optional[tuple[int, float, float]] = None
    for j in feature_pool:
        vals = X[idx, j]
        order = np.argsort(vals, kind="mergesort")
        v = vals[order]
        wp = (ww * yy)[order]
        wa = ww[order]
        cum_pos = np.cumsum(wp)
        cum_w = np.cumsum(wa)
        m = idx.size
        # candidate boundaries: after position i (1-based count), value changes
        cut = np.flatnonzero(v[:-1] != v[1:]) + 1
        cut = cut[(cut >= min_leaf) & (m - cut >= min_leaf)]
        if cut.size == 0:
            continue
        left_w = cum_w[cut - 1]
        left_pos = cum_pos[cut - 1]
        right_w = total_w - left_w
        right_pos = total_pos - left_pos
        pl = left_pos / left_w
        pr = right_pos / right_w
        g_children = (left_w * 2 * pl * (1 - pl) + right_w * 2 * pr * (1 - pr)) / total_w
        dec = g_parent - g_children
        k = int(np.argmax(dec))
        if dec[k] <= 1e-12:
            continue
        threshold = (v[cut[k] - 1] + v[cut[k]]) / 2.0
        cand = (int(j), float(threshold), float(dec[k]))
        if best is None or cand[2] > best[2] + 1e-15 or (
            abs(cand[2] - best[2]) <= 1e-15 and (cand[0], cand[1]) < (best[0], best[1])
        ):
            best = cand
    return best


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    min_leaf: int,
    alpha_prune: Optional[float],
    feature_sampler: Optional[Callable[[], np.ndarray]] = None,
) -> TreeNode:
    n_features = X.shape[1]
    all_features = np.arange(n_features)

    def make_node(idx: np.ndarray) -> TreeNode:
        ww = w[idx]
        prob = float(np.dot(ww, y[idx].astype(np.float64)) / ww.sum())
        return TreeNode(prob=prob, n_samples=int(idx.size))

    root = make_node(np.arange(X.shape[0], dtype=np.intp))
    stack: list[tuple[TreeNode, np.ndarray]] = [(root, np.arange(X.shape[0], dtype=np.intp))]
    while stack:
        node, idx = stack.pop()
        yy = y[idx]
        if idx.size < 2 * min_leaf or yy.min() == yy.max():
            continue
        pool = feature_sampler() if feature_sampler is not None else all_features
        found = _best_split(X, y, w, idx, min_leaf, pool)
        if found is None:
            continue
        j, threshold, _ = found
        left_mask = X[idx, j] <= threshold
        left_idx = idx[left_mask]
        right_idx = idx[~left_mask]
        if alpha_prune is not None:
            if _chi2_split_pvalue(y[left_idx], y[right_idx]) > alpha_prune:
                continue
        node.column = j
        node.threshold = threshold
        node.left = make_node(left_idx)
        node.right = make_node(right_idx)
        stack.append((node.left, left_idx))
        stack.append((node.right, right_idx))
    return root


def fit_decision_tree(
    X: np.ndarray,
    y: np.ndarray,
    min_leaf: int,
    alpha_prune: float,
    class_weights: Optional[tuple[float, float]] = None,
    column_names: Optional[Sequence[str]] = None,
) -> TreeModel:
    """Greedy binary splits by weighted Gini decrease.

    A split is kept only when the chi-square independence test of its 2x2
    side-by-class table reaches p <= alpha_prune; leaves emit the weighted
    positive-class frequency.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if min_leaf < 1:
        raise ValueError("min_leaf must be at least 1")
    w = class_weight_vector(y, class_weights)
    root = _grow_tree(X, y, w, min_leaf, alpha_prune)
    names = list(column_names) if column_names is not None else [f"x{i}" for i in range(X.shape[1])]
    return TreeModel(root=root, min_leaf=min_leaf, alpha_prune=alpha_prune,
                     class_weights=class_weights, column_names=names)


# ---------------------------------------------------------------------------
# Random forest


@dataclass
class ForestModel:
    trees: list[TreeModel]
    n_trees: int
    min_leaf: int
    seed: int
    mtry: int
    class_weights: Optional[tuple[float, float]]
    column_names: list[str]

    def predict(self, X: np.ndarray) -> np.ndarray:
        preds = np.zeros(np.asarray(X).shape[0])
        for tree in self.trees:
            preds += tree.predict(X)
        return preds / len(self.trees)


def fit_random_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_trees: int,
    min_leaf: int,
    seed: int,
    class_weights: Optional[tuple[float, float]] = None,
    column_names: Optional[Sequence[str]] = None,
) -> ForestModel:
    """Bootstrap ensemble of Gini trees, ceil(sqrt(p)) columns per split.

    Tree t draws its bootstrap and split-time feature subsets from a
    substream of (seed, t), so the forest is reproducible bit-for-bit and
    trees could be grown in parallel without changing the result.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if n_trees < 1:
        raise ValueError("n_trees must be at least 1")
    n, p = X.shape
    mtry = max(1, math.isqrt(p) + (0 if math.isqrt(p) ** 2 == p else 1))
    w = class_weight_vector(y, class_weights)
    names = list(column_names) if column_names is not None else [f"x{i}" for i in range(p)]

    trees: list[TreeModel] = []
    for t in range(n_trees):
        rng = substream(seed, "forest-tree", t)
        boot = rng.integers(0, n, size=n)
        Xb, yb, wb = X[boot], y[boot], w[boot]
        if yb.min() == yb.max():
            # degenerate bootstrap: single-class resample becomes one leaf
            root = TreeNode(prob=float(yb[0]), n_samples=n)
        else:
            sampler = lambda: np.sort(rng.choice(p, size=mtry, replace=False))  # noqa: E731
            root = _grow_tree(Xb, yb, wb, min_leaf, None, feature_sampler=sampler)
        trees.append(
            TreeModel(root=root, min_leaf=min_leaf, alpha_prune=None,
                      class_weights=class_weights, column_names=names)
        )
    return ForestModel(
        trees=trees,
        n_trees=n_trees,
        min_leaf=min_leaf,
        seed=int(seed),
        mtry=mtry,
        class_weights=class_weights,
        column_names=names,
    )


# ---------------------------------------------------------------------------
# Naive baseline


@dataclass
class NaiveModel:
    prevalence: float
    column_names: list[str] = field(default_factory=list)


def naive_baseline(y: np.ndarray) -> NaiveModel:
    """Constant-score model emitting the training positive-class prevalence."""
    y = np.asarray(y)
    return NaiveModel(prevalence=float(np.mean(y == 1)))


# ---------------------------------------------------------------------------
# Scoring


def _check_columns(model_names: list[str], names: Optional[Sequence[str]]) -> None:
    if names is None:
        return
    names = list(names)
    if len(names) != len(model_names):
        raise ValueError(
            f"column count mismatch: model has {len(model_names)}, matrix has {len(names)}"
        )
    for a, b in zip(model_names, names):
        if a != b:
            raise ValueError(f"column mismatch: model expects {a!r}, matrix has {b!r}")


def predict_scores(model, X: np.ndarray, column_names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Ranking scores: log-odds for linear models, positive-class probability
    for trees and forests, constant prevalence for the baseline."""
    X = np.asarray(X, dtype=np.float64)
    if isinstance(model, LinearModel):
        _check_columns(model.column_names, column_names)
        return model.decision_function(X)
    if isinstance(model, (TreeModel, ForestModel)):
        _check_columns(model.column_names, column_names)
        return model.predict(X)
    if isinstance(model, NaiveModel):
        return np.full(X.shape[0], model.prevalence)
    raise TypeError(f"unknown model type {type(model).__name__}")


# ---------------------------------------------------------------------------
# Serialization (versioned structured text)


def save_model(model, path) -> None:
    if isinstance(model, LinearModel):
        payload = {
            "kind": "linear",
            "column_names": model.column_names,
            "weights": model.weights.tolist(),
            "intercept": model.intercept,
            "means": model.means.tolist(),
            "scales": model.scales.tolist(),
            "lambda": model.lam,
            "class_weights": list(model.class_weights) if model.class_weights else None,
            "converged": model.converged,
        }
    elif isinstance(model, TreeModel):
        payload = {
            "kind": "tree",
            "column_names": model.column_names,
            "root": model.root.to_dict(),
            "min_leaf": model.min_leaf,
            "alpha_prune": model.alpha_prune,
            "class_weights": list(model.class_weights) if model.class_weights else None,
        }
    elif isinstance(model, ForestModel):
        payload = {
            "kind": "forest",
            "column_names": model.column_names,
            "trees": [t.root.to_dict() for t in model.trees],
            "n_trees": model.n_trees,
            "min_leaf": model.min_leaf,
            "seed": model.seed,
            "mtry": model.mtry,
            "class_weights": list(model.class_weights) if model.class_weights else None,
        }
    elif isinstance(model, NaiveModel):
        payload = {"kind": "naive", "prevalence": model.prevalence}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    payload["version"] = MODEL_FORMAT_VERSION
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if raw.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model version {raw.get('version')!r}")
    kind = raw["kind"]
    cw = tuple(raw["class_weights"]) if raw.get("class_weights") else None
    if kind == "linear":
        return LinearModel(
            column_names=raw["column_names"],
            weights=np.array(raw["weights"], dtype=np.float64),
            intercept=float(raw["intercept"]),
            means=np.array(raw["means"], dtype=np.float64),
            scales=np.array(raw["scales"], dtype=np.float64),
            lam=float(raw["lambda"]),
            class_weights=cw,
            converged=bool(raw["converged"]),
        )
    if kind == "tree":
        return TreeModel(
            root=TreeNode.from_dict(raw["root"]),
            min_leaf=int(raw["min_leaf"]),
            alpha_prune=raw["alpha_prune"],
            class_weights=cw,
            column_names=raw["column_names"],
        )
    if kind == "forest":
        trees = [
            TreeModel(root=TreeNode.from_dict(t), min_leaf=int(raw["min_leaf"]),
                      alpha_prune=None, class_weights=cw, column_names=raw["column_names"])
            for t in raw["trees"]
        ]
        return ForestModel(
            trees=trees,
            n_trees=int(raw["n_trees"]),
            min_leaf=int(raw["min_leaf"]),
            seed=int(raw["seed"]),
            mtry=int(raw["mtry"]),
            class_weights=cw,
            column_names=raw["column_names"],
        )
    if kind == "naive":
        return NaiveModel(prevalence=float(raw["prevalence"]))
    raise ValueError(f"unknown model kind {kind!r}")
