"""Configuration search: enumerate the selector x learner grid and evaluate
it under repeated, incomplete, stratified K-fold cross-validation with early
dropping of weak configurations and early stopping of the fold loop, then
pick the winner and bias-correct its estimate.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import learners as L
from .preprocess import FeatureMatrix
from .rng import spawn_seed, substream
from .selection import CITestCache, Signature, lasso_select, ses_select, univariate_select
from .stats import PerformanceEstimate, auc_roc, bbc_correct, stratified_folds

log = logging.getLogger(__name__)

__all__ = [
    "SesSelector",
    "LassoSelector",
    "UnivariateSelector",
    "EpilogiSelector",
    "NoSelector",
    "RidgeLearner",
    "TreeLearner",
    "ForestLearner",
    "NaiveLearner",
    "ModelConfig",
    "SearchGrid",
    "SearchSpace",
    "CVPlan",
    "CVResult",
    "enumerate_search_space",
    "run_rnk_cv",
    "select_winner",
]


# ---------------------------------------------------------------------------
# Selector and learner specifications


class SelectionContext:
    """Per-training-set caches shared by every selector in one fold."""

    def __init__(self, train: FeatureMatrix):
        self.train = train
        self.ci_cache = CITestCache(train)


@dataclass(frozen=True)
class SesSelector:
    kmax: int
    alpha: float

    def label(self) -> str:
        return f"SES(kmax={self.kmax},alpha={self.alpha:g})"

    def select(self, ctx: SelectionContext) -> Signature:
        return ses_select(ctx.train, self.kmax, self.alpha, cache=ctx.ci_cache)


@dataclass(frozen=True)
class LassoSelector:
    penalty: float

    def label(self) -> str:
        return f"Lasso(penalty={self.penalty:g})"

    def select(self, ctx: SelectionContext) -> Signature:
        return lasso_select(ctx.train, self.penalty)


@dataclass(frozen=True)
class UnivariateSelector:
    alpha: float

    def label(self) -> str:
        return f"Univariate(alpha={self.alpha:g})"

    def select(self, ctx: SelectionContext) -> Signature:
        return univariate_select(ctx.train, self.alpha, cache=ctx.ci_cache)


@dataclass(frozen=True)
class EpilogiSelector:
    """Named in the search space but defined externally; never runnable."""

    threshold: float

    def label(self) -> str:
        return f"Epilogi(threshold={self.threshold:g})"

    def select(self, ctx: SelectionContext) -> Signature:
        raise NotImplementedError("Epilogi is an unsupported selector")


@dataclass(frozen=True)
class NoSelector:
    def label(self) -> str:
        return "None"

    def select(self, ctx: SelectionContext) -> Signature:
        return Signature(selected=ctx.train.group_names(), method="None", hyperparameters={})


@dataclass(frozen=True)
class RidgeLearner:
    lam: float

    complexity = 0

    def label(self) -> str:
        return f"Ridge(lambda={self.lam:g})"

    def fit(self, X, y, names, class_weights, seed):
        return L.fit_ridge_logistic(X, y, self.lam, class_weights, column_names=names)


@dataclass(frozen=True)
class TreeLearner:
    min_leaf: int
    alpha_prune: float

    complexity = 1

    def label(self) -> str:
        return f"Tree(min_leaf={self.min_leaf},alpha={self.alpha_prune:g})"

    def fit(self, X, y, names, class_weights, seed):
        return L.fit_decision_tree(X, y, self.min_leaf, self.alpha_prune, class_weights,
                                   column_names=names)


@dataclass(frozen=True)
class ForestLearner:
    n_trees: int
    min_leaf: int

    complexity = 2

    def label(self) -> str:
        return f"Forest(n_trees={self.n_trees},min_leaf={self.min_leaf})"

    def fit(self, X, y, names, class_weights, seed):
        return L.fit_random_forest(X, y, self.n_trees, self.min_leaf, seed, class_weights,
                                   column_names=names)


@dataclass(frozen=True)
class NaiveLearner:
    complexity = 3

    def label(self) -> str:
        return "NaiveBaseline"

    def fit(self, X, y, names, class_weights, seed):
        return L.naive_baseline(y)


Selector = Union[SesSelector, LassoSelector, UnivariateSelector, EpilogiSelector, NoSelector]
Learner = Union[RidgeLearner, TreeLearner, ForestLearner, NaiveLearner]


@dataclass(frozen=True)
class ModelConfig:
    """One point of the search space: a selector paired with a learner."""

    config_id: int
    selector: Optional[Selector]
    learner: Learner

    @property
    def supported(self) -> bool:
        return not isinstance(self.selector, EpilogiSelector)

    @property
    def trainable(self) -> bool:
        """Counts toward the fitted-model tally (the naive baseline does not)."""
        return not isinstance(self.learner, NaiveLearner)

    def label(self) -> str:
        sel = self.selector.label() if self.selector is not None else "-"
        return f"#{self.config_id} {sel} + {self.learner.label()}"

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id,
            "selector": self.selector.label() if self.selector is not None else None,
            "learner": self.learner.label(),
            "supported": self.supported,
        }


# ---------------------------------------------------------------------------
# Search-space enumeration


@dataclass
class SearchGrid:
    """Hyperparameter grids for the selector and learner families."""

    ses_kmax: list = field(default_factory=lambda: [2, 3])
    ses_alpha: list = field(default_factory=lambda: [0.01, 0.05, 0.1])
    lasso_penalty: list = field(
        default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]
    )
    univariate_alpha: list = field(default_factory=lambda: [0.01, 0.001])
    epilogi_threshold: list = field(default_factory=lambda: [0.01])
    include_no_selector: bool = True
    ridge_lambda: list = field(default_factory=lambda: [0.0001, 0.001, 0.1, 1.0, 10.0, 100.0])
    tree_min_leaf: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    tree_alpha: list = field(default_factory=lambda: [0.01, 0.05, 0.1])
    forest_n_trees: list = field(default_factory=lambda: [100, 1000])
    forest_min_leaf: list = field(default_factory=lambda: [4, 5])
    declared_total: Optional[int] = 738

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, raw: dict) -> "SearchGrid":
        grid = cls()
        for key, value in raw.items():
            if not hasattr(grid, key):
                raise ValueError(f"unknown search-grid key {key!r}")
            setattr(grid, key, value)
        return grid


@dataclass
class SearchSpace:
    configs: list[ModelConfig]
    declared_total: Optional[int]

    @property
    def n_runnable(self) -> int:
        return sum(1 for c in self.configs if c.supported)

    @property
    def n_unsupported(self) -> int:
        return sum(1 for c in self.configs if not c.supported)

    def summary(self) -> dict:
        actual = len(self.configs)
        return {
            "total_enumerated": actual,
            "runnable": self.n_runnable,
            "marked_unsupported": self.n_unsupported,
            "declared_total": self.declared_total,
            "matches_declared": (self.declared_total is None or self.declared_total == actual),
        }


def enumerate_search_space(grid: SearchGrid) -> SearchSpace:
    """Deterministic cross product of selector and learner grids plus the
    naive baseline; unsupported named selectors stay in the enumeration but
    are skipped at run time. Any mismatch with the grid's declared total is
    recorded in the summary, not raised."""
    selectors: list[Selector] = []
    for kmax in grid.ses_kmax:
        for alpha in grid.ses_alpha:
            selectors.append(SesSelector(kmax=int(kmax), alpha=float(alpha)))
    selectors.extend(LassoSelector(penalty=float(p)) for p in grid.lasso_penalty)
    selectors.extend(UnivariateSelector(alpha=float(a)) for a in grid.univariate_alpha)
    selectors.extend(EpilogiSelector(threshold=float(t)) for t in grid.epilogi_threshold)
    if grid.include_no_selector:
        selectors.append(NoSelector())

    learner_list: list[Learner] = []
    learner_list.extend(RidgeLearner(lam=float(l)) for l in grid.ridge_lambda)
    for leaf in grid.tree_min_leaf:
        for alpha in grid.tree_alpha:
            learner_list.append(TreeLearner(min_leaf=int(leaf), alpha_prune=float(alpha)))
    for n_trees in grid.forest_n_trees:
        for leaf in grid.forest_min_leaf:
            learner_list.append(ForestLearner(n_trees=int(n_trees), min_leaf=int(leaf)))

    configs: list[ModelConfig] = []
    for selector in selectors:
        for learner in learner_list:
            configs.append(ModelConfig(config_id=len(configs), selector=selector, learner=learner))
    configs.append(ModelConfig(config_id=len(configs), selector=None, learner=NaiveLearner()))

    space = SearchSpace(configs=configs, declared_total=grid.declared_total)
    summary = space.summary()
    if not summary["matches_declared"]:
        log.info(
            "search space enumerates %d configs; declared total is %s",
            summary["total_enumerated"], summary["declared_total"],
        )
    return space


# ---------------------------------------------------------------------------
# The CV protocol


@dataclass(frozen=True)
class CVPlan:
    """Repeated (R), incomplete (N), stratified K-fold evaluation plan."""

    k: int = 10
    repeats: int = 1
    n_complete: Optional[int] = None  # folds evaluated per repeat; None = all k
    seed: int = 0
    drop_margin: Optional[float] = 0.03
    drop_min_folds: int = 3
    stop_epsilon: Optional[float] = 0.001
    bbc_boot: int = 500
    bbc_ci: float = 0.95

    def __post_init__(self) -> None:
        n_complete = self.k if self.n_complete is None else self.n_complete
        if not 1 <= n_complete <= self.k:
            raise ValueError("n_complete must satisfy 1 <= n_complete <= k")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")

    @property
    def folds_per_repeat(self) -> int:
        return self.k if self.n_complete is None else self.n_complete


@dataclass
class CVResult:
    configs: list[ModelConfig]
    pooled: np.ndarray          # (C, n) out-of-fold scores, NaN where unevaluated
    evaluated_mask: np.ndarray  # samples belonging to completed folds
    labels: np.ndarray
    fold_aucs: dict[int, list[float]]
    n_selected: dict[int, list[int]]
    dropped: dict[int, int]     # config_id -> 1-based fold count at drop
    unsupported: list[int]
    folds_completed: int
    fitted_models: int
    stopped_early: bool
    plan: CVPlan

    def surviving(self) -> list[ModelConfig]:
        return [
            c for c in self.configs
            if c.supported and c.config_id not in self.dropped
        ]

    def pooled_auc(self, config_id: int) -> float:
        mask = self.evaluated_mask & ~np.isnan(self.pooled[config_id])
        return auc_roc(self.pooled[config_id][mask], self.labels[mask])

    def to_summary(self) -> dict:
        return {
            "folds_completed": self.folds_completed,
            "fitted_models": self.fitted_models,
            "stopped_early": self.stopped_early,
            "dropped": {str(k): v for k, v in sorted(self.dropped.items())},
            "unsupported": list(self.unsupported),
        }


def _signature_for(config: ModelConfig, ctx: SelectionContext) -> Signature:
    if config.selector is None:
        return Signature(selected=ctx.train.group_names(), method="None", hyperparameters={})
    return config.selector.select(ctx)


def _fit_and_score(
    config: ModelConfig,
    signature: Signature,
    train: FeatureMatrix,
    test: FeatureMatrix,
    class_weights,
    seed: int,
) -> np.ndarray:
    groups = signature.selected
    if groups:
        Xtr = train.take_groups(groups)
        Xte = test.take_groups(groups)
        names = [c.name for c in Xtr.columns]
        model = config.learner.fit(Xtr.X, train.y, names, class_weights, seed)
        return L.predict_scores(model, Xte.X, column_names=names)
    # empty signature: intercept-only model
    model = config.learner.fit(np.empty((train.n_rows, 0)), train.y, [], class_weights, seed)
    return L.predict_scores(model, np.empty((test.n_rows, 0)))


def run_rnk_cv(
    matrix: FeatureMatrix,
    configs: Sequence[ModelConfig],
    plan: CVPlan,
    class_weights=None,
    checkpoint_path: Optional[Path] = None,
    resume: bool = False,
    progress: Optional[Callable[[dict], None]] = None,
    max_workers: int = 1,
) -> CVResult:
    """Evaluate every surviving configuration fold by fold.

    Selectors see only the training side of each fold. After each fold,
    configurations whose mean per-fold AUC trails the best by more than
    drop_margin (once drop_min_folds folds are in) are dropped, and the fold
    loop ends early when the best pooled AUC stops improving by stop_epsilon.
    """
    labels = matrix.y
    n = matrix.n_rows
    C = len(configs)
    unsupported = [c.config_id for c in configs if not c.supported]
    for cid in unsupported:
        log.info("config %s is unsupported and will be skipped", configs[cid].label())

    fold_sequence: list[tuple[int, int, np.ndarray]] = []
    for r in range(plan.repeats):
        assignment = stratified_folds(labels, plan.k, substream(plan.seed, "folds", r))
        for j in range(plan.folds_per_repeat):
            fold_sequence.append((r, j, assignment == j))

    pooled = np.full((C, n), np.nan)
    evaluated_mask = np.zeros(n, dtype=bool)
    fold_aucs: dict[int, list[float]] = {c.config_id: [] for c in configs}
    n_selected: dict[int, list[int]] = {c.config_id: [] for c in configs}
    dropped: dict[int, int] = {}
    fitted_models = 0
    folds_completed = 0
    stopped_early = False
    best_pooled_prev: Optional[float] = None
    start_fold = 0

    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        state = _load_checkpoint(checkpoint_path)
        pooled = state["pooled"]
        evaluated_mask = state["evaluated_mask"]
        fold_aucs = state["fold_aucs"]
        n_selected = state["n_selected"]
        dropped = state["dropped"]
        fitted_models = state["fitted_models"]
        folds_completed = state["folds_completed"]
        best_pooled_prev = state["best_pooled_prev"]
        stopped_early = state["stopped_early"]
        start_fold = folds_completed
        log.info("resuming CV from fold %d", start_fold + 1)

    for t in range(start_fold, len(fold_sequence)):
        if stopped_early:
            break
        r, j, test_mask = fold_sequence[t]
        train_idx = np.flatnonzero(~test_mask)
        test_idx = np.flatnonzero(test_mask)
        train = matrix.take_rows(train_idx)
        test = matrix.take_rows(test_idx)
        ctx = SelectionContext(train)

        surviving = [c for c in configs if c.supported and c.config_id not in dropped]
        signatures = {c.config_id: _signature_for(c, ctx) for c in surviving}

        def evaluate(config: ModelConfig) -> tuple[int, np.ndarray]:
            seed = spawn_seed(plan.seed, "learner", config.config_id, r, j)
            scores = _fit_and_score(
                config, signatures[config.config_id], train, test, class_weights, seed
            )
            return config.config_id, scores

        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results = list(pool.map(evaluate, surviving))
        else:
            results = [evaluate(c) for c in surviving]

        for config, (cid, scores) in zip(surviving, results):
            pooled[cid, test_idx] = scores
            fauc = auc_roc(scores, labels[test_idx])
            fold_aucs[cid].append(fauc)
            n_selected[cid].append(len(signatures[cid].selected))
            if config.trainable:
                fitted_models += 1
            if progress is not None:
                progress(
                    {
                        "repeat": r,
                        "fold": j,
                        "config_id": cid,
                        "config": config.label(),
                        "fold_auc": fauc,
                        "n_selected": len(signatures[cid].selected),
                    }
                )

        evaluated_mask |= test_mask
        folds_completed += 1

        if plan.drop_margin is not None:
            means = {c.config_id: float(np.mean(fold_aucs[c.config_id])) for c in surviving}
            best_mean = max(means.values())
            for c in surviving:
                cid = c.config_id
                if len(fold_aucs[cid]) >= plan.drop_min_folds and means[cid] < best_mean - plan.drop_margin:
                    dropped[cid] = folds_completed
                    log.info("dropped %s at fold %d (mean AUC %.4f vs best %.4f)",
                             c.label(), folds_completed, means[cid], best_mean)

        alive = [c for c in configs if c.supported and c.config_id not in dropped]
        best_pooled_now = max(
            auc_roc(pooled[c.config_id][evaluated_mask], labels[evaluated_mask]) for c in alive
        )
        if (
            plan.stop_epsilon is not None
            and best_pooled_prev is not None
            and best_pooled_now - best_pooled_prev < plan.stop_epsilon
        ):
            stopped_early = True
            log.info("early stop after fold %d (best pooled AUC %.4f, prev %.4f)",
                     folds_completed, best_pooled_now, best_pooled_prev)
        best_pooled_prev = best_pooled_now

        if checkpoint_path is not None:
            _save_checkpoint(
                checkpoint_path,
                pooled=pooled,
                evaluated_mask=evaluated_mask,
                fold_aucs=fold_aucs,
                n_selected=n_selected,
                dropped=dropped,
                fitted_models=fitted_models,
                folds_completed=folds_completed,
                best_pooled_prev=best_pooled_prev,
                stopped_early=stopped_early,
            )

    return CVResult(
        configs=list(configs),
        pooled=pooled,
        evaluated_mask=evaluated_mask,
        labels=labels,
        fold_aucs=fold_aucs,
        n_selected=n_selected,
        dropped=dropped,
        unsupported=unsupported,
        folds_completed=folds_completed,
        fitted_models=fitted_models,
        stopped_early=stopped_early,
        plan=plan,
    )


def _save_checkpoint(path, **state) -> None:
    meta = {
        "fold_aucs": {str(k): v for k, v in state["fold_aucs"].items()},
        "n_selected": {str(k): v for k, v in state["n_selected"].items()},
        "dropped": {str(k): v for k, v in state["dropped"].items()},
        "fitted_models": state["fitted_models"],
        "folds_completed": state["folds_completed"],
        "best_pooled_prev": state["best_pooled_prev"],
        "stopped_early": state["stopped_early"],
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            pooled=state["pooled"],
            evaluated_mask=state["evaluated_mask"],
            meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
        )
    tmp.replace(Path(path))


def _load_checkpoint(path) -> dict:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"].tobytes()).decode("utf-8"))
        return {
            "pooled": data["pooled"].copy(),
            "evaluated_mask": data["evaluated_mask"].copy(),
            "fold_aucs": {int(k): v for k, v in meta["fold_aucs"].items()},
            "n_selected": {int(k): v for k, v in meta["n_selected"].items()},
            "dropped": {int(k): v for k, v in meta["dropped"].items()},
            "fitted_models": meta["fitted_models"],
            "folds_completed": meta["folds_completed"],
            "best_pooled_prev": meta["best_pooled_prev"],
            "stopped_early": meta["stopped_early"],
        }


def select_winner(result: CVResult) -> tuple[ModelConfig, PerformanceEstimate]:
    """Best pooled AUC among surviving configurations, bias-corrected.

    Ties break toward fewer selected features, the simpler learner family
    (ridge < tree < forest), then the lower config id. The BBC runs over the
    surviving configurations' pooled scores on the commonly evaluated samples.
    """
    surviving = result.surviving()
    if not surviving:
        raise RuntimeError("no surviving configurations; the plan was too aggressive")
    if result.folds_completed < 2:
        raise RuntimeError("winner selection needs pooled scores from at least 2 folds")
    mask = result.evaluated_mask

    def sort_key(c: ModelConfig):
        auc = result.pooled_auc(c.config_id)
        sel = result.n_selected[c.config_id]
        mean_sel = float(np.mean(sel)) if sel else 0.0
        return (-auc, mean_sel, c.learner.complexity, c.config_id)

    winner = min(surviving, key=sort_key)
    S = np.stack([result.pooled[c.config_id][mask] for c in surviving])
    estimate = bbc_correct(
        S,
        result.labels[mask],
        n_boot=result.plan.bbc_boot,
        ci_level=result.plan.bbc_ci,
        seed=substream(result.plan.seed, "bbc"),
    )
    return winner, estimate
