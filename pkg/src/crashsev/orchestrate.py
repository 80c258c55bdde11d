"""The outer protocol: draw disjoint stratified training subsets, tune each,
aggregate the winners' signatures by cross-subset stability, train the final
model on the union of subsets, and evaluate once on the untouched holdout.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import learners as L
from .preprocess import FeatureMatrix
from .rng import spawn_seed, substream
from .selection import Signature, StabilityTable, stability_select
from .stats import PerformanceEstimate, RocCurve, auc_roc, roc_curve
from .tune import (
    CVPlan,
    ModelConfig,
    RidgeLearner,
    SearchSpace,
    SelectionContext,
    run_rnk_cv,
    select_winner,
)

log = logging.getLogger(__name__)

__all__ = [
    "SubsetPlan",
    "SubsetResult",
    "FinalRun",
    "ProtocolError",
    "HoldoutViolation",
    "draw_subsets",
    "run_protocol",
]


class ProtocolError(RuntimeError):
    """The protocol cannot proceed as configured."""


class HoldoutViolation(RuntimeError):
    """A training-phase operation read holdout rows."""


@dataclass(frozen=True)
class SubsetPlan:
    n_subsets: int = 4
    subset_size: int = 55_000
    seed: int = 0
    disjoint: bool = True


def _per_class_allocation(labels: np.ndarray, subset_size: int) -> dict:
    """Largest-remainder allocation of one subset across classes.

    Every class count lands within one of exact proportionality.
    """
    n = labels.size
    classes, class_counts = np.unique(labels, return_counts=True)
    exact = {c: subset_size * cnt / n for c, cnt in zip(classes, class_counts)}
    base = {c: int(np.floor(v)) for c, v in exact.items()}
    shortfall = subset_size - sum(base.values())
    order = sorted(classes, key=lambda c: (-(exact[c] - base[c]), c))
    for c in order[:shortfall]:
        base[c] += 1
    return base


def draw_subsets(labels, plan: SubsetPlan) -> tuple[list[np.ndarray], np.ndarray]:
    """Stratified subset index lists plus the remaining holdout indices.

    Each subset preserves the global class ratio within one sample per class;
    subsets are pairwise disjoint when the plan says so.
    """
    y = np.asarray(labels)
    n = y.size
    alloc = _per_class_allocation(y, plan.subset_size)
    rng = substream(plan.seed, "subsets")

    for c, need in alloc.items():
        available = int(np.count_nonzero(y == c))
        demand = need * plan.n_subsets if plan.disjoint else need
        if demand > available:
            raise ProtocolError(
                f"class {c!r} has {available} rows but the plan needs {demand} "
                f"({need} per subset x {plan.n_subsets} disjoint subsets)"
            )

    subsets: list[list[int]] = [[] for _ in range(plan.n_subsets)]
    for c in sorted(alloc):
        need = alloc[c]
        idx = np.flatnonzero(y == c)
        perm = rng.permutation(idx)
        if plan.disjoint:
            for s in range(plan.n_subsets):
                subsets[s].extend(perm[s * need : (s + 1) * need].tolist())
        else:
            for s in range(plan.n_subsets):
                draw = rng.choice(idx, size=need, replace=False)
                subsets[s].extend(draw.tolist())

    subset_arrays = [np.array(sorted(s), dtype=np.intp) for s in subsets]
    used = np.zeros(n, dtype=bool)
    for s in subset_arrays:
        used[s] = True
    holdout = np.flatnonzero(~used)
    return subset_arrays, holdout


@dataclass
class SubsetResult:
    """Everything the report needs from one subset's tuning run."""

    index: int
    winner: dict
    winner_id: int
    winner_pooled_auc: float
    estimate: dict
    signature: list[str]
    signature_method: str
    signature_hyperparameters: dict
    folds_completed: int
    fitted_models: int
    stopped_early: bool
    dropped: dict
    n_rows: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, raw: dict) -> "SubsetResult":
        return cls(**raw)


@dataclass
class FinalRun:
    stable_features: list[str]
    stability: StabilityTable
    subset_results: list[SubsetResult]
    final_model: object
    train_auc: float
    holdout_auc: float
    holdout_estimate: PerformanceEstimate
    roc: RocCurve
    report: dict
    train_indices: np.ndarray = field(repr=False, default=None)
    holdout_indices: np.ndarray = field(repr=False, default=None)


def _thin_points(fpr: np.ndarray, tpr: np.ndarray, max_points: int) -> list[list[float]]:
    n = fpr.size
    if n <= max_points:
        keep = np.arange(n)
    else:
        keep = np.unique(np.linspace(0, n - 1, max_points).round().astype(int))
    return [[float(fpr[i]), float(tpr[i])] for i in keep]


def _bootstrap_auc_ci(
    scores: np.ndarray,
    labels: np.ndarray,
    n_boot: int,
    ci_level: float,
    rng: np.random.Generator,
    max_redraws: int = 100,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the AUC of one fixed model."""
    n = scores.size
    vals = []
    for _ in range(n_boot):
        for _retry in range(max_redraws):
            idx = rng.integers(0, n, size=n)
            if labels[idx].min() != labels[idx].max():
                break
        else:
            continue
        vals.append(auc_roc(scores[idx], labels[idx]))
    lo = (1.0 - ci_level) / 2.0
    return float(np.quantile(vals, lo)), float(np.quantile(vals, 1.0 - lo))


def _refit_winner_signature(winner: ModelConfig, subset_matrix: FeatureMatrix) -> Signature:
    """The winner's selector re-fitted on the whole subset, for stability."""
    ctx = SelectionContext(subset_matrix)
    if winner.selector is None:
        return Signature(selected=subset_matrix.group_names(), method="None", hyperparameters={})
    return winner.selector.select(ctx)


class _AccessTracker:
    def __init__(self, n_rows: int):
        self.mask = np.zeros(n_rows, dtype=bool)

    def __call__(self, idx: np.ndarray) -> None:
        self.mask[idx] = True


def run_protocol(
    matrix: FeatureMatrix,
    subset_plan: SubsetPlan,
    space: SearchSpace,
    cv_plan: CVPlan,
    stability_threshold: float = 0.75,
    final_learner=None,
    class_weights=None,
    out_dir: Optional[Path] = None,
    resume: bool = False,
    max_workers: int = 1,
    progress=None,
) -> FinalRun:
    """Run the full protocol and assemble the run report.

    Holdout isolation is enforced: a row-access tracker on the matrix records
    every row the training phases touch, and any overlap with the holdout
    raises HoldoutViolation before the final evaluation is allowed to run.
    """
    final_learner = final_learner or RidgeLearner(lam=1.0)
    labels = matrix.y
    subsets, holdout = draw_subsets(labels, subset_plan)
    union = np.sort(np.concatenate(subsets)) if subset_plan.disjoint else np.unique(
        np.concatenate(subsets)
    )
    if np.intersect1d(union, holdout).size:
        raise ProtocolError("internal error: holdout overlaps training rows")

    subset_dir = None
    if out_dir is not None:
        subset_dir = Path(out_dir) / "subsets"
        subset_dir.mkdir(parents=True, exist_ok=True)

    tracker = _AccessTracker(matrix.n_rows)
    previous_hook = matrix._row_hook
    matrix._row_hook = tracker

    try:
        subset_results: list[SubsetResult] = []
        signatures: list[Signature] = []
        for s, subset_idx in enumerate(subsets):
            result_path = subset_dir / f"subset_{s:02d}.json" if subset_dir else None
            if resume and result_path is not None and result_path.exists():
                with open(result_path, "r", encoding="utf-8") as fh:
                    sub = SubsetResult.from_dict(json.load(fh))
                subset_results.append(sub)
                signatures.append(
                    Signature(
                        selected=sub.signature,
                        method=sub.signature_method,
                        hyperparameters=sub.signature_hyperparameters,
                    )
                )
                log.info("subset %d loaded from checkpoint", s + 1)
                continue

            sub_matrix = matrix.take_rows(subset_idx)
            plan_s = replace(cv_plan, seed=spawn_seed(cv_plan.seed, "subset", s))
            checkpoint = subset_dir / f"subset_{s:02d}.cv.npz" if subset_dir else None
            cv_result = run_rnk_cv(
                sub_matrix,
                space.configs,
                plan_s,
                class_weights=class_weights,
                checkpoint_path=checkpoint,
                resume=resume,
                progress=progress,
                max_workers=max_workers,
            )
            winner, estimate = select_winner(cv_result)
            signature = _refit_winner_signature(winner, sub_matrix)
            sub = SubsetResult(
                index=s,
                winner=winner.to_dict(),
                winner_id=winner.config_id,
                winner_pooled_auc=cv_result.pooled_auc(winner.config_id),
                estimate=estimate.to_dict(),
                signature=list(signature.selected),
                signature_method=signature.method,
                signature_hyperparameters=dict(signature.hyperparameters),
                folds_completed=cv_result.folds_completed,
                fitted_models=cv_result.fitted_models,
                stopped_early=cv_result.stopped_early,
                dropped={str(k): v for k, v in sorted(cv_result.dropped.items())},
                n_rows=int(subset_idx.size),
            )
            subset_results.append(sub)
            signatures.append(signature)
            if result_path is not None:
                with open(result_path, "w", encoding="utf-8") as fh:
                    json.dump(sub.to_dict(), fh, indent=2, sort_keys=True)
                    fh.write("\n")
                if checkpoint is not None and checkpoint.exists():
                    checkpoint.unlink()
            log.info(
                "subset %d/%d: winner %s, corrected AUC %.4f, %d stable-candidate features",
                s + 1, subset_plan.n_subsets, winner.label(), estimate.point,
                len(signature.selected),
            )

        stable, stability = stability_select(signatures, stability_threshold)
        if not stable:
            raise ProtocolError(
                "no feature reached the stability threshold "
                f"{stability_threshold:g}; lower the threshold"
            )

        union_matrix = matrix.take_rows(union)
        train_matrix = union_matrix.take_groups(stable)
        names = [c.name for c in train_matrix.columns]
        model = final_learner.fit(
            train_matrix.X,
            union_matrix.y,
            names,
            class_weights,
            spawn_seed(cv_plan.seed, "final-learner"),
        )
        train_scores = L.predict_scores(model, train_matrix.X, column_names=names)
        train_auc = auc_roc(train_scores, union_matrix.y)

        if tracker.mask[holdout].any():
            touched = int(tracker.mask[holdout].sum())
            raise HoldoutViolation(f"{touched} holdout rows were read during training")
    finally:
        matrix._row_hook = previous_hook

    holdout_matrix = matrix.take_rows(holdout).take_groups(stable)
    holdout_labels = labels[holdout]
    holdout_scores = L.predict_scores(model, holdout_matrix.X, column_names=names)
    holdout_auc = auc_roc(holdout_scores, holdout_labels)
    ci_rng = substream(subset_plan.seed, "holdout-ci")
    ci_low, ci_high = _bootstrap_auc_ci(holdout_scores, holdout_labels, 1000, 0.95, ci_rng)
    estimate = PerformanceEstimate(
        point=holdout_auc, ci_low=ci_low, ci_high=ci_high, ci_level=0.95,
        n_boot=1000, naive_point=holdout_auc,
    )
    roc = roc_curve(holdout_scores, holdout_labels)

    report = {
        "report_version": 1,
        "search_space": space.summary(),
        "subset_plan": {
            "n_subsets": subset_plan.n_subsets,
            "subset_size": subset_plan.subset_size,
            "seed": subset_plan.seed,
            "disjoint": subset_plan.disjoint,
        },
        "cv_plan": {
            "k": cv_plan.k,
            "repeats": cv_plan.repeats,
            "n_complete": cv_plan.n_complete,
            "seed": cv_plan.seed,
            "drop_margin": cv_plan.drop_margin,
            "drop_min_folds": cv_plan.drop_min_folds,
            "stop_epsilon": cv_plan.stop_epsilon,
            "bbc_boot": cv_plan.bbc_boot,
            "bbc_ci": cv_plan.bbc_ci,
        },
        "stability_threshold": stability_threshold,
        "subsets": [s.to_dict() for s in subset_results],
        "stability": stability.to_dict(),
        "stable_features": list(stable),
        "final": {
            "learner": final_learner.label(),
            "n_train": int(union.size),
            "n_holdout": int(holdout.size),
            "train_auc": train_auc,
            "holdout_auc": holdout_auc,
            "holdout_ci": [ci_low, ci_high],
            "train_holdout_gap": abs(train_auc - holdout_auc),
            "roc_points": _thin_points(roc.fpr, roc.tpr, 2000),
        },
        "counts": {
            "fitted_models_total": sum(s.fitted_models for s in subset_results),
            "fitted_models_per_subset": [s.fitted_models for s in subset_results],
        },
    }

    return FinalRun(
        stable_features=list(stable),
        stability=stability,
        subset_results=subset_results,
        final_model=model,
        train_auc=train_auc,
        holdout_auc=holdout_auc,
        holdout_estimate=estimate,
        roc=roc,
        report=report,
        train_indices=union,
        holdout_indices=holdout,
    )
