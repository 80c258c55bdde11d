"""Acceptance suite: one test per criterion, each printing a PASS line.

Expected values come from independent oracles computed inside this module
(pair counting, step-up enumeration, quadrature) or were frozen from a
pre-registered oracle run at seed 42; they are never read back from the
code under test.
"""

import io
import json
import os
import time

import numpy as np
import pytest
from fixture_curation import DECODER_TABLE, ROWS, expected_verdicts, fixture_csv_bytes

from crashsev.explain import linear_shap, variable_importance
from crashsev.ingest import (
    ColumnSchema,
    DecodedVehicle,
    PersonType,
    StubDecoder,
    curate,
    parse_person_rows,
)
from crashsev.learners import fit_ridge_logistic
from crashsev.orchestrate import SubsetPlan, draw_subsets, run_protocol
from crashsev.preprocess import FeatureMatrix
from crashsev.stats import auc_roc, bbc_correct, bh_select, stratified_folds
from crashsev.synth import planted_generator
from crashsev.tune import CVPlan, SearchGrid, enumerate_search_space, run_rnk_cv

E2E_SEED = 42


def _report(name: str) -> None:
    print(f"ACCEPTANCE {name}: PASS")


# ---------------------------------------------------------------------------
# independent oracles


def pair_count_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = np.sum(pos[:, None] > neg[None, :])
    ties = np.sum(pos[:, None] == neg[None, :])
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def step_up_bh(pvalues, alpha):
    m = len(pvalues)
    order = sorted(range(m), key=lambda i: pvalues[i])
    k = -1
    for rank, i in enumerate(order, start=1):
        if pvalues[i] <= alpha * rank / m:
            k = rank
    return set(order[:k]) if k > 0 else set()


# ---------------------------------------------------------------------------
# criteria


def test_auc_oracle_equivalence():
    """1,000 random instances with ties, n <= 500: exact match, < 10 s."""
    rng = np.random.default_rng(1001)
    start = time.time()
    checked = 0
    while checked < 1000:
        n = int(rng.integers(2, 501))
        # mix continuous scores and coarse ones that force ties
        if rng.random() < 0.5:
            scores = rng.integers(0, max(2, n // 10), n).astype(float) / 3.0
        else:
            scores = rng.standard_normal(n)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        assert auc_roc(scores, labels) == pair_count_auc(scores, labels)
        checked += 1
    elapsed = time.time() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    _report("auc-oracle-equivalence")


def test_bh_oracle_equivalence():
    """1,000 random p-vectors (m <= 50): exact index sets."""
    rng = np.random.default_rng(1002)
    for _ in range(1000):
        m = int(rng.integers(1, 51))
        p = rng.random(m) ** rng.uniform(0.5, 3.0)
        alpha = float(rng.uniform(0.005, 0.4))
        got = set(bh_select(p, alpha).tolist())
        want = step_up_bh(p.tolist(), alpha)
        assert got == want
    _report("bh-oracle-equivalence")


def test_shap_local_accuracy():
    """|f(x) - phi0 - sum(phi)| <= 1e-9 on every explained row."""
    rng = np.random.default_rng(1003)
    worst = 0.0
    for _ in range(25):
        n = int(rng.integers(5, 400))
        p = int(rng.integers(1, 40))
        X = rng.standard_normal((n, p)) * rng.uniform(0.1, 50.0)
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[: n // 2] = 1 - y[0]
        model = fit_ridge_logistic(X, y, lam=float(rng.choice([0.001, 1.0, 100.0])))
        cols = [
            type("C", (), {"name": c, "kind": "numeric", "source": c, "level": ""})()
            for c in model.column_names
        ]
        shap = linear_shap(model, X, cols)
        gap = np.abs(model.decision_function(X) - shap.row_reconstruction())
        worst = max(worst, float(gap.max()))
        assert gap.max() <= 1e-9
    _report(f"shap-local-accuracy (worst gap {worst:.2e})")


def test_importance_recomputation_exact():
    """Mean-absolute importances equal direct recomputation bit-for-bit."""
    rng = np.random.default_rng(1004)
    for _ in range(20):
        n, p = int(rng.integers(2, 200)), int(rng.integers(1, 30))
        X = rng.standard_normal((n, p))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        model = fit_ridge_logistic(X, y, lam=1.0)
        cols = [
            type("C", (), {"name": c, "kind": "numeric", "source": c, "level": ""})()
            for c in model.column_names
        ]
        shap = linear_shap(model, X, cols)
        table = variable_importance(shap)
        direct = np.abs(shap.values).mean(axis=0)
        assert np.array_equal(table.column_vi, direct)
    _report("importance-recomputation")


def test_bbc_behavior():
    """(a) single-config CI coverage >= 95/100; (b) winner's-curse null:
    corrected in [0.45, 0.55] while the naive winner exceeds 0.55 in >= 90%
    of 50 trials; both within a 5-minute budget."""
    start = time.time()

    contained = 0
    for seed in range(100):
        rng = np.random.default_rng(2000 + seed)
        n = 300
        y = (rng.random(n) < 0.3).astype(int)
        scores = rng.standard_normal(n) + 0.8 * y
        est = bbc_correct(scores[None, :], y, n_boot=200, seed=rng)
        pooled = auc_roc(scores, y)
        contained += est.ci_low <= pooled <= est.ci_high
    assert contained >= 95, f"coverage {contained}/100"

    good = 0
    for seed in range(50):
        rng = np.random.default_rng(3000 + seed)
        n = 500
        y = (rng.random(n) < 0.5).astype(int)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        S = rng.standard_normal((200, n))
        est = bbc_correct(S, y, n_boot=500, seed=rng)
        good += (0.45 <= est.point <= 0.55) and (est.naive_point > 0.55)
    assert good >= 45, f"null-experiment success {good}/50"

    elapsed = time.time() - start
    assert elapsed < 300.0, f"took {elapsed:.0f}s"
    _report(f"bbc-behavior (coverage {contained}/100, null {good}/50, {elapsed:.0f}s)")


def test_stratification_across_seeds():
    """Folds and subsets proportional within one per class; subsets disjoint."""
    for seed in range(100):
        rng = np.random.default_rng(4000 + seed)
        n = int(rng.integers(400, 1200))
        labels = (rng.random(n) < rng.uniform(0.05, 0.5)).astype(int)
        k = int(rng.integers(2, 8))
        counts = np.bincount(labels, minlength=2)
        if counts.min() < k:
            labels[: k - counts.min()] = 1 - labels[0]

        assign = stratified_folds(labels, k, seed=seed)
        for cls in (0, 1):
            per_fold = np.bincount(assign[labels == cls], minlength=k)
            assert per_fold.max() - per_fold.min() <= 1
            expected = np.count_nonzero(labels == cls) / k
            assert np.all(np.abs(per_fold - expected) < 1.0)

        n_subsets = int(rng.integers(2, 5))
        size = n // (n_subsets + 1)
        pos = int(np.count_nonzero(labels == 1))
        min_needed = n_subsets * max(1, round(size * pos / n))
        if size < 8 or pos < min_needed + 1:
            continue
        plan = SubsetPlan(n_subsets=n_subsets, subset_size=size, seed=seed)
        subsets, holdout = draw_subsets(labels, plan)
        seen = np.concatenate(subsets)
        assert len(set(seen.tolist())) == seen.size
        assert seen.size + holdout.size == n
        for s in subsets:
            for cls in (0, 1):
                got = int(np.count_nonzero(labels[s] == cls))
                expected = size * np.count_nonzero(labels == cls) / n
                assert abs(got - expected) < 1.0
    _report("stratification")


def test_curation_workflow_fixture():
    """Every cleaning-workflow branch on the 50-row fixture matches the
    hand-specified verdicts."""
    schema = ColumnSchema.default()
    decoder = StubDecoder(
        {
            p: DecodedVehicle(e["make"], e["model"], e["model_year"])
            for p, e in DECODER_TABLE.items()
        }
    )
    parsed = parse_person_rows(io.BytesIO(fixture_csv_bytes()), schema)
    assert len(parsed.rows) == 50 and not parsed.errors
    result = curate(parsed.rows, decoder)

    kept = {(r.crash_id, r.unit_key[1], r.line_number): r for r in result.rows}
    mismatches = []
    for row, verdict in zip(parsed.rows, expected_verdicts()):
        key = (row.crash_id, row.unit_key[1], row.line_number)
        if verdict.startswith("removed_unit:"):
            reason = verdict.split(":", 1)[1]
            ok = key not in kept and result.removed_units.get(row.unit_key) == reason
        elif verdict.startswith("removed_person:"):
            ok = key not in kept
        elif verdict == "kept_retyped_driver":
            ok = key in kept and kept[key].person_type is PersonType.DRIVER
        elif verdict == "kept_demoted_occupant":
            ok = key in kept and kept[key].person_type is PersonType.OCCUPANT
        else:
            ok = key in kept
        if not ok:
            mismatches.append((row.crash_id, row.line_number, verdict))
    assert not mismatches, mismatches
    assert result.audit.conservation_holds()
    _report("curation-workflow (50/50 verdicts)")


@pytest.fixture(scope="module")
def e2e_run():
    """The pre-registered synthetic protocol at seed 42 (thresholds frozen
    from the oracle run: 10/10 planted recovered, |holdout - Bayes| 0.005)."""
    gen = planted_generator(n_features=200, n_informative=10, effect=0.5,
                            prevalence=1 / 51)
    matrix = gen.matrix(40_000, seed=E2E_SEED)
    grid = SearchGrid(
        ses_kmax=[2], ses_alpha=[0.01, 0.05],
        lasso_penalty=[], univariate_alpha=[], epilogi_threshold=[],
        include_no_selector=False,
        ridge_lambda=[0.0001, 0.001, 0.1, 1.0, 10.0, 100.0],
        tree_min_leaf=[], tree_alpha=[], forest_n_trees=[], forest_min_leaf=[],
        declared_total=None,
    )
    start = time.time()
    final = run_protocol(
        matrix,
        SubsetPlan(n_subsets=4, subset_size=5_000, seed=E2E_SEED),
        enumerate_search_space(grid),
        CVPlan(k=10, seed=E2E_SEED),
        stability_threshold=0.75,
    )
    return gen, final, time.time() - start


def test_synthetic_end_to_end(e2e_run):
    """10 planted of 200, n = 40k at 50:1; 4 disjoint subsets of 5,000 under
    SES x ridge; stable set >= 7 planted and <= 3 extras; holdout AUC within
    0.03 of the quadrature Bayes AUC; < 30 min."""
    gen, final, elapsed = e2e_run
    planted = set(gen.planted)
    stable = set(final.stable_features)
    bayes = gen.bayes_auc()
    assert len(stable & planted) >= 7, f"only {len(stable & planted)} planted recovered"
    assert len(stable - planted) <= 3, f"{len(stable - planted)} false features"
    assert abs(final.holdout_auc - bayes) <= 0.03, (
        f"holdout {final.holdout_auc:.4f} vs bayes {bayes:.4f}"
    )
    assert elapsed < 1800.0, f"took {elapsed:.0f}s"
    _report(
        "synthetic-end-to-end "
        f"({len(stable & planted)}/10 planted, {len(stable - planted)} extras, "
        f"|holdout-bayes| {abs(final.holdout_auc - bayes):.4f}, {elapsed:.0f}s)"
    )


def test_model_count_bookkeeping():
    """Disabled dropping/stopping: fitted models == configs x folds, and the
    737-configuration space stopping at fold 9 trains exactly 6,633."""
    rng = np.random.default_rng(5005)
    X = rng.standard_normal((150, 5))
    y = (rng.random(150) < 1 / (1 + np.exp(-X[:, 0]))).astype(int)
    matrix = FeatureMatrix.from_arrays(X, y)

    small = SearchGrid(
        ses_kmax=[2], ses_alpha=[0.05], lasso_penalty=[0.5], univariate_alpha=[0.01],
        epilogi_threshold=[], include_no_selector=False,
        ridge_lambda=[1.0, 10.0], tree_min_leaf=[], tree_alpha=[],
        forest_n_trees=[], forest_min_leaf=[], declared_total=None,
    )
    space = enumerate_search_space(small)
    trainable = sum(1 for c in space.configs if c.trainable and c.supported)
    plan = CVPlan(k=4, seed=1, drop_margin=None, stop_epsilon=None)
    result = run_rnk_cv(matrix, space.configs, plan)
    assert result.fitted_models == trainable * 4 == 6 * 4

    # 11 univariate screens x 67 ridge strengths = 737 configurations; the
    # naive baseline is evaluated but not counted as a trained model
    alphas = [round(0.05 - 0.0045 * i, 4) for i in range(11)]
    lambdas = [round(10 ** (-4 + 6 * i / 66), 8) for i in range(67)]
    big = SearchGrid(
        ses_kmax=[], ses_alpha=[], lasso_penalty=[], univariate_alpha=alphas,
        epilogi_threshold=[], include_no_selector=False,
        ridge_lambda=lambdas, tree_min_leaf=[], tree_alpha=[],
        forest_n_trees=[], forest_min_leaf=[], declared_total=738,
    )
    big_space = enumerate_search_space(big)
    assert big_space.summary()["total_enumerated"] == 738
    assert big_space.summary()["matches_declared"]
    assert sum(1 for c in big_space.configs if c.trainable) == 737

    nine_fold_plan = CVPlan(k=10, n_complete=9, seed=2, drop_margin=None,
                            stop_epsilon=None)
    big_result = run_rnk_cv(matrix, big_space.configs, nine_fold_plan)
    assert big_result.folds_completed == 9
    assert big_result.fitted_models == 737 * 9 == 6633
    _report("model-count-bookkeeping (6,633 at fold 9)")


def test_determinism_byte_identical_reports(tmp_path):
    """Two identical protocol runs serialize to byte-identical reports
    (reports carry no timestamps; metadata with timestamps lives elsewhere)."""
    gen = planted_generator(n_features=30, n_informative=6, effect=0.7,
                            prevalence=0.05)
    matrix = gen.matrix(6_000, seed=7)
    grid = SearchGrid(
        ses_kmax=[2], ses_alpha=[0.05], lasso_penalty=[0.5], univariate_alpha=[0.01],
        epilogi_threshold=[], include_no_selector=False,
        ridge_lambda=[0.1, 1.0], tree_min_leaf=[], tree_alpha=[],
        forest_n_trees=[], forest_min_leaf=[], declared_total=None,
    )
    space = enumerate_search_space(grid)
    blobs = []
    for run in range(2):
        final = run_protocol(
            matrix,
            SubsetPlan(n_subsets=4, subset_size=600, seed=11),
            space,
            CVPlan(k=5, seed=13, bbc_boot=200),
            stability_threshold=0.75,
        )
        path = tmp_path / f"report_{run}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(final.report, fh, indent=2, sort_keys=True)
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]
    _report("determinism-byte-identical")


@pytest.mark.skipif(
    not os.environ.get("CRASHSEV_LARGE_MATRIX"),
    reason="large-data compatibility check runs only when CRASHSEV_LARGE_MATRIX "
    "points at an encoded matrix built from the public dataset",
)
def test_optional_large_scale_compatibility():
    """Reduced run on user-supplied data; results reported, not asserted,
    beyond the holdout floor."""
    from crashsev.preprocess import load_matrix

    matrix = load_matrix(os.environ["CRASHSEV_LARGE_MATRIX"])
    grid = SearchGrid(
        ses_kmax=[2], ses_alpha=[0.05], lasso_penalty=[], univariate_alpha=[],
        epilogi_threshold=[], include_no_selector=False,
        ridge_lambda=[1.0], tree_min_leaf=[], tree_alpha=[],
        forest_n_trees=[], forest_min_leaf=[], declared_total=None,
    )
    start = time.time()
    final = run_protocol(
        matrix,
        SubsetPlan(n_subsets=4, subset_size=10_000, seed=E2E_SEED),
        enumerate_search_space(grid),
        CVPlan(k=10, seed=E2E_SEED),
        stability_threshold=0.75,
    )
    elapsed = time.time() - start
    print(f"large-scale run: holdout AUC {final.holdout_auc:.4f}, "
          f"{len(final.stable_features)} stable features, {elapsed:.0f}s")
    assert elapsed < 6 * 3600
    assert final.holdout_auc >= 0.80
    _report("optional-large-scale")
