"""Command-line entry points binding the pipeline together.

Commands: curate, preprocess, run, explain, report. Exit codes: 0 success,
2 input/schema error, 3 usage error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .explain import (
    export_summary_plot,
    linear_shap,
    permutation_importance,
    variable_importance,
    write_importance_csv,
)
from .ingest import (
    ColumnSchema,
    DisabledDecoder,
    SchemaError,
    StubDecoder,
    curate,
    parse_person_rows,
    summarize_dataset,
    write_curated_csv,
)
from .learners import LinearModel, load_model, save_model
from .orchestrate import HoldoutViolation, ProtocolError, run_protocol
from .preprocess import (
    AggregationConfig,
    build_vehicle_samples,
    encode,
    filter_passenger_vehicles,
    fit_preprocess,
    load_matrix,
    save_matrix,
)
from .rng import spawn_seed
from .tune import enumerate_search_space

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_USAGE = 3
EXIT_INVARIANT = 4


class _Parser(argparse.ArgumentParser):
    """argparse flags usage problems with exit code 3, not its default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    parser = _Parser(prog="crashsev", description=__doc__)
    parser.add_argument("--version", action="version", version=f"crashsev {__version__}")
    parser.add_argument("--config", type=Path, help="run configuration file (INI)")
    parser.add_argument("--seed", type=int, help="override the root seed")
    parser.add_argument("--max-workers", type=int, help="worker pool size")
    parser.add_argument("--resume", action="store_true", help="resume from checkpoints")
    parser.add_argument("--dry-run", action="store_true",
                        help="validate configuration and print the plan without running")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_curate = sub.add_parser("curate", help="parse and curate raw person-level CSV")
    p_curate.add_argument("--input", type=Path, required=True)
    p_curate.add_argument("--schema", type=Path, help="schema map JSON")
    p_curate.add_argument("--decoder-table", type=Path,
                          help="vin-prefix lookup JSON for the offline decoder")
    p_curate.add_argument("--out-dir", type=Path, required=True)

    p_pre = sub.add_parser("preprocess", help="aggregate, filter, and encode curated rows")
    p_pre.add_argument("--input", type=Path, required=True, help="curated CSV")
    p_pre.add_argument("--schema", type=Path, help="schema map JSON")
    p_pre.add_argument("--agg-config", type=Path, help="aggregation config JSON")
    p_pre.add_argument("--no-vehicle-filter", action="store_true",
                       help="keep all unit types instead of passenger-like only")
    p_pre.add_argument("--out-dir", type=Path, required=True)

    p_run = sub.add_parser("run", help="run the full subset/tune/stability protocol")
    p_run.add_argument("--matrix", type=Path, help="feature matrix (overrides config)")
    p_run.add_argument("--out-dir", type=Path, help="output directory (overrides config)")
    p_run.add_argument("--folds", type=int)
    p_run.add_argument("--drop-margin", type=float)
    p_run.add_argument("--drop-min-folds", type=int)
    p_run.add_argument("--stop-epsilon", type=float)

    p_explain = sub.add_parser("explain", help="attributions for a saved final model")
    p_explain.add_argument("--model", type=Path, required=True)
    p_explain.add_argument("--matrix", type=Path, required=True)
    p_explain.add_argument("--features", default="all",
                           help="comma-separated source features, or 'all'")
    p_explain.add_argument("--svg", action="store_true", help="also write a beeswarm SVG")
    p_explain.add_argument("--out-dir", type=Path, required=True)

    p_report = sub.add_parser("report", help="render a run report to the terminal")
    p_report.add_argument("--run-dir", type=Path, required=True)

    return parser


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_curate(args) -> int:
    schema = ColumnSchema.from_file(args.schema) if args.schema else ColumnSchema.default()
    decoder = StubDecoder.from_file(args.decoder_table) if args.decoder_table else DisabledDecoder()
    args.out_dir.mkdir(parents=True, exist_ok=True)

    with open(args.input, "rb") as fh:
        parsed = parse_person_rows(fh, schema)
    if parsed.errors:
        with open(args.out_dir / "quarantine.csv", "w", encoding="utf-8") as fh:
            fh.write("line_number,message,raw\n")
            for err in parsed.errors:
                raw = err.raw.replace('"', '""')
                fh.write(f'{err.line_number},"{err.message}","{raw}"\n')

    result = curate(parsed.rows, decoder)
    if not result.audit.conservation_holds():
        print("curation audit conservation identity violated", file=sys.stderr)
        return EXIT_INVARIANT

    write_curated_csv(result.rows, schema, args.out_dir / "curated.csv")
    _write_json(args.out_dir / "audit.json", result.audit.to_dict())
    _write_json(args.out_dir / "summary.json", summarize_dataset(result.rows).to_dict())
    print(
        f"curated {result.audit.rows_in} rows -> {result.audit.rows_out} "
        f"({result.audit.units_removed} units removed, "
        f"{len(parsed.errors)} lines quarantined)"
    )
    return EXIT_OK


def cmd_preprocess(args) -> int:
    schema = ColumnSchema.from_file(args.schema) if args.schema else ColumnSchema.default()
    agg = AggregationConfig.from_file(args.agg_config) if args.agg_config else AggregationConfig()
    args.out_dir.mkdir(parents=True, exist_ok=True)

    with open(args.input, "rb") as fh:
        parsed = parse_person_rows(fh, schema)
    if parsed.errors:
        print(f"{len(parsed.errors)} malformed lines in curated input", file=sys.stderr)
        return EXIT_INPUT

    samples = build_vehicle_samples(parsed.rows, agg)
    if not args.no_vehicle_filter:
        samples = filter_passenger_vehicles(samples, agg.passenger_types)
    if not samples:
        print("no vehicle samples after aggregation/filtering", file=sys.stderr)
        return EXIT_INPUT

    model = fit_preprocess(samples, agg)
    matrix = encode(samples, model)
    save_matrix(matrix, args.out_dir / "matrix.csfm")
    model.save(args.out_dir / "preprocess_model.json")
    positives = int(matrix.y.sum())
    print(
        f"encoded {matrix.n_rows} samples x {matrix.n_cols} columns "
        f"({len(matrix.group_names())} source features, "
        f"{positives} severe / {matrix.n_rows - positives} non-severe)"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    if not args.config:
        raise _UsageError("run requires --config")
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.subset_plan = type(cfg.subset_plan)(
            n_subsets=cfg.subset_plan.n_subsets,
            subset_size=cfg.subset_plan.subset_size,
            seed=spawn_seed(cfg.seed, "subsets"),
            disjoint=cfg.subset_plan.disjoint,
        )
        cfg.cv_plan = type(cfg.cv_plan)(
            **{**cfg.cv_plan.__dict__, "seed": spawn_seed(cfg.seed, "cv")}
        )
    if args.max_workers is not None:
        cfg.max_workers = args.max_workers
    overrides = {
        "k": args.folds,
        "drop_margin": args.drop_margin,
        "drop_min_folds": args.drop_min_folds,
        "stop_epsilon": args.stop_epsilon,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg.cv_plan = type(cfg.cv_plan)(**{**cfg.cv_plan.__dict__, **overrides})
    if args.matrix:
        cfg.matrix_path = args.matrix
    if args.out_dir:
        cfg.out_dir = args.out_dir

    space = enumerate_search_space(cfg.grid)
    if args.dry_run:
        summary = space.summary()
        print(
            f"search space: {summary['total_enumerated']} configurations "
            f"({summary['runnable']} runnable, {summary['marked_unsupported']} unsupported"
            + (
                f"; declared total {summary['declared_total']}"
                f"{'' if summary['matches_declared'] else ' does not match'})"
                if summary["declared_total"] is not None
                else ")"
            )
        )
        return EXIT_OK

    if not cfg.matrix_path or not Path(cfg.matrix_path).exists():
        print(f"feature matrix not found: {cfg.matrix_path}", file=sys.stderr)
        return EXIT_INPUT
    matrix = load_matrix(cfg.matrix_path)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    progress_fh = open(cfg.out_dir / "progress.jsonl", "a", encoding="utf-8")

    def progress(record: dict) -> None:
        progress_fh.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        final = run_protocol(
            matrix,
            cfg.subset_plan,
            space,
            cfg.cv_plan,
            stability_threshold=cfg.stability_threshold,
            final_learner=cfg.final_learner(),
            class_weights=cfg.effective_class_weights(),
            out_dir=cfg.out_dir,
            resume=args.resume,
            max_workers=cfg.max_workers,
            progress=progress,
        )
    finally:
        progress_fh.close()

    report = dict(final.report)
    report["run_config"] = cfg.dump()

    save_model(final.final_model, cfg.out_dir / "final_model.json")
    with open(cfg.out_dir / "stability_matrix.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(final.stability.matrix_lines()) + "\n")

    train_matrix = matrix.take_rows(final.train_indices).take_groups(final.stable_features)
    if isinstance(final.final_model, LinearModel):
        shap = linear_shap(final.final_model, train_matrix.X, train_matrix.columns)
        table = variable_importance(shap)
        export_summary_plot(
            shap,
            train_matrix.X,
            final.stable_features,
            cfg.out_dir / "plotdata.csv",
            svg_path=cfg.out_dir / "summary_plot.svg",
            seed=spawn_seed(cfg.seed, "plot"),
        )
    else:
        table = permutation_importance(
            final.final_model,
            train_matrix.X,
            train_matrix.y,
            train_matrix.columns,
            seed=spawn_seed(cfg.seed, "plot"),
        )
    write_importance_csv(table, cfg.out_dir / "importance.csv")
    report["explanation_method"] = table.method
    _write_json(cfg.out_dir / "report.json", report)
    _write_json(
        cfg.out_dir / "run_meta.json",
        {"generated_at": datetime.now(timezone.utc).isoformat(), "version": __version__},
    )

    print(
        f"run complete: {len(final.stable_features)} stable features, "
        f"train AUC {final.train_auc:.4f}, holdout AUC {final.holdout_auc:.4f} "
        f"CI [{final.holdout_estimate.ci_low:.4f}, {final.holdout_estimate.ci_high:.4f}]"
    )
    return EXIT_OK


def cmd_explain(args) -> int:
    model = load_model(args.model)
    matrix = load_matrix(args.matrix)
    args.out_dir.mkdir(parents=True, exist_ok=True)

    # align the matrix to the model's training columns, by name
    name_to_idx = {c.name: i for i, c in enumerate(matrix.columns)}
    model_names = getattr(model, "column_names", [c.name for c in matrix.columns])
    missing = [n for n in model_names if n not in name_to_idx]
    if missing:
        print(f"matrix lacks model columns: {', '.join(missing[:5])}", file=sys.stderr)
        return EXIT_INPUT
    idx = [name_to_idx[n] for n in model_names]
    X = matrix.X[:, idx]
    columns = [matrix.columns[i] for i in idx]

    features = (
        sorted({c.source for c in columns})
        if args.features.strip() == "all"
        else [f.strip() for f in args.features.split(",") if f.strip()]
    )

    if isinstance(model, LinearModel):
        shap = linear_shap(model, X, columns)
        table = variable_importance(shap)
        try:
            export_summary_plot(
                shap,
                X,
                features,
                args.out_dir / "plotdata.csv",
                svg_path=(args.out_dir / "summary_plot.svg") if args.svg else None,
                seed=spawn_seed(args.seed or 0, "plot"),
            )
        except KeyError as exc:
            print(str(exc.args[0]) if exc.args else str(exc), file=sys.stderr)
            return EXIT_USAGE
    else:
        table = permutation_importance(
            model, X, matrix.y, columns, seed=spawn_seed(args.seed or 0, "plot")
        )
        print("final model is not linear: wrote permutation importance instead of attributions")
    write_importance_csv(table, args.out_dir / "importance.csv")
    print(f"wrote importance for {len(table.ranking)} features to {args.out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    report_path = args.run_dir / "report.json"
    if not report_path.exists():
        print(f"no report.json under {args.run_dir}", file=sys.stderr)
        return EXIT_INPUT
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)

    print("== configuration search ==")
    ss = report["search_space"]
    print(
        f"configurations: {ss['total_enumerated']} enumerated, {ss['runnable']} runnable, "
        f"{ss['marked_unsupported']} unsupported; declared total: {ss['declared_total']}"
        + ("" if ss["matches_declared"] else " (MISMATCH, recorded)")
    )
    print()
    print("== per-subset winners ==")
    for sub in report["subsets"]:
        est = sub["estimate"]
        print(
            f"subset {sub['index'] + 1}: {sub['winner']['selector']} + {sub['winner']['learner']}"
            f"  AUC {est['point']:.4f} CI [{est['ci_low']:.4f}, {est['ci_high']:.4f}]"
            f"  ({sub['fitted_models']} models over {sub['folds_completed']} folds, "
            f"{len(sub['signature'])} features)"
        )
    print()
    print("== stability ==")
    stab = report["stability"]
    run_sets = [set(r) for r in stab["runs"]]
    counts = stab["counts"]
    for f in sorted(counts, key=lambda f: (-counts[f], f)):
        marks = " ".join("x" if f in rs else "." for rs in run_sets)
        stable = "*" if f in set(report["stable_features"]) else " "
        print(f"  {stable} {f:<36} {marks}  {counts[f]}/{stab['n_runs']}")
    print()
    final = report["final"]
    print("== final model ==")
    print(
        f"{final['learner']} on {len(report['stable_features'])} stable features: "
        f"train AUC {final['train_auc']:.4f} ({final['n_train']} rows), "
        f"holdout AUC {final['holdout_auc']:.4f} "
        f"CI [{final['holdout_ci'][0]:.4f}, {final['holdout_ci'][1]:.4f}] "
        f"({final['n_holdout']} rows)"
    )
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    handlers = {
        "curate": cmd_curate,
        "preprocess": cmd_preprocess,
        "run": cmd_run,
        "explain": cmd_explain,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (HoldoutViolation,) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
