"""Run configuration: a single INI-style file (key = value with sections)
parsed into the plans and grids the pipeline consumes, and dumped verbatim
into the run report for provenance.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .orchestrate import SubsetPlan
from .rng import spawn_seed
from .tune import CVPlan, ForestLearner, RidgeLearner, SearchGrid, TreeLearner

__all__ = ["RunConfig", "ConfigError"]


class ConfigError(Exception):
    """The run configuration is missing or malformed."""


_SEARCH_LIST_KEYS = (
    "ses_kmax",
    "ses_alpha",
    "lasso_penalty",
    "univariate_alpha",
    "epilogi_threshold",
    "ridge_lambda",
    "tree_min_leaf",
    "tree_alpha",
    "forest_n_trees",
    "forest_min_leaf",
)


@dataclass
class RunConfig:
    input_path: Optional[Path] = None
    schema_path: Optional[Path] = None
    curated_path: Optional[Path] = None
    matrix_path: Optional[Path] = None
    out_dir: Path = Path("out")
    seed: int = 0
    max_workers: int = 1
    class_weights: Optional[tuple[float, float]] = None  # None = balanced
    use_class_weights: bool = True
    subset_plan: SubsetPlan = field(default_factory=SubsetPlan)
    cv_plan: CVPlan = field(default_factory=CVPlan)
    grid: SearchGrid = field(default_factory=SearchGrid)
    stability_threshold: float = 0.75
    final_learner_spec: dict = field(default_factory=lambda: {"learner": "ridge", "lambda": 1.0})
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")

        cfg = cls()
        cfg.raw = {s: dict(parser.items(s)) for s in parser.sections()}

        if parser.has_section("paths"):
            p = parser["paths"]
            cfg.input_path = Path(p["input"]) if p.get("input") else None
            cfg.schema_path = Path(p["schema"]) if p.get("schema") else None
            cfg.curated_path = Path(p["curated"]) if p.get("curated") else None
            cfg.matrix_path = Path(p["matrix"]) if p.get("matrix") else None
            if p.get("out_dir"):
                cfg.out_dir = Path(p["out_dir"])

        if parser.has_section("run"):
            r = parser["run"]
            cfg.seed = r.getint("seed", cfg.seed)
            cfg.max_workers = r.getint("max_workers", cfg.max_workers)
            weights = r.get("class_weights", "balanced").strip()
            if weights == "none":
                cfg.use_class_weights = False
                cfg.class_weights = (1.0, 1.0)
            elif weights and weights != "balanced":
                try:
                    w_neg, w_pos = (float(v) for v in weights.split(","))
                except ValueError as exc:
                    raise ConfigError(f"bad class_weights {weights!r}") from exc
                cfg.class_weights = (w_neg, w_pos)

        if parser.has_section("subsets"):
            s = parser["subsets"]
            cfg.subset_plan = SubsetPlan(
                n_subsets=s.getint("n_subsets", 4),
                subset_size=s.getint("subset_size", 55_000),
                seed=spawn_seed(cfg.seed, "subsets"),
                disjoint=s.getboolean("disjoint", True),
            )
        else:
            cfg.subset_plan = SubsetPlan(seed=spawn_seed(cfg.seed, "subsets"))

        cv_kwargs: dict = {"seed": spawn_seed(cfg.seed, "cv")}
        if parser.has_section("cv"):
            c = parser["cv"]
            cv_kwargs["k"] = c.getint("folds", 10)
            cv_kwargs["repeats"] = c.getint("repeats", 1)
            if c.get("n_complete"):
                cv_kwargs["n_complete"] = c.getint("n_complete")
            if c.get("drop_margin", "").strip() == "none":
                cv_kwargs["drop_margin"] = None
            elif c.get("drop_margin"):
                cv_kwargs["drop_margin"] = c.getfloat("drop_margin")
            cv_kwargs["drop_min_folds"] = c.getint("drop_min_folds", 3)
            if c.get("stop_epsilon", "").strip() == "none":
                cv_kwargs["stop_epsilon"] = None
            elif c.get("stop_epsilon"):
                cv_kwargs["stop_epsilon"] = c.getfloat("stop_epsilon")
            cv_kwargs["bbc_boot"] = c.getint("bbc_boot", 500)
            cv_kwargs["bbc_ci"] = c.getfloat("bbc_ci", 0.95)
        cfg.cv_plan = CVPlan(**cv_kwargs)

        if parser.has_section("search"):
            s = parser["search"]
            grid_dict: dict = {}
            for key in _SEARCH_LIST_KEYS:
                if s.get(key) is not None:
                    try:
                        grid_dict[key] = json.loads(s[key])
                    except json.JSONDecodeError as exc:
                        raise ConfigError(f"search.{key} is not a JSON list") from exc
            if s.get("include_no_selector") is not None:
                grid_dict["include_no_selector"] = s.getboolean("include_no_selector")
            if s.get("declared_total", "").strip():
                grid_dict["declared_total"] = s.getint("declared_total")
            elif "declared_total" in s:
                grid_dict["declared_total"] = None
            cfg.grid = SearchGrid.from_dict(grid_dict) if grid_dict else SearchGrid()

        if parser.has_section("stability"):
            cfg.stability_threshold = parser["stability"].getfloat("threshold", 0.75)

        if parser.has_section("final"):
            f = parser["final"]
            cfg.final_learner_spec = {"learner": f.get("learner", "ridge")}
            for key in ("lambda", "min_leaf", "alpha", "n_trees"):
                if f.get(key):
                    cfg.final_learner_spec[key] = float(f[key])
        return cfg

    def final_learner(self):
        spec = self.final_learner_spec
        kind = spec.get("learner", "ridge")
        if kind == "ridge":
            return RidgeLearner(lam=float(spec.get("lambda", 1.0)))
        if kind == "tree":
            return TreeLearner(
                min_leaf=int(spec.get("min_leaf", 5)), alpha_prune=float(spec.get("alpha", 0.05))
            )
        if kind == "forest":
            return ForestLearner(
                n_trees=int(spec.get("n_trees", 100)), min_leaf=int(spec.get("min_leaf", 5))
            )
        raise ConfigError(f"unknown final learner {kind!r}")

    def effective_class_weights(self):
        """None means balanced (inverse class frequency) downstream."""
        return self.class_weights if not self.use_class_weights or self.class_weights else None

    def dump(self) -> dict:
        return {
            "seed": self.seed,
            "max_workers": self.max_workers,
            "stability_threshold": self.stability_threshold,
            "final_learner": self.final_learner_spec,
            "raw": self.raw,
        }
