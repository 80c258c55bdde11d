"""Vehicle-level sample construction and model-ready encoding.

Curated person rows are aggregated to one sample per unit (target = most
severe injury among the unit's occupants), filtered to passenger-like
vehicles, then imputed and encoded: numeric pass-through with mean
imputation, cyclical sin/cos pairs, and one-hot blocks over training-time
vocabularies with an explicit "missing" level.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .ingest import PersonRow, PersonType, SeverityClass, max_severity

log = logging.getLogger(__name__)

__all__ = [
    "SEVERE",
    "NON_SEVERE",
    "VehicleSample",
    "AggregationConfig",
    "PreprocessModel",
    "ColumnInfo",
    "FeatureMatrix",
    "binarize_severity",
    "build_vehicle_samples",
    "filter_passenger_vehicles",
    "drop_postcrash_features",
    "fit_preprocess",
    "encode",
    "save_matrix",
    "load_matrix",
]

SEVERE = "Severe"
NON_SEVERE = "NonSevere"

MISSING_LEVEL = "missing"
NONE_LEVEL = "none"


def binarize_severity(s: SeverityClass) -> str:
    """Severe = {SuspectedSeriousInjury, Fatal}; the other three are NonSevere."""
    if s is SeverityClass.UNKNOWN:
        raise ValueError("Unknown severity cannot be binarized")
    if s in (SeverityClass.SUSPECTED_SERIOUS_INJURY, SeverityClass.FATAL):
        return SEVERE
    return NON_SEVERE


@dataclass
class VehicleSample:
    """One aggregated vehicle-level record with its binary severity target."""

    crash_id: str
    unit_vin: str
    target: str
    numeric_features: dict[str, Optional[float]]
    categorical_features: dict[str, str]

    def __post_init__(self) -> None:
        occ = self.numeric_features.get("NumberOfOccupants")
        if occ is not None and occ < 1:
            raise ValueError("NumberOfOccupants must be at least 1")


def _norm_type(value: str) -> str:
    return "".join(ch for ch in value.casefold() if ch.isalnum())


DEFAULT_PASSENGER_TYPES = frozenset(
    {"passengercar", "suv", "multipurposepassengervehicle", "multipurposepassengervehiclempv"}
)

DEFAULT_POSTCRASH_DENYLIST = (
    "MostHarmfulEvent",
    "NumberOfFatalities",
    "NumberOfInjuries",
    "CrashSeverity",
)


@dataclass
class AggregationConfig:
    """Which raw columns become vehicle features, and how."""

    numeric_attrs: tuple[str, ...] = ("PostedSpeed",)
    categorical_attrs: tuple[str, ...] = (
        "DriverCondition",
        "DriverDistraction",
        "DriverGender",
        "Belted",
        "Location",
        "RoadContour",
        "AnimalRelated",
        "ContributingCircumstance",
        "PreCrashAction",
        "AlcoholRelated",
        "DrugRelated",
    )
    cyclical_periods: dict[str, float] = field(
        default_factory=lambda: {"CrashMonth": 12.0, "CrashWeekDay": 7.0, "CrashTime24h": 24.0}
    )
    passenger_types: frozenset = DEFAULT_PASSENGER_TYPES
    postcrash_denylist: tuple[str, ...] = DEFAULT_POSTCRASH_DENYLIST
    n_interacting_slots: int = 5

    @classmethod
    def from_file(cls, path) -> "AggregationConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        cfg = cls()
        if "numeric_attrs" in raw:
            cfg.numeric_attrs = tuple(raw["numeric_attrs"])
        if "categorical_attrs" in raw:
            cfg.categorical_attrs = tuple(raw["categorical_attrs"])
        if "cyclical_periods" in raw:
            cfg.cyclical_periods = {k: float(v) for k, v in raw["cyclical_periods"].items()}
        if "passenger_types" in raw:
            cfg.passenger_types = frozenset(_norm_type(v) for v in raw["passenger_types"])
        if "postcrash_denylist" in raw:
            cfg.postcrash_denylist = tuple(raw["postcrash_denylist"])
        if "n_interacting_slots" in raw:
            cfg.n_interacting_slots = int(raw["n_interacting_slots"])
        return cfg


def _time_of_day_hours(crash_time: Optional[str]) -> Optional[float]:
    """'HH:MM' (or 'HH:MM:SS') to fractional hours."""
    if not crash_time:
        return None
    parts = crash_time.strip().split(":")
    try:
        hours = int(parts[0])
        minutes = int(parts[1]) if len(parts) > 1 else 0
    except (ValueError, IndexError):
        return None
    return hours + minutes / 60.0


def _parse_float(value: str) -> Optional[float]:
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


def build_vehicle_samples(
    rows: Sequence[PersonRow],
    config: Optional[AggregationConfig] = None,
) -> list[VehicleSample]:
    """Aggregate curated person rows into one sample per unit.

    The target is the most severe injury among the unit's occupants;
    driver attributes copy onto the vehicle record; occupant ages collapse
    to min/mean/max; up to five other units in the crash fill interacting
    type/model/year slots ordered by VIN, absent slots reading "none".
    Units whose severities are all Unknown are excluded.
    """
    cfg = config or AggregationConfig()
    units: dict[tuple[str, str], list[PersonRow]] = {}
    for row in rows:
        units.setdefault(row.unit_key, []).append(row)
    crash_units: dict[str, list[tuple[str, str]]] = {}
    for key in units:
        crash_units.setdefault(key[0], []).append(key)
    for keys in crash_units.values():
        keys.sort(key=lambda k: (units[k][0].unit_vin, k[1]))

    samples: list[VehicleSample] = []
    for key in sorted(units):
        persons = units[key]
        drivers = [p for p in persons if p.person_type is PersonType.DRIVER]
        if len(drivers) != 1:
            log.warning("unit %s skipped: %d drivers after curation", key, len(drivers))
            continue
        driver = drivers[0]
        worst = max_severity(p.severity for p in persons)
        if worst is None:
            log.info("unit %s excluded: all severities Unknown", key)
            continue

        ages = [
            float(p.reported_age)
            for p in persons
            if p.reported_age is not None and not p.age_invalid
        ]
        numeric: dict[str, Optional[float]] = {
            "DriverAge": (
                float(driver.reported_age)
                if driver.reported_age is not None and not driver.age_invalid
                else None
            ),
            "OccupantsMinAge": min(ages) if ages else None,
            "OccupantsMeanAge": sum(ages) / len(ages) if ages else None,
            "OccupantsMaxAge": max(ages) if ages else None,
            "NumberOfOccupants": float(len(persons)),
            "VehicleYear": float(driver.vehicle_year) if driver.vehicle_year else None,
        }
        for attr in cfg.numeric_attrs:
            numeric[attr] = _parse_float(driver.raw_attributes.get(attr, ""))
        if "CrashMonth" in cfg.cyclical_periods:
            numeric["CrashMonth"] = float(driver.crash_date.month) if driver.crash_date else None
        if "CrashWeekDay" in cfg.cyclical_periods:
            numeric["CrashWeekDay"] = (
                float(driver.crash_date.weekday()) if driver.crash_date else None
            )
        if "CrashTime24h" in cfg.cyclical_periods:
            numeric["CrashTime24h"] = _time_of_day_hours(driver.crash_time)

        categorical: dict[str, str] = {"UnitType": driver.unit_type}
        for attr in cfg.categorical_attrs:
            categorical[attr] = driver.raw_attributes.get(attr, "").strip()

        others = [k for k in crash_units[key[0]] if k != key][: cfg.n_interacting_slots]
        for slot in range(1, cfg.n_interacting_slots + 1):
            if slot <= len(others):
                lead = units[others[slot - 1]][0]
                categorical[f"InteractingUnitType{slot}"] = lead.unit_type or MISSING_LEVEL
                categorical[f"InteractingVehicleModel{slot}"] = lead.vehicle_model or MISSING_LEVEL
                categorical[f"InteractingVehicleYear{slot}"] = (
                    str(lead.vehicle_year) if lead.vehicle_year else MISSING_LEVEL
                )
            else:
                categorical[f"InteractingUnitType{slot}"] = NONE_LEVEL
                categorical[f"InteractingVehicleModel{slot}"] = NONE_LEVEL
                categorical[f"InteractingVehicleYear{slot}"] = NONE_LEVEL

        samples.append(
            VehicleSample(
                crash_id=key[0],
                unit_vin=persons[0].unit_vin,
                target=binarize_severity(worst),
                numeric_features=numeric,
                categorical_features=categorical,
            )
        )
    return samples


def filter_passenger_vehicles(
    samples: Iterable[VehicleSample],
    passenger_types: frozenset = DEFAULT_PASSENGER_TYPES,
) -> list[VehicleSample]:
    """Keep samples whose own unit type is passenger-like.

    Interacting-unit slots keep all vehicle types; only the subject vehicle
    is filtered.
    """
    return [
        s
        for s in samples
        if _norm_type(s.categorical_features.get("UnitType", "")) in passenger_types
    ]


def drop_postcrash_features(
    feature_names: Sequence[str],
    denylist: Sequence[str] = DEFAULT_POSTCRASH_DENYLIST,
) -> tuple[list[str], list[str]]:
    """Remove post-crash outcome columns before any modeling.

    Returns (kept, removed); a denylisted name absent from the schema only
    warns.
    """
    names = set(feature_names)
    removed = [d for d in denylist if d in names]
    for d in denylist:
        if d not in names:
            log.warning("post-crash denylist entry %r not present in schema", d)
    kept = [n for n in feature_names if n not in set(removed)]
    if removed:
        log.info("dropped post-crash columns: %s", ", ".join(removed))
    return kept, removed


# ---------------------------------------------------------------------------
# Fitted preprocessing model

PREPROCESS_FORMAT_VERSION = 1


@dataclass
class PreprocessModel:
    """Imputation means, vocabularies, and cyclical periods fitted on training rows."""

    numeric_order: list[str]
    cyclical_order: list[str]
    categorical_order: list[str]
    numeric_means: dict[str, float]
    vocabularies: dict[str, list[str]]
    cyclical_periods: dict[str, float]
    dropped_numeric: list[str]
    removed_postcrash: list[str]
    version: int = PREPROCESS_FORMAT_VERSION

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PreprocessModel":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if raw.get("version") != PREPROCESS_FORMAT_VERSION:
            raise ValueError(f"unsupported preprocess model version {raw.get('version')!r}")
        return cls(**raw)


def fit_preprocess(
    samples: Sequence[VehicleSample],
    config: Optional[AggregationConfig] = None,
) -> PreprocessModel:
    """Fit imputation means and vocabularies on training samples only."""
    if not samples:
        raise ValueError("cannot fit preprocessing on zero samples")
    cfg = config or AggregationConfig()

    numeric_names = sorted({n for s in samples for n in s.numeric_features})
    categorical_names = sorted({n for s in samples for n in s.categorical_features})
    numeric_names, removed_num = drop_postcrash_features(numeric_names, cfg.postcrash_denylist)
    categorical_names, removed_cat = drop_postcrash_features(
        categorical_names, cfg.postcrash_denylist
    )

    cyclical = [n for n in numeric_names if n in cfg.cyclical_periods]
    plain_numeric = [n for n in numeric_names if n not in cfg.cyclical_periods]

    means: dict[str, float] = {}
    dropped: list[str] = []
    for name in plain_numeric + cyclical:
        values = [
            s.numeric_features[name]
            for s in samples
            if s.numeric_features.get(name) is not None
        ]
        if not values:
            dropped.append(name)
            log.warning("numeric column %r is all-missing on training rows; dropped", name)
            continue
        means[name] = float(sum(values) / len(values))

    # a "missing" level exists only where missing values were actually seen,
    # so a fully observed feature one-hots into exactly its observed levels
    vocabularies: dict[str, list[str]] = {}
    for name in categorical_names:
        levels = {
            s.categorical_features.get(name, "").strip() or MISSING_LEVEL for s in samples
        }
        vocabularies[name] = sorted(levels)

    return PreprocessModel(
        numeric_order=[n for n in plain_numeric if n not in dropped],
        cyclical_order=[n for n in cyclical if n not in dropped],
        categorical_order=categorical_names,
        numeric_means=means,
        vocabularies=vocabularies,
        cyclical_periods={n: cfg.cyclical_periods[n] for n in cyclical},
        dropped_numeric=dropped,
        removed_postcrash=sorted(set(removed_num) | set(removed_cat)),
    )


# ---------------------------------------------------------------------------
# Encoded matrix


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    kind: str  # numeric | onehot | cyc_sin | cyc_cos
    source: str
    level: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "source": self.source, "level": self.level}


class FeatureMatrix:
    """Row-major float64 design matrix with column descriptors and 0/1 labels."""

    def __init__(self, X: np.ndarray, y: np.ndarray, columns: list[ColumnInfo]):
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int8)
        if X.ndim != 2 or X.shape[0] != y.size or X.shape[1] != len(columns):
            raise ValueError("matrix, labels, and descriptors disagree on shape")
        self.X = X
        self.y = y
        self.columns = list(columns)
        self._row_hook = None  # set by the orchestrator to track row access

    @classmethod
    def from_arrays(cls, X, y, names: Optional[Sequence[str]] = None) -> "FeatureMatrix":
        X = np.asarray(X, dtype=np.float64)
        if names is None:
            width = len(str(max(X.shape[1] - 1, 0)))
            names = [f"f{i:0{width}d}" for i in range(X.shape[1])]
        cols = [ColumnInfo(name=n, kind="numeric", source=n) for n in names]
        return cls(X, y, cols)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]

    def group_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for c in self.columns:
            seen.setdefault(c.source, None)
        return list(seen)

    def group_columns(self, source: str) -> np.ndarray:
        idx = np.array([i for i, c in enumerate(self.columns) if c.source == source], dtype=np.intp)
        if idx.size == 0:
            raise KeyError(f"no columns for source feature {source!r}")
        return idx

    def take_rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.intp)
        if self._row_hook is not None:
            self._row_hook(idx)
        return FeatureMatrix(self.X[idx], self.y[idx], self.columns)

    def take_groups(self, sources: Sequence[str]) -> "FeatureMatrix":
        cols: list[int] = []
        for s in sources:
            cols.extend(self.group_columns(s).tolist())
        return FeatureMatrix(self.X[:, cols], self.y, [self.columns[i] for i in cols])


def encode(samples: Sequence[VehicleSample], model: PreprocessModel) -> FeatureMatrix:
    """Apply a fitted PreprocessModel: impute, cyclical-transform, one-hot.

    Unseen categorical levels produce an all-zero block (counted and logged);
    in-vocabulary encoding is lossless.
    """
    n = len(samples)
    columns: list[ColumnInfo] = []
    blocks: list[np.ndarray] = []

    for name in model.numeric_order:
        mean = model.numeric_means[name]
        col = np.array(
            [
                s.numeric_features.get(name) if s.numeric_features.get(name) is not None else mean
                for s in samples
            ],
            dtype=np.float64,
        )
        blocks.append(col[:, None])
        columns.append(ColumnInfo(name=name, kind="numeric", source=name))

    for name in model.cyclical_order:
        mean = model.numeric_means[name]
        period = model.cyclical_periods[name]
        raw = np.array(
            [
                s.numeric_features.get(name) if s.numeric_features.get(name) is not None else mean
                for s in samples
            ],
            dtype=np.float64,
        )
        angle = 2.0 * math.pi * raw / period
        blocks.append(np.sin(angle)[:, None])
        columns.append(ColumnInfo(name=f"{name}#sin", kind="cyc_sin", source=name))
        blocks.append(np.cos(angle)[:, None])
        columns.append(ColumnInfo(name=f"{name}#cos", kind="cyc_cos", source=name))

    unseen = 0
    for name in model.categorical_order:
        vocab = model.vocabularies[name]
        index = {lvl: j for j, lvl in enumerate(vocab)}
        block = np.zeros((n, len(vocab)), dtype=np.float64)
        for i, s in enumerate(samples):
            level = s.categorical_features.get(name, "").strip() or MISSING_LEVEL
            j = index.get(level)
            if j is None:
                unseen += 1
                continue
            block[i, j] = 1.0
        blocks.append(block)
        for lvl in vocab:
            columns.append(ColumnInfo(name=f"{name}={lvl}", kind="onehot", source=name, level=lvl))

    if unseen:
        log.info("encode: %d categorical values outside the training vocabulary", unseen)

    X = np.hstack(blocks) if blocks else np.empty((n, 0))
    y = np.array([1 if s.target == SEVERE else 0 for s in samples], dtype=np.int8)
    return FeatureMatrix(X, y, columns)


# ---------------------------------------------------------------------------
# Matrix persistence: magic "CSFM1", little-endian counts, float64 payload

MATRIX_MAGIC = b"CSFM1"


def save_matrix(matrix: FeatureMatrix, path) -> None:
    """Binary columnar file plus a sidecar .desc.json descriptor."""
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", matrix.n_cols, matrix.n_rows))
        fh.write(matrix.X.astype("<f8").tobytes(order="C"))
        fh.write(matrix.y.astype("<f8").tobytes())
    desc = {
        "version": 1,
        "n_rows": matrix.n_rows,
        "n_cols": matrix.n_cols,
        "columns": [c.to_dict() for c in matrix.columns],
        "label": {"positive": SEVERE, "negative": NON_SEVERE},
    }
    with open(path + ".desc.json", "w", encoding="utf-8") as fh:
        json.dump(desc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_matrix(path) -> FeatureMatrix:
    path = str(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MATRIX_MAGIC))
        if magic != MATRIX_MAGIC:
            raise ValueError(f"not a feature-matrix file: bad magic {magic!r}")
        n_cols, n_rows = struct.unpack("<QQ", fh.read(16))
        X = np.frombuffer(fh.read(8 * n_rows * n_cols), dtype="<f8").reshape(n_rows, n_cols)
        y = np.frombuffer(fh.read(8 * n_rows), dtype="<f8").astype(np.int8)
    with open(path + ".desc.json", "r", encoding="utf-8") as fh:
        desc = json.load(fh)
    columns = [
        ColumnInfo(name=c["name"], kind=c["kind"], source=c["source"], level=c.get("level", ""))
        for c in desc["columns"]
    ]
    return FeatureMatrix(X.copy(), y, columns)
