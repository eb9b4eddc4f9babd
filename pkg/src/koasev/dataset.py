"""Cohort ingestion and preprocessing.

A cohort is one row per knee (two rows per patient) with a typed schema.
The preprocessing chain is::

    load_cohort -> filter_columns -> build_design -> split_patients

Schema files are plain text, one column per line::

    name|kind|role[|cat1,cat2,...]

with ``kind`` in {numeric, binary, categorical} and ``role`` in
{predictor, response, patient_id, knee_side}. Lines starting with ``#`` are
ignored. Categorical cells are stored as integer codes into the ordered
category list, ``-1`` marking a missing cell; numeric cells are floats with
``nan`` for missing.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("numeric", "binary", "categorical")
ROLES = ("predictor", "response", "patient_id", "knee_side")
MISSING_TOKENS = ("", "NA")
KNEE_SIDES = ("left", "right")
SEVERITY_LEVELS = (0, 1, 2, 3, 4)

DROP_REPORT_COLUMNS = ("column", "reason", "missing_frac", "minor_frac")


class CohortError(ValueError):
    """Raised for malformed cohort data or schema."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    role: str
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CohortError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise CohortError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.kind == "binary" and self.categories is None:
            object.__setattr__(self, "categories", ("0", "1"))
        if self.kind == "binary" and len(self.categories) != 2:
            raise CohortError(f"binary column {self.name!r} needs exactly 2 categories")
        if self.kind == "categorical" and self.role == "predictor":
            if self.categories is None or len(self.categories) < 2:
                raise CohortError(f"categorical column {self.name!r} needs >= 2 categories")

    @property
    def is_coded(self) -> bool:
        return self.kind in ("binary", "categorical") and self.role == "predictor"

    def to_line(self) -> str:
        parts = [self.name, self.kind, self.role]
        if self.categories is not None and self.role == "predictor" and self.kind != "numeric":
            parts.append(",".join(self.categories))
        return "|".join(parts)


def _check_schema(schema):
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise CohortError("duplicate column names in schema")
    for role in ("response", "patient_id", "knee_side"):
        n = sum(c.role == role for c in schema)
        if n != 1:
            raise CohortError(f"schema needs exactly one {role} column, found {n}")


def parse_schema(text: str) -> tuple[ColumnSpec, ...]:
    schema = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|")
        if len(parts) not in (3, 4):
            raise CohortError(f"schema line {lineno}: expected name|kind|role[|cats]")
        cats = tuple(s.strip() for s in parts[3].split(",")) if len(parts) == 4 else None
        schema.append(ColumnSpec(parts[0].strip(), parts[1].strip(), parts[2].strip(), cats))
    _check_schema(schema)
    return tuple(schema)


def format_schema(schema) -> str:
    return "".join(c.to_line() + "\n" for c in schema)


@dataclass(frozen=True)
class Cohort:
    """Typed cohort; ``data`` maps column name to a 1-D array."""

    schema: tuple[ColumnSpec, ...]
    data: dict = field(repr=False)

    def __post_init__(self):
        _check_schema(self.schema)

    @property
    def n_rows(self) -> int:
        return len(self.data[self.schema[0].name])

    def spec(self, name: str) -> ColumnSpec:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(name)

    def _role(self, role) -> ColumnSpec:
        return next(c for c in self.schema if c.role == role)

    @property
    def response(self) -> str:
        return self._role("response").name

    @property
    def predictors(self) -> list[str]:
        return [c.name for c in self.schema if c.role == "predictor"]

    @property
    def patient_ids(self) -> np.ndarray:
        return self.data[self._role("patient_id").name]

    @property
    def knee_sides(self) -> np.ndarray:
        return self.data[self._role("knee_side").name]

    @property
    def y(self) -> np.ndarray:
        return self.data[self.response]

    def missing_mask(self, name: str) -> np.ndarray:
        col = self.data[name]
        if self.spec(name).is_coded:
            return col < 0
        if col.dtype.kind == "f":
            return np.isnan(col)
        return np.zeros(len(col), dtype=bool)

    def subset(self, rows) -> "Cohort":
        rows = np.asarray(rows)
        return Cohort(self.schema, {k: v[rows] for k, v in self.data.items()})

    def select_columns(self, names) -> "Cohort":
        keep = set(names)
        schema = tuple(c for c in self.schema if c.role != "predictor" or c.name in keep)
        return Cohort(schema, {c.name: self.data[c.name] for c in schema})


def _parse_cell(spec: ColumnSpec, raw: str, lineno: int):
    if raw in MISSING_TOKENS:
        return None
    if spec.role in ("patient_id", "knee_side"):
        return raw
    if spec.is_coded:
        try:
            return spec.categories.index(raw)
        except ValueError:
            raise CohortError(
                f"line {lineno}: {raw!r} is not a category of {spec.name!r}"
            ) from None
    try:
        return float(raw)
    except ValueError:
        raise CohortError(f"line {lineno}: cannot parse {raw!r} in column {spec.name!r}") from None


def _validate_keys(cohort: Cohort):
    ids = cohort.patient_ids
    sides = cohort.knee_sides
    seen = {}
    for pid, side in zip(ids, sides):
        if pid is None or pid == "":
            raise CohortError("missing patient id")
        if side not in KNEE_SIDES:
            raise CohortError(f"knee side {side!r} for patient {pid!r} not in {KNEE_SIDES}")
        knees = seen.setdefault(pid, set())
        if side in knees:
            raise CohortError(f"duplicate knee: patient {pid!r} has two {side!r} rows")
        knees.add(side)
    y = cohort.y
    bad = ~np.isnan(y) & ~np.isin(y, SEVERITY_LEVELS)
    if bad.any():
        raise CohortError(f"response out of range: {y[bad][0]!r} not in 0..4")


def cohort_from_records(schema, records) -> Cohort:
    """Build a cohort from already-typed per-column lists (codes, floats, strings)."""
    schema = tuple(schema)
    data = {}
    for c in schema:
        col = records[c.name]
        if c.role in ("patient_id", "knee_side"):
            data[c.name] = np.array(col, dtype=object)
        elif c.is_coded:
            data[c.name] = np.array([-1 if v is None else v for v in col], dtype=np.int64)
        else:
            data[c.name] = np.array([np.nan if v is None else v for v in col], dtype=float)
    cohort = Cohort(schema, data)
    _validate_keys(cohort)
    return cohort


def load_cohort(data_path, schema_path) -> Cohort:
    schema = parse_schema(Path(schema_path).read_text(encoding="utf-8"))
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CohortError("empty data file")
        header = [h.strip() for h in header]
        names = [c.name for c in schema]
        if sorted(header) != sorted(names) or len(header) != len(set(header)):
            missing = set(names) - set(header)
            extra = set(header) - set(names)
            raise CohortError(
                f"schema/CSV column mismatch (missing: {sorted(missing)}, extra: {sorted(extra)})"
            )
        pos = {h: i for i, h in enumerate(header)}
        records = {n: [] for n in names}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise CohortError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            for c in schema:
                records[c.name].append(_parse_cell(c, row[pos[c.name]].strip(), lineno))
    return cohort_from_records(schema, records)


def write_cohort(cohort: Cohort, data_path, schema_path=None):
    """Write a cohort back to CSV (and optionally its schema)."""
    from .textio import atomic_writer, fmt

    names = [c.name for c in cohort.schema]
    with atomic_writer(data_path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(cohort.n_rows):
            row = []
            for c in cohort.schema:
                v = cohort.data[c.name][i]
                if c.is_coded:
                    row.append("NA" if v < 0 else c.categories[v])
                elif c.role in ("patient_id", "knee_side"):
                    row.append(v)
                elif np.isnan(v):
                    row.append("NA")
                elif c.role == "response":
                    row.append(str(int(v)))
                else:
                    row.append(fmt(v))
            w.writerow(row)
    if schema_path is not None:
        with atomic_writer(schema_path) as fh:
            fh.write(format_schema(cohort.schema))


# --------------------------------------------------------------------------
# column filtering


@dataclass(frozen=True)
class DropRecord:
    column: str
    reason: str
    missing_frac: float
    minor_frac: float


def _minor_frac(cohort: Cohort, name: str) -> float:
    spec = cohort.spec(name)
    if not spec.is_coded:
        return float("nan")
    codes = cohort.data[name]
    codes = codes[codes >= 0]
    if len(codes) == 0:
        return 0.0
    counts = np.bincount(codes, minlength=len(spec.categories))
    return float(counts.min() / len(codes))


def filter_columns(
    cohort: Cohort, max_missing_frac: float = 0.15, min_minor_frac: float = 0.05
) -> tuple[Cohort, list[DropRecord]]:
    """Drop sparse predictors.

    A predictor goes if its missing fraction is strictly above
    ``max_missing_frac``, or (coded predictors only) if its rarest category
    holds less than ``min_minor_frac`` of the non-missing cells. Unobserved
    categories count as frequency 0.
    """
    for v in (max_missing_frac, min_minor_frac):
        if not 0.0 < v < 1.0:
            raise CohortError(f"fraction {v} outside (0, 1)")
    report = []
    keep = []
    n = cohort.n_rows
    for name in cohort.predictors:
        miss = float(cohort.missing_mask(name).sum() / n) if n else 1.0
        minor = _minor_frac(cohort, name)
        if miss > max_missing_frac:
            report.append(DropRecord(name, "missing", miss, minor))
        elif cohort.spec(name).is_coded and minor < min_minor_frac:
            report.append(DropRecord(name, "sparse_category", miss, minor))
        else:
            keep.append(name)
    if not keep:
        raise CohortError("empty design: every predictor was dropped")
    return cohort.select_columns(keep), report


# --------------------------------------------------------------------------
# design matrix


@dataclass(frozen=True)
class DesignMatrix:
    feature_names: list
    X: np.ndarray
    y: np.ndarray
    patient_index: np.ndarray
    patient_ids: np.ndarray
    knee_sides: np.ndarray
    sources: dict
    n_excluded: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, rows) -> "DesignMatrix":
        rows = np.asarray(rows)
        pid = self.patient_ids[rows]
        _, index = np.unique(pid, return_inverse=True)
        return DesignMatrix(
            self.feature_names, self.X[rows], self.y[rows], index, pid,
            self.knee_sides[rows], self.sources, self.n_excluded,
        )

    def select_features(self, names) -> "DesignMatrix":
        cols = [self.feature_names.index(n) for n in names]
        return DesignMatrix(
            list(names), self.X[:, cols], self.y, self.patient_index, self.patient_ids,
            self.knee_sides, {n: self.sources[n] for n in names}, self.n_excluded,
        )


def build_design(cohort: Cohort, drop_incomplete_rows: bool = True) -> DesignMatrix:
    """Dummy-code predictors into a numeric matrix.

    Coded columns with categories ``[a, b, c]`` become indicators
    ``col=b`` and ``col=c``; the first category is the reference. Binary
    columns give one indicator named after the second category.
    """
    cols, names, sources = [], [], {}
    missing = np.zeros(cohort.n_rows, dtype=bool)
    for name in cohort.predictors:
        spec = cohort.spec(name)
        missing |= cohort.missing_mask(name)
        if spec.is_coded:
            codes = cohort.data[name]
            for k, cat in enumerate(spec.categories[1:], 1):
                ind = (codes == k).astype(float)
                ind[codes < 0] = np.nan
                cols.append(ind)
                fname = f"{name}={cat}"
                names.append(fname)
                sources[fname] = name
        else:
            cols.append(cohort.data[name].astype(float))
            names.append(name)
            sources[name] = name
    missing |= np.isnan(cohort.y)
    rows = ~missing if drop_incomplete_rows else np.ones(cohort.n_rows, dtype=bool)
    if not rows.any():
        raise CohortError("no complete rows left for the design matrix")
    X = np.column_stack(cols)[rows] if cols else np.empty((int(rows.sum()), 0))
    pid = cohort.patient_ids[rows]
    _, index = np.unique(pid, return_inverse=True)
    return DesignMatrix(
        names, X, cohort.y[rows].astype(float), index, pid, cohort.knee_sides[rows],
        sources, int((~rows).sum()),
    )


# --------------------------------------------------------------------------
# train/validation split


@dataclass(frozen=True)
class SplitPlan:
    train_patient_ids: frozenset
    validation_patient_ids: frozenset
    seed: int

    def train_mask(self, patient_ids) -> np.ndarray:
        return np.array([p in self.train_patient_ids for p in patient_ids], dtype=bool)

    def validation_mask(self, patient_ids) -> np.ndarray:
        return np.array([p in self.validation_patient_ids for p in patient_ids], dtype=bool)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_patients(cohort_or_ids, train_frac: float = 0.7, seed: int = 0) -> SplitPlan:
    """Random patient-level split; both knees of a patient stay together."""
    if not 0.0 < train_frac < 1.0:
        raise CohortError(f"train_frac {train_frac} outside (0, 1)")
    ids = cohort_or_ids.patient_ids if isinstance(cohort_or_ids, Cohort) else cohort_or_ids
    patients = sorted(set(ids))
    if len(patients) < 2:
        raise CohortError("need at least 2 patients to split")
    n_train = round_half_up(train_frac * len(patients))
    if n_train in (0, len(patients)):
        raise CohortError(f"train_frac {train_frac} leaves one side empty")
    order = np.random.default_rng(seed).permutation(len(patients))
    train = frozenset(patients[i] for i in order[:n_train])
    return SplitPlan(train, frozenset(patients) - train, seed)


# --------------------------------------------------------------------------
# descriptive statistics


def summarize(cohort: Cohort) -> list[dict]:
    """Long-format summary rows.

    Row kinds: ``numeric`` (mean, sd with ddof=1), ``category`` (frequency
    and percent over non-missing cells) and ``severity`` (count and percent
    per KL level).
    """
    rows = []
    for name in cohort.predictors:
        spec = cohort.spec(name)
        miss = cohort.missing_mask(name)
        if spec.is_coded:
            codes = cohort.data[name][~miss]
            counts = np.bincount(codes, minlength=len(spec.categories))
            for cat, cnt in zip(spec.categories, counts):
                pct = 100.0 * cnt / len(codes) if len(codes) else float("nan")
                rows.append(dict(kind="category", variable=name, level=cat,
                                 count=int(cnt), percent=pct))
        else:
            vals = cohort.data[name][~miss]
            mean = float(np.mean(vals)) if len(vals) else float("nan")
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
            rows.append(dict(kind="numeric", variable=name, mean=mean, sd=sd,
                             count=int(len(vals))))
    y = cohort.y[~np.isnan(cohort.y)]
    for level in SEVERITY_LEVELS:
        cnt = int(np.sum(y == level))
        rows.append(dict(kind="severity", variable=cohort.response, level=str(level),
                         count=cnt, percent=100.0 * cnt / len(y) if len(y) else float("nan")))
    return rows


def severity_table(cohort: Cohort, plan: SplitPlan | None = None) -> list[dict]:
    """Severity counts and percents in training / validation / total layout."""
    parts = {"total": np.ones(cohort.n_rows, dtype=bool)}
    if plan is not None:
        parts = {
            "training": plan.train_mask(cohort.patient_ids),
            "validation": plan.validation_mask(cohort.patient_ids),
            **parts,
        }
    out = []
    for level in SEVERITY_LEVELS:
        row = {"level": level}
        for label, mask in parts.items():
            y = cohort.y[mask]
            y = y[~np.isnan(y)]
            cnt = int(np.sum(y == level))
            row[f"{label}_count"] = cnt
            row[f"{label}_percent"] = 100.0 * cnt / len(y) if len(y) else float("nan")
        out.append(row)
    return out


def characteristics_table(cohort: Cohort, plan: SplitPlan | None = None) -> list[dict]:
    """Per-predictor summaries for each subset, one row per (variable, level)."""
    parts = {"total": cohort}
    if plan is not None:
        parts = {
            "training": cohort.subset(plan.train_mask(cohort.patient_ids)),
            "validation": cohort.subset(plan.validation_mask(cohort.patient_ids)),
            **parts,
        }
    merged: dict = {}
    for label, sub in parts.items():
        for r in summarize(sub):
            if r["kind"] == "severity":
                continue
            key = (r["variable"], r.get("level", ""))
            row = merged.setdefault(key, {"variable": r["variable"], "level": r.get("level", "")})
            if r["kind"] == "numeric":
                row[f"{label}_mean"] = r["mean"]
                row[f"{label}_sd"] = r["sd"]
            else:
                row[f"{label}_count"] = r["count"]
                row[f"{label}_percent"] = r["percent"]
    return list(merged.values())
