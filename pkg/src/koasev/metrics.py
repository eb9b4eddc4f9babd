"""RMSE metrics and per-severity-level reports."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import SEVERITY_LEVELS

# Published per-level RMSEs (levels 0-4, then overall). Reference constants
# only; they come from access-controlled data and are not reproduced here.
PUBLISHED_RMSE = {
    "elastic_net": (0.917, 0.563, 0.881, 1.320, 2.140, 0.973),
    "lmm": (0.920, 0.591, 0.895, 1.320, 2.10, 0.978),
    "random_forest": (0.909, 0.511, 0.853, 1.270, 2.02, 0.943),
    "cnn": (0.816, 0.485, 0.840, 0.795, 0.846, 0.770),
}
REFERENCE_LABEL = "paper-reported, not reproduced"

REPORT_COLUMNS = ("model", "level_0", "level_1", "level_2", "level_3", "level_4", "overall")
COMPARISON_COLUMNS = REPORT_COLUMNS + ("paper_reported_overall",)


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth differ in length")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass(frozen=True)
class SeverityReport:
    """Per-level and overall RMSE; absent levels have rmse nan and n 0."""

    label: str
    levels: tuple
    rmse_by_level: tuple
    n_by_level: tuple
    overall: float

    def row(self) -> dict:
        out = {"model": self.label, "overall": self.overall}
        for lv, r in zip(self.levels, self.rmse_by_level):
            out[f"level_{lv}"] = r
        return out

    def absent(self) -> list:
        return [lv for lv, n in zip(self.levels, self.n_by_level) if n == 0]


def severity_report(pred, truth_levels, label: str = "model") -> SeverityReport:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth_levels, dtype=float)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("pred and truth must be non-empty and equal length")
    if not np.all(np.isin(truth, SEVERITY_LEVELS)):
        raise ValueError("truth levels must be in 0..4")
    sq = (pred - truth) ** 2
    by, ns = [], []
    for lv in SEVERITY_LEVELS:
        m = truth == lv
        ns.append(int(m.sum()))
        by.append(float(np.sqrt(sq[m].mean())) if m.any() else float("nan"))
    return SeverityReport(label, SEVERITY_LEVELS, tuple(by), tuple(ns), float(np.sqrt(sq.mean())))


def comparison_rows(reports, published_keys=None) -> list[dict]:
    """Rows for the comparison table, with the published overall value alongside."""
    published_keys = published_keys or {}
    rows = []
    for rep in reports:
        r = rep.row()
        key = published_keys.get(rep.label, rep.label)
        r["paper_reported_overall"] = PUBLISHED_RMSE[key][-1] if key in PUBLISHED_RMSE else None
        rows.append(r)
    return rows


def table3_rows(reports) -> list[dict]:
    """Levels as rows and models as columns, plus the published reference columns."""
    rows = []
    names = [("level_%d" % lv, i) for i, lv in enumerate(SEVERITY_LEVELS)] + [("overall", 5)]
    for label, i in names:
        row = {"severity_level": label}
        for rep in reports:
            row[rep.label] = rep.overall if label == "overall" else rep.rmse_by_level[i]
        for key, vals in PUBLISHED_RMSE.items():
            row[f"published_{key}"] = vals[i]
        rows.append(row)
    return rows
