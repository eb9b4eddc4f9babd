"""End-to-end run: preprocess, correlate, fit EN / RF / LMM, evaluate.

Every stage reads its inputs from the run directory and writes its outputs
there, so the CLI can run stages one at a time and ``run_pipeline`` is just
the stages in order. Stage seeds derive from the master seed by stage name.

Run directory layout::

    cohort.csv, cohort_schema.txt, truth.txt      (synthetic source only)
    preprocess/  filtered.csv filtered_schema.txt drop_report.csv summary.csv
                 table1_severity.csv table2_characteristics.csv split.txt
    correlate/   heatmap.csv
    en/          cv_curve.csv coefficients.csv model.txt predictions.csv
    rf/          importances.csv oob.txt model.txt predictions.csv
    lmm/         variance_components.txt fixed_effects.csv blups.csv predictions.csv
    comparison.csv table3.csv baseline.csv manifest.txt
"""
from __future__ import annotations

import hashlib
import platform
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import elastic_net as en
from . import forest as rf
from . import lmm
from .dataset import (
    DROP_REPORT_COLUMNS, Cohort, DesignMatrix, SplitPlan, build_design, characteristics_table,
    filter_columns, load_cohort, severity_table, split_patients, summarize, write_cohort,
)
from .metrics import COMPARISON_COLUMNS, REPORT_COLUMNS, comparison_rows, severity_report, table3_rows
from .mixedcorr import HEATMAP_COLUMNS, correlation_matrix
from .synth import SynthSpec, generate_cohort, truth_items
from .textio import parse_kv, read_csv, read_kv, write_csv, write_kv

STAGES = ("synth", "preprocess", "correlate", "fit-en", "fit-rf", "fit-lmm", "evaluate")
MODEL_LABELS = {"en": "elastic_net", "lmm": "lmm", "rf": "random_forest"}
PREDICTION_COLUMNS = ("patient_id", "knee_side", "truth", "prediction")
SUMMARY_COLUMNS = ("kind", "variable", "level", "count", "percent", "mean", "sd")
COEF_COLUMNS = ("feature", "coefficient")
FIXED_EFFECT_COLUMNS = ("term", "estimate", "std_error")
BLUP_COLUMNS = ("patient_id", "n_knees", "blup")

# recorded in the manifest so a run directory documents its own conventions
DECISIONS = (
    "split=patient-level; both knees of a patient share a side",
    "cv=grouped by patient",
    "lmm.cluster=patient",
    "lmm.validation_prediction=fixed effects only (validation patients are unseen)",
    "binary-binary correlation=tetrachoric",
    "baseline=training-mean intercept-only predictor",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    data: str = ""
    schema: str = ""
    synthetic_patients: int = 1500
    synthetic_icc: float = 0.265
    synthetic_icc_scale: str = "response"
    train_frac: float = 0.7
    missing_max: float = 0.15
    minor_min: float = 0.05
    en_alpha: float = 0.5
    en_folds: int = 10
    en_repeats: int = 5
    en_n_lambda: int = 100
    rf_trees: int = 100
    rf_mtry: str = "auto"
    rf_min_leaf: int = 5
    rf_permutations: int = 5
    lmm_features: str = "from-en"

    def __post_init__(self):
        if bool(self.data) != bool(self.schema):
            raise ValueError("data and schema must be given together")
        if self.lmm_features not in ("from-en", "all"):
            raise ValueError("lmm_features must be 'from-en' or 'all'")
        if self.rf_mtry != "auto" and not self.rf_mtry.isdigit():
            raise ValueError("rf_mtry must be 'auto' or a positive integer")

    @property
    def synthetic(self) -> bool:
        return not self.data

    def items(self) -> list[tuple[str, object]]:
        return list(asdict(self).items())


def parse_config(text: str, **overrides) -> PipelineConfig:
    raw = {**parse_kv(text), **{k: v for k, v in overrides.items() if v is not None}}
    return _coerce(raw)


def _coerce(raw: dict) -> PipelineConfig:
    types = {f.name: f.type for f in fields(PipelineConfig)}
    unknown = set(raw) - set(types)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for k, v in raw.items():
        t = types[k]
        if not isinstance(v, str):
            out[k] = v
        elif t == "int":
            out[k] = int(v)
        elif t == "float":
            out[k] = float(v)
        else:
            out[k] = v
    return PipelineConfig(**out)


def load_config(path, **overrides) -> PipelineConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8"), **overrides)
    base = Path(path).parent
    if cfg.data and not Path(cfg.data).is_absolute():
        cfg = replace(cfg, data=str(base / cfg.data), schema=str(base / cfg.schema))
    return cfg


def write_config(cfg: PipelineConfig, path):
    write_kv(path, cfg.items(), header="koasev pipeline config")


def stage_seed(master: int, stage: str) -> int:
    """Seed for one stage, a function of the master seed and stage name only."""
    key = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence(master, spawn_key=(key,)).generate_state(1)[0])


# --------------------------------------------------------------------------
# run directory helpers


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def __truediv__(self, rel) -> Path:
        return self.root / rel

    def cohort(self) -> Cohort:
        return load_cohort(self / "preprocess/filtered.csv", self / "preprocess/filtered_schema.txt")

    def split(self) -> SplitPlan:
        kv = read_kv(self / "preprocess/split.txt")
        train = frozenset(kv["train_patients"].split(","))
        valid = frozenset(kv["validation_patients"].split(","))
        return SplitPlan(train, valid, int(kv["seed"]))

    def design(self) -> tuple[DesignMatrix, DesignMatrix]:
        d = build_design(self.cohort())
        plan = self.split()
        tr = d.subset(np.flatnonzero(plan.train_mask(d.patient_ids)))
        va = d.subset(np.flatnonzero(plan.validation_mask(d.patient_ids)))
        if tr.n == 0 or va.n == 0:
            raise ValueError("split leaves no complete rows on one side")
        return tr, va


def _require(path: Path, stage: str):
    if not path.exists():
        raise StageError(stage, f"missing input {path}; run the earlier stage first")


def _write_predictions(path, d: DesignMatrix, pred):
    rows = [dict(patient_id=p, knee_side=s, truth=t, prediction=float(v))
            for p, s, t, v in zip(d.patient_ids, d.knee_sides, d.y, pred)]
    write_csv(path, rows, PREDICTION_COLUMNS)


# --------------------------------------------------------------------------
# stages


def stage_synth(cfg: PipelineConfig, out) -> dict:
    run = RunDir(out)
    spec = SynthSpec(
        n_patients=cfg.synthetic_patients, icc=cfg.synthetic_icc,
        icc_scale=cfg.synthetic_icc_scale, seed=stage_seed(cfg.seed, "synth"),
    )
    cohort, truth = generate_cohort(spec)
    write_cohort(cohort, run / "cohort.csv", run / "cohort_schema.txt")
    write_kv(run / "truth.txt", truth_items(truth), header="synthetic cohort ground truth")
    return truth


def stage_preprocess(cfg: PipelineConfig, out) -> SplitPlan:
    run = RunDir(out)
    if cfg.synthetic:
        data, schema = run / "cohort.csv", run / "cohort_schema.txt"
        _require(data, "preprocess")
    else:
        data, schema = Path(cfg.data), Path(cfg.schema)
    cohort = load_cohort(data, schema)
    kept, report = filter_columns(cohort, cfg.missing_max, cfg.minor_min)
    write_cohort(kept, run / "preprocess/filtered.csv", run / "preprocess/filtered_schema.txt")
    write_csv(run / "preprocess/drop_report.csv", [asdict(r) for r in report], DROP_REPORT_COLUMNS)
    # split over patients that contribute at least one complete row
    d = build_design(kept)
    plan = split_patients(d.patient_ids, cfg.train_frac, stage_seed(cfg.seed, "preprocess"))
    write_kv(run / "preprocess/split.txt", [
        ("seed", plan.seed), ("train_frac", cfg.train_frac),
        ("train_patients", sorted(plan.train_patient_ids)),
        ("validation_patients", sorted(plan.validation_patient_ids)),
    ])
    write_csv(run / "preprocess/summary.csv", summarize(kept), SUMMARY_COLUMNS)
    sev = severity_table(kept, plan)
    write_csv(run / "preprocess/table1_severity.csv", sev, list(sev[0]))
    ch = characteristics_table(kept, plan)
    cols = list(dict.fromkeys(k for r in ch for k in r))
    write_csv(run / "preprocess/table2_characteristics.csv", ch, cols)
    return plan


def stage_correlate(cfg: PipelineConfig, out):
    run = RunDir(out)
    _require(run / "preprocess/filtered.csv", "correlate")
    cohort = run.cohort()
    names = [cohort.response, *cohort.predictors]
    cm = correlation_matrix(cohort, names)
    write_csv(run / "correlate/heatmap.csv", cm.long_table(), HEATMAP_COLUMNS)
    return cm


def stage_fit_en(cfg: PipelineConfig, out) -> en.ElasticNetFit:
    run = RunDir(out)
    _require(run / "preprocess/split.txt", "fit-en")
    tr, va = run.design()
    ecfg = en.EnConfig(alpha=cfg.en_alpha, n_lambda=cfg.en_n_lambda)
    cv = en.cross_validate(tr.X, tr.y, tr.patient_ids, ecfg, cfg.en_folds, cfg.en_repeats,
                           stage_seed(cfg.seed, "fit-en"))
    f = en.fit(tr.X, tr.y, ecfg, cv.chosen_lambda)
    write_csv(run / "en/cv_curve.csv", cv.curve_rows(), en.CV_CURVE_COLUMNS)
    write_csv(run / "en/coefficients.csv",
              [dict(feature=n, coefficient=float(c)) for n, c in zip(tr.feature_names, f.theta)],
              COEF_COLUMNS)
    en.save_model(f, tr.feature_names, run / "en/model.txt")
    _write_predictions(run / "en/predictions.csv", va, f.predict(va.X))
    return f


def stage_fit_rf(cfg: PipelineConfig, out) -> rf.ForestFit:
    run = RunDir(out)
    _require(run / "preprocess/split.txt", "fit-rf")
    tr, va = run.design()
    seed = stage_seed(cfg.seed, "fit-rf")
    mtry = None if cfg.rf_mtry == "auto" else int(cfg.rf_mtry)
    fcfg = rf.ForestConfig(n_trees=cfg.rf_trees, mtry=mtry, min_leaf=cfg.rf_min_leaf, seed=seed)
    f = rf.fit(tr.X, tr.y, fcfg)
    perm = rf.importance(f, va.X, va.y, cfg.rf_permutations, seed + 1)
    rows = sorted(
        (dict(feature=n, permutation_importance=float(a), impurity_importance=float(b))
         for n, a, b in zip(tr.feature_names, perm, f.impurity_importance)),
        key=lambda r: -r["permutation_importance"],
    )
    write_csv(run / "rf/importances.csv", rows, rf.IMPORTANCE_COLUMNS)
    write_kv(run / "rf/oob.txt", [("oob_rmse", f.oob_rmse), ("n_oob_missing", f.n_oob_missing),
                                  ("n_trees", cfg.rf_trees), ("mtry", fcfg.resolve_mtry(tr.X.shape[1])),
                                  ("seed", seed)])
    rf.save_model(f, tr.feature_names, run / "rf/model.txt")
    _write_predictions(run / "rf/predictions.csv", va, rf.predict(f, va.X))
    return f


def lmm_features(cfg: PipelineConfig, run: RunDir, names) -> list[str]:
    if cfg.lmm_features == "all":
        return list(names)
    path = run / "en/coefficients.csv"
    _require(path, "fit-lmm")
    return [r["feature"] for r in read_csv(path) if float(r["coefficient"]) != 0.0]


def stage_fit_lmm(cfg: PipelineConfig, out) -> lmm.LmmFit:
    run = RunDir(out)
    _require(run / "preprocess/split.txt", "fit-lmm")
    tr, va = run.design()
    feats = lmm_features(cfg, run, tr.feature_names)
    tr, va = tr.select_features(feats), va.select_features(feats)
    X_tr = np.column_stack([np.ones(tr.n), tr.X])
    X_va = np.column_stack([np.ones(va.n), va.X])
    d = lmm.LmmDesign(X_tr, tr.patient_ids, tr.y)
    f = lmm.fit_reml(d)
    test = lmm.lrt_random_effect(d)
    write_kv(run / "lmm/variance_components.txt", [
        ("sigma_u2", f.sigma_u2), ("sigma_e2", f.sigma_e2), ("icc", f.icc),
        ("reml_loglik", f.loglik), ("boundary", f.boundary), ("converged", f.converged),
        ("lrt_stat", test.stat), ("lrt_p_value", test.p_value),
        ("n_rows", d.n), ("n_patients", d.m), ("features", feats),
    ], header="random-intercept LMM, REML; LRT uses ML fits and a 50:50 chi2_0/chi2_1 mixture")
    se = np.sqrt(np.diag(f.cov_beta))
    write_csv(run / "lmm/fixed_effects.csv",
              [dict(term=t, estimate=float(b), std_error=float(s))
               for t, b, s in zip(["(intercept)", *feats], f.beta, se)], FIXED_EFFECT_COLUMNS)
    write_csv(run / "lmm/blups.csv",
              [dict(patient_id=p, n_knees=int(n), blup=float(b))
               for p, n, b in zip(f.cluster_labels, f.cluster_sizes, f.blups)], BLUP_COLUMNS)
    # validation patients are disjoint from training ones: fixed effects only
    _write_predictions(run / "lmm/predictions.csv", va, lmm.predict(f, X_va))
    return f


def _read_predictions(path):
    rows = read_csv(path)
    return (np.array([float(r["prediction"]) for r in rows]),
            np.array([float(r["truth"]) for r in rows]))


def stage_evaluate(cfg: PipelineConfig, out) -> dict:
    run = RunDir(out)
    reports = []
    truth = None
    for key in ("en", "lmm", "rf"):
        path = run / f"{key}/predictions.csv"
        if not path.exists():
            continue
        pred, y = _read_predictions(path)
        truth = y
        reports.append(severity_report(pred, y, MODEL_LABELS[key]))
    if not reports:
        raise StageError("evaluate", "no model predictions found")
    write_csv(run / "comparison.csv", comparison_rows(reports), COMPARISON_COLUMNS)
    t3 = table3_rows(reports)
    write_csv(run / "table3.csv", t3, list(t3[0]))
    tr, _ = run.design()
    base = severity_report(np.full(len(truth), float(np.mean(tr.y))), truth, "intercept_only")
    write_csv(run / "baseline.csv", [base.row()], REPORT_COLUMNS)
    return {"reports": reports, "baseline": base}


# --------------------------------------------------------------------------
# orchestration

STAGE_FUNCS = {
    "synth": stage_synth, "preprocess": stage_preprocess, "correlate": stage_correlate,
    "fit-en": stage_fit_en, "fit-rf": stage_fit_rf, "fit-lmm": stage_fit_lmm,
    "evaluate": stage_evaluate,
}


def run_stage(stage: str, cfg: PipelineConfig, out):
    try:
        return STAGE_FUNCS[stage](cfg, out)
    except StageError:
        raise
    except Exception as exc:  # tag and re-raise with the stage name
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: PipelineConfig, out, stages) -> Path:
    run = RunDir(out)
    files = sorted(p for p in run.root.rglob("*")
                   if p.is_file() and p.name != "manifest.txt" and not p.name.startswith("."))
    items = [
        ("koasev_version", __version__), ("python", platform.python_version()),
        ("numpy", np.__version__), ("scipy", scipy.__version__),
        ("master_seed", cfg.seed), ("stages", list(stages)),
    ]
    items += [(f"seed[{s}]", stage_seed(cfg.seed, s)) for s in stages]
    items += [(f"config.{k}", v) for k, v in cfg.items()]
    items += [(f"decision[{i}]", d) for i, d in enumerate(DECISIONS)]
    items += [(f"sha256[{p.relative_to(run.root).as_posix()}]", _sha256(p)) for p in files]
    path = run / "manifest.txt"
    write_kv(path, items, header="koasev run manifest")
    return path


def run_pipeline(cfg: PipelineConfig, out) -> dict:
    """Run every stage in order; returns the evaluate-stage result."""
    Path(out).mkdir(parents=True, exist_ok=True)
    stages = [s for s in STAGES if s != "synth" or cfg.synthetic]
    result = None
    for s in stages:
        result = run_stage(s, cfg, out)
    write_manifest(cfg, out, stages)
    return result
